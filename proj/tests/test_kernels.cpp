#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#ifdef _OPENMP
#include <omp.h>
#endif

#include "propot/kernels.hpp"
#include "propot/rng.hpp"
#include "propot/tensor.hpp"

using namespace propot;

TEST_CASE("matmul matches serial reference for all transpose variants") {
    Rng rng(101);
    for (bool ta : {false, true}) {
        for (bool tb : {false, true}) {
            const int64_t m = 17, k = 23, n = 9;
            Tensor a = ta ? rng.normal_tensor(k, m, 1.0) : rng.normal_tensor(m, k, 1.0);
            Tensor b = tb ? rng.normal_tensor(n, k, 1.0) : rng.normal_tensor(k, n, 1.0);
            Tensor c(m, n), c_ref(m, n);
            kernels::matmul(a.data(), b.data(), c.data(), m, k, n, ta, tb);
            kernels::ref::matmul(a.data(), b.data(), c_ref.data(), m, k, n, ta, tb);
            CHECK(c.max_abs_diff(c_ref) == 0.0);
        }
    }
}

TEST_CASE("matmul_acc accumulates alpha-scaled product") {
    Rng rng(7);
    const int64_t m = 5, k = 8, n = 6;
    Tensor a = rng.normal_tensor(m, k, 1.0), b = rng.normal_tensor(k, n, 1.0);
    Tensor c = rng.normal_tensor(m, n, 1.0);
    Tensor expect = c;
    Tensor prod(m, n);
    kernels::ref::matmul(a.data(), b.data(), prod.data(), m, k, n, false, false);
    for (int64_t i = 0; i < expect.numel(); ++i) expect[i] += 0.5 * prod[i];
    kernels::matmul_acc(a.data(), b.data(), c.data(), m, k, n, false, false, 0.5);
    CHECK(c.max_abs_diff(expect) < 1e-15);
}

TEST_CASE("softmax_rows matches reference and rows sum to one") {
    Rng rng(33);
    Tensor x = rng.normal_tensor(40, 13, 3.0);
    Tensor y(40, 13), y_ref(40, 13);
    kernels::softmax_rows(x.data(), y.data(), 40, 13);
    kernels::ref::softmax_rows(x.data(), y_ref.data(), 40, 13);
    CHECK(y.max_abs_diff(y_ref) == 0.0);
    for (int64_t i = 0; i < 40; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < 13; ++j) s += y.at(i, j);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("log_softmax is log of softmax") {
    Rng rng(34);
    Tensor x = rng.normal_tensor(10, 7, 2.0);
    Tensor p(10, 7), lp(10, 7);
    kernels::softmax_rows(x.data(), p.data(), 10, 7);
    kernels::log_softmax_rows(x.data(), lp.data(), 10, 7);
    for (int64_t i = 0; i < p.numel(); ++i) CHECK(std::exp(lp[i]) == doctest::Approx(p[i]).epsilon(1e-12));
}

TEST_CASE("attention kernels match reference") {
    Rng rng(55);
    const int64_t batch = 3, sq = 5, sk = 7, d = 16, heads = 4;
    Tensor q = rng.normal_tensor(batch * sq, d, 1.0);
    Tensor k = rng.normal_tensor(batch * sk, d, 1.0);
    Tensor s(batch * heads * sq, sk), s_ref(batch * heads * sq, sk);
    kernels::attention_scores_fwd(q.data(), k.data(), s.data(), batch, sq, sk, d, heads);
    kernels::ref::attention_scores_fwd(q.data(), k.data(), s_ref.data(), batch, sq, sk, d, heads);
    CHECK(s.max_abs_diff(s_ref) == 0.0);

    Tensor attn(batch * heads * sq, sk);
    kernels::softmax_rows(s.data(), attn.data(), attn.rows(), attn.cols());
    Tensor v = rng.normal_tensor(batch * sk, d, 1.0);
    Tensor o(batch * sq, d), o_ref(batch * sq, d);
    kernels::attention_apply_fwd(attn.data(), v.data(), o.data(), batch, sq, sk, d, heads);
    kernels::ref::attention_apply_fwd(attn.data(), v.data(), o_ref.data(), batch, sq, sk, d, heads);
    CHECK(o.max_abs_diff(o_ref) < 1e-14);
}

TEST_CASE("layer_norm and gelu match reference") {
    Rng rng(77);
    const int64_t r = 12, c = 32;
    Tensor x = rng.normal_tensor(r, c, 2.0);
    Tensor g = rng.uniform_tensor(1, c, 0.5, 1.5), b = rng.normal_tensor(1, c, 0.2);
    Tensor y(r, c), y_ref(r, c), mu(r, 1), rstd(r, 1), mu2(r, 1), rstd2(r, 1);
    kernels::layer_norm_fwd(x.data(), g.data(), b.data(), y.data(), mu.data(), rstd.data(), r, c, 1e-5);
    kernels::ref::layer_norm_fwd(x.data(), g.data(), b.data(), y_ref.data(), mu2.data(), rstd2.data(), r, c, 1e-5);
    CHECK(y.max_abs_diff(y_ref) == 0.0);

    Tensor z(r, c), z_ref(r, c);
    kernels::gelu_fwd(x.data(), z.data(), x.numel());
    kernels::ref::gelu_fwd(x.data(), z_ref.data(), x.numel());
    CHECK(z.max_abs_diff(z_ref) == 0.0);
}

#ifdef _OPENMP
TEST_CASE("results are independent of the OpenMP thread count") {
    Rng rng(99);
    const int64_t m = 96, k = 64, n = 80;
    Tensor a = rng.normal_tensor(m, k, 1.0), b = rng.normal_tensor(k, n, 1.0);
    Tensor c1(m, n), c3(m, n);
    const int prev = omp_get_max_threads();
    omp_set_num_threads(1);
    kernels::matmul(a.data(), b.data(), c1.data(), m, k, n, false, false);
    omp_set_num_threads(3);
    kernels::matmul(a.data(), b.data(), c3.data(), m, k, n, false, false);
    omp_set_num_threads(prev);
    CHECK(c1.max_abs_diff(c3) == 0.0);
}
#endif
