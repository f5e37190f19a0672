// Times the OpenMP kernels against their serial reference implementations.
// Usage: bench_kernels [reps]

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "propot/kernels.hpp"
#include "propot/rng.hpp"
#include "propot/tensor.hpp"

using namespace propot;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm up
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const std::string& name, double ser_ms, double par_ms, double max_diff) {
    std::printf("%-26s serial %9.3f ms   parallel %9.3f ms   speedup %5.2fx   max|diff| %.3g\n",
                name.c_str(), ser_ms, par_ms, ser_ms / par_ms, max_diff);
}

}  // namespace

int main(int argc, char** argv) {
    const int reps = argc > 1 ? std::atoi(argv[1]) : 5;
#ifdef _OPENMP
    std::printf("OpenMP threads: %d\n", omp_get_max_threads());
#else
    std::printf("built without OpenMP\n");
#endif

    Rng rng(12345);

    {
        const int64_t m = 512, k = 512, n = 512;
        Tensor a = rng.normal_tensor(m, k, 1.0), b = rng.normal_tensor(k, n, 1.0);
        Tensor c_par(m, n), c_ser(m, n);
        double ser = time_ms([&] { kernels::ref::matmul(a.data(), b.data(), c_ser.data(), m, k, n, false, false); }, reps);
        double par = time_ms([&] { kernels::matmul(a.data(), b.data(), c_par.data(), m, k, n, false, false); }, reps);
        report("matmul 512x512x512", ser, par, c_par.max_abs_diff(c_ser));
    }
    {
        const int64_t r = 4096, c = 512;
        Tensor x = rng.normal_tensor(r, c, 2.0);
        Tensor y_par(r, c), y_ser(r, c);
        double ser = time_ms([&] { kernels::ref::softmax_rows(x.data(), y_ser.data(), r, c); }, reps);
        double par = time_ms([&] { kernels::softmax_rows(x.data(), y_par.data(), r, c); }, reps);
        report("softmax_rows 4096x512", ser, par, y_par.max_abs_diff(y_ser));
    }
    {
        const int64_t batch = 16, sq = 77, sk = 77, d = 256, heads = 4;
        Tensor q = rng.normal_tensor(batch * sq, d, 1.0), k = rng.normal_tensor(batch * sk, d, 1.0);
        Tensor s_par(batch * heads * sq, sk), s_ser(batch * heads * sq, sk);
        double ser = time_ms([&] { kernels::ref::attention_scores_fwd(q.data(), k.data(), s_ser.data(), batch, sq, sk, d, heads); }, reps);
        double par = time_ms([&] { kernels::attention_scores_fwd(q.data(), k.data(), s_par.data(), batch, sq, sk, d, heads); }, reps);
        report("attn_scores B16 S77 d256", ser, par, s_par.max_abs_diff(s_ser));

        Tensor attn(batch * heads * sq, sk);
        kernels::softmax_rows(s_par.data(), attn.data(), attn.rows(), attn.cols());
        Tensor v = rng.normal_tensor(batch * sk, d, 1.0);
        Tensor o_par(batch * sq, d), o_ser(batch * sq, d);
        double ser2 = time_ms([&] { kernels::ref::attention_apply_fwd(attn.data(), v.data(), o_ser.data(), batch, sq, sk, d, heads); }, reps);
        double par2 = time_ms([&] { kernels::attention_apply_fwd(attn.data(), v.data(), o_par.data(), batch, sq, sk, d, heads); }, reps);
        report("attn_apply B16 S77 d256", ser2, par2, o_par.max_abs_diff(o_ser));
    }
    {
        const int64_t r = 8192, c = 512;
        Tensor x = rng.normal_tensor(r, c, 1.0);
        Tensor g = rng.uniform_tensor(1, c, 0.5, 1.5), b = rng.normal_tensor(1, c, 0.1);
        Tensor y_par(r, c), y_ser(r, c), mu(r, 1), rstd(r, 1);
        double ser = time_ms([&] { kernels::ref::layer_norm_fwd(x.data(), g.data(), b.data(), y_ser.data(), mu.data(), rstd.data(), r, c, 1e-5); }, reps);
        double par = time_ms([&] { kernels::layer_norm_fwd(x.data(), g.data(), b.data(), y_par.data(), mu.data(), rstd.data(), r, c, 1e-5); }, reps);
        report("layer_norm 8192x512", ser, par, y_par.max_abs_diff(y_ser));
    }
    {
        const int64_t n = 1 << 22;
        Tensor x = rng.normal_tensor(n, 1, 1.0);
        Tensor y_par(n, 1), y_ser(n, 1);
        double ser = time_ms([&] { kernels::ref::gelu_fwd(x.data(), y_ser.data(), n); }, reps);
        double par = time_ms([&] { kernels::gelu_fwd(x.data(), y_par.data(), n); }, reps);
        report("gelu 4M", ser, par, y_par.max_abs_diff(y_ser));
    }
    return 0;
}
