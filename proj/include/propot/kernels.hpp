#pragma once

#include <cstdint>

#include "propot/tensor.hpp"

// Data-parallel inner loops of the project. Production kernels parallelize
// over independent output elements with OpenMP; the per-element accumulation
// order is fixed, so results are bitwise identical for any thread count.
// kernels::ref holds the serial textbook implementations kept for testing;
// tools/bench_kernels compares the two.

namespace propot::kernels {

// C (M x N) = op(A) * op(B), op = optional transpose.
// A is M x K (or K x M when trans_a), B is K x N (or N x K when trans_b).
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
            bool trans_a, bool trans_b);

// C += alpha * op(A) * op(B); used by backward passes.
void matmul_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
                bool trans_a, bool trans_b, double alpha);

// Row-wise softmax of X (R x C) into Y.
void softmax_rows(const double* x, double* y, int64_t r, int64_t c);

// Row-wise log-softmax of X (R x C) into Y.
void log_softmax_rows(const double* x, double* y, int64_t r, int64_t c);

// y = layer_norm(x) * gamma + beta per row; mu/rstd (R) are stashed for backward.
void layer_norm_fwd(const double* x, const double* gamma, const double* beta, double* y,
                    double* mu, double* rstd, int64_t r, int64_t c, double eps);
void layer_norm_bwd(const double* x, const double* gamma, const double* dy, const double* mu,
                    const double* rstd, double* dx, double* dgamma, double* dbeta, int64_t r,
                    int64_t c);

// tanh-approximation GELU
void gelu_fwd(const double* x, double* y, int64_t n);
void gelu_bwd(const double* x, const double* dy, double* dx, int64_t n);

// Multi-head attention scores: Q is (B*Sq, D), K is (B*Sk, D) with D = H * Dh.
// scores (B*H*Sq, Sk), scores[(b*H+h)*Sq + i, j] = <q_i^h, k_j^h> / sqrt(Dh).
void attention_scores_fwd(const double* q, const double* k, double* scores, int64_t batch,
                          int64_t sq, int64_t sk, int64_t d, int64_t heads);
void attention_scores_bwd(const double* q, const double* k, const double* dscores, double* dq,
                          double* dk, int64_t batch, int64_t sq, int64_t sk, int64_t d,
                          int64_t heads);

// out (B*Sq, D): per head, out = attn * V with attn (B*H*Sq, Sk), V (B*Sk, D).
void attention_apply_fwd(const double* attn, const double* v, double* out, int64_t batch,
                         int64_t sq, int64_t sk, int64_t d, int64_t heads);
void attention_apply_bwd(const double* attn, const double* v, const double* dout, double* dattn,
                         double* dv, int64_t batch, int64_t sq, int64_t sk, int64_t d,
                         int64_t heads);

// y += alpha * x
void axpy(const double* x, double* y, int64_t n, double alpha);

namespace ref {
void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
            bool trans_a, bool trans_b);
void softmax_rows(const double* x, double* y, int64_t r, int64_t c);
void attention_scores_fwd(const double* q, const double* k, double* scores, int64_t batch,
                          int64_t sq, int64_t sk, int64_t d, int64_t heads);
void attention_apply_fwd(const double* attn, const double* v, double* out, int64_t batch,
                         int64_t sq, int64_t sk, int64_t d, int64_t heads);
void layer_norm_fwd(const double* x, const double* gamma, const double* beta, double* y,
                    double* mu, double* rstd, int64_t r, int64_t c, double eps);
void gelu_fwd(const double* x, double* y, int64_t n);
}  // namespace ref

}  // namespace propot::kernels
