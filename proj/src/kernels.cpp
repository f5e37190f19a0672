#include "propot/kernels.hpp"

#include <cmath>

namespace propot::kernels {

namespace {
// Parallelism is only worth it for buffers above this many output elements.
constexpr int64_t kParGrain = 4096;
}  // namespace

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
            bool trans_a, bool trans_b) {
    for (int64_t i = 0; i < m * n; ++i) c[i] = 0.0;
    matmul_acc(a, b, c, m, k, n, trans_a, trans_b, 1.0);
}

void matmul_acc(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
                bool trans_a, bool trans_b, double alpha) {
    // Each output row is owned by one thread; the k-accumulation order is the
    // same in every variant, keeping results independent of the thread count.
    if (!trans_a && !trans_b) {
#pragma omp parallel for if (m * n > kParGrain) schedule(static)
        for (int64_t i = 0; i < m; ++i) {
            const double* ai = a + i * k;
            double* ci = c + i * n;
            for (int64_t p = 0; p < k; ++p) {
                double av = alpha * ai[p];
                const double* bp = b + p * n;
                for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // B given as (n x k); C[i,j] = sum_p A[i,p] * B[j,p]
#pragma omp parallel for if (m * n > kParGrain) schedule(static)
        for (int64_t i = 0; i < m; ++i) {
            const double* ai = a + i * k;
            double* ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double s = 0.0;
                for (int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
                ci[j] += alpha * s;
            }
        }
    } else if (trans_a && !trans_b) {
        // A given as (k x m); C[i,j] = sum_p A[p,i] * B[p,j]
#pragma omp parallel for if (m * n > kParGrain) schedule(static)
        for (int64_t i = 0; i < m; ++i) {
            double* ci = c + i * n;
            for (int64_t p = 0; p < k; ++p) {
                double av = alpha * a[p * m + i];
                const double* bp = b + p * n;
                for (int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
            }
        }
    } else {
        // C[i,j] = sum_p A[p,i] * B[j,p]
#pragma omp parallel for if (m * n > kParGrain) schedule(static)
        for (int64_t i = 0; i < m; ++i) {
            double* ci = c + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const double* bj = b + j * k;
                double s = 0.0;
                for (int64_t p = 0; p < k; ++p) s += a[p * m + i] * bj[p];
                ci[j] += alpha * s;
            }
        }
    }
}

void softmax_rows(const double* x, double* y, int64_t r, int64_t c) {
#pragma omp parallel for if (r * c > kParGrain) schedule(static)
    for (int64_t i = 0; i < r; ++i) {
        const double* xi = x + i * c;
        double* yi = y + i * c;
        double mx = xi[0];
        for (int64_t j = 1; j < c; ++j) mx = xi[j] > mx ? xi[j] : mx;
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            z += yi[j];
        }
        for (int64_t j = 0; j < c; ++j) yi[j] /= z;
    }
}

void log_softmax_rows(const double* x, double* y, int64_t r, int64_t c) {
#pragma omp parallel for if (r * c > kParGrain) schedule(static)
    for (int64_t i = 0; i < r; ++i) {
        const double* xi = x + i * c;
        double* yi = y + i * c;
        double mx = xi[0];
        for (int64_t j = 1; j < c; ++j) mx = xi[j] > mx ? xi[j] : mx;
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) z += std::exp(xi[j] - mx);
        double lz = std::log(z) + mx;
        for (int64_t j = 0; j < c; ++j) yi[j] = xi[j] - lz;
    }
}

void layer_norm_fwd(const double* x, const double* gamma, const double* beta, double* y,
                    double* mu, double* rstd, int64_t r, int64_t c, double eps) {
#pragma omp parallel for if (r * c > kParGrain) schedule(static)
    for (int64_t i = 0; i < r; ++i) {
        const double* xi = x + i * c;
        double* yi = y + i * c;
        double m = 0.0;
        for (int64_t j = 0; j < c; ++j) m += xi[j];
        m /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double d = xi[j] - m;
            var += d * d;
        }
        var /= static_cast<double>(c);
        double rs = 1.0 / std::sqrt(var + eps);
        mu[i] = m;
        rstd[i] = rs;
        for (int64_t j = 0; j < c; ++j) yi[j] = (xi[j] - m) * rs * gamma[j] + beta[j];
    }
}

void layer_norm_bwd(const double* x, const double* gamma, const double* dy, const double* mu,
                    const double* rstd, double* dx, double* dgamma, double* dbeta, int64_t r,
                    int64_t c) {
    // dgamma/dbeta reduce over rows: parallelize over columns so each output
    // element is written by exactly one thread, rows accumulated in order.
#pragma omp parallel for if (r * c > kParGrain) schedule(static)
    for (int64_t j = 0; j < c; ++j) {
        double dg = 0.0, db = 0.0;
        for (int64_t i = 0; i < r; ++i) {
            double xhat = (x[i * c + j] - mu[i]) * rstd[i];
            dg += dy[i * c + j] * xhat;
            db += dy[i * c + j];
        }
        dgamma[j] += dg;
        dbeta[j] += db;
    }
#pragma omp parallel for if (r * c > kParGrain) schedule(static)
    for (int64_t i = 0; i < r; ++i) {
        const double* xi = x + i * c;
        const double* dyi = dy + i * c;
        double* dxi = dx + i * c;
        double sum_g = 0.0, sum_gx = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double g = dyi[j] * gamma[j];
            double xhat = (xi[j] - mu[i]) * rstd[i];
            sum_g += g;
            sum_gx += g * xhat;
        }
        double inv_c = 1.0 / static_cast<double>(c);
        for (int64_t j = 0; j < c; ++j) {
            double g = dyi[j] * gamma[j];
            double xhat = (xi[j] - mu[i]) * rstd[i];
            dxi[j] += rstd[i] * (g - inv_c * sum_g - inv_c * xhat * sum_gx);
        }
    }
}

namespace {
constexpr double kGeluC = 0.7978845608028653558798921198687;  // sqrt(2/pi)
}

void gelu_fwd(const double* x, double* y, int64_t n) {
#pragma omp parallel for if (n > kParGrain) schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        double v = x[i];
        y[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v)));
    }
}

void gelu_bwd(const double* x, const double* dy, double* dx, int64_t n) {
#pragma omp parallel for if (n > kParGrain) schedule(static)
    for (int64_t i = 0; i < n; ++i) {
        double v = x[i];
        double u = kGeluC * (v + 0.044715 * v * v * v);
        double t = std::tanh(u);
        double sech2 = 1.0 - t * t;
        double du = kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
        dx[i] += dy[i] * (0.5 * (1.0 + t) + 0.5 * v * sech2 * du);
    }
}

void attention_scores_fwd(const double* q, const double* k, double* scores, int64_t batch,
                          int64_t sq, int64_t sk, int64_t d, int64_t heads) {
    const int64_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const int64_t rows = batch * heads * sq;
#pragma omp parallel for if (rows * sk > kParGrain) schedule(static)
    for (int64_t row = 0; row < rows; ++row) {
        const int64_t i = row % sq;
        const int64_t h = (row / sq) % heads;
        const int64_t b = row / (sq * heads);
        const double* qrow = q + (b * sq + i) * d + h * dh;
        double* srow = scores + row * sk;
        for (int64_t j = 0; j < sk; ++j) {
            const double* krow = k + (b * sk + j) * d + h * dh;
            double s = 0.0;
            for (int64_t p = 0; p < dh; ++p) s += qrow[p] * krow[p];
            srow[j] = s * scale;
        }
    }
}

void attention_scores_bwd(const double* q, const double* k, const double* dscores, double* dq,
                          double* dk, int64_t batch, int64_t sq, int64_t sk, int64_t d,
                          int64_t heads) {
    const int64_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    // dq[b,i,h,:] = scale * sum_j dS[b,h,i,j] * k[b,j,h,:]
#pragma omp parallel for if (batch * sq * d > kParGrain) schedule(static)
    for (int64_t bi = 0; bi < batch * sq; ++bi) {
        const int64_t b = bi / sq;
        const int64_t i = bi % sq;
        for (int64_t h = 0; h < heads; ++h) {
            const double* ds = dscores + ((b * heads + h) * sq + i) * sk;
            double* dqrow = dq + bi * d + h * dh;
            for (int64_t j = 0; j < sk; ++j) {
                const double g = scale * ds[j];
                const double* krow = k + (b * sk + j) * d + h * dh;
                for (int64_t p = 0; p < dh; ++p) dqrow[p] += g * krow[p];
            }
        }
    }
    // dk[b,j,h,:] = scale * sum_i dS[b,h,i,j] * q[b,i,h,:]
#pragma omp parallel for if (batch * sk * d > kParGrain) schedule(static)
    for (int64_t bj = 0; bj < batch * sk; ++bj) {
        const int64_t b = bj / sk;
        const int64_t j = bj % sk;
        for (int64_t h = 0; h < heads; ++h) {
            double* dkrow = dk + bj * d + h * dh;
            for (int64_t i = 0; i < sq; ++i) {
                const double g = scale * dscores[((b * heads + h) * sq + i) * sk + j];
                const double* qrow = q + (b * sq + i) * d + h * dh;
                for (int64_t p = 0; p < dh; ++p) dkrow[p] += g * qrow[p];
            }
        }
    }
}

void attention_apply_fwd(const double* attn, const double* v, double* out, int64_t batch,
                         int64_t sq, int64_t sk, int64_t d, int64_t heads) {
    const int64_t dh = d / heads;
#pragma omp parallel for if (batch * sq * d > kParGrain) schedule(static)
    for (int64_t bi = 0; bi < batch * sq; ++bi) {
        const int64_t b = bi / sq;
        const int64_t i = bi % sq;
        double* orow = out + bi * d;
        for (int64_t h = 0; h < heads; ++h) {
            const double* arow = attn + ((b * heads + h) * sq + i) * sk;
            double* oh = orow + h * dh;
            for (int64_t p = 0; p < dh; ++p) oh[p] = 0.0;
            for (int64_t j = 0; j < sk; ++j) {
                const double a = arow[j];
                const double* vrow = v + (b * sk + j) * d + h * dh;
                for (int64_t p = 0; p < dh; ++p) oh[p] += a * vrow[p];
            }
        }
    }
}

void attention_apply_bwd(const double* attn, const double* v, const double* dout, double* dattn,
                         double* dv, int64_t batch, int64_t sq, int64_t sk, int64_t d,
                         int64_t heads) {
    const int64_t dh = d / heads;
    // dattn[b,h,i,j] = <dout[b,i,h,:], v[b,j,h,:]>
#pragma omp parallel for if (batch * heads * sq * sk > kParGrain) schedule(static)
    for (int64_t row = 0; row < batch * heads * sq; ++row) {
        const int64_t i = row % sq;
        const int64_t h = (row / sq) % heads;
        const int64_t b = row / (sq * heads);
        const double* dorow = dout + (b * sq + i) * d + h * dh;
        double* darow = dattn + row * sk;
        for (int64_t j = 0; j < sk; ++j) {
            const double* vrow = v + (b * sk + j) * d + h * dh;
            double s = 0.0;
            for (int64_t p = 0; p < dh; ++p) s += dorow[p] * vrow[p];
            darow[j] += s;
        }
    }
    // dv[b,j,h,:] = sum_i attn[b,h,i,j] * dout[b,i,h,:]
#pragma omp parallel for if (batch * sk * d > kParGrain) schedule(static)
    for (int64_t bj = 0; bj < batch * sk; ++bj) {
        const int64_t b = bj / sk;
        const int64_t j = bj % sk;
        for (int64_t h = 0; h < heads; ++h) {
            double* dvrow = dv + bj * d + h * dh;
            for (int64_t i = 0; i < sq; ++i) {
                const double a = attn[((b * heads + h) * sq + i) * sk + j];
                const double* dorow = dout + (b * sq + i) * d + h * dh;
                for (int64_t p = 0; p < dh; ++p) dvrow[p] += a * dorow[p];
            }
        }
    }
}

void axpy(const double* x, double* y, int64_t n, double alpha) {
#pragma omp parallel for if (n > kParGrain) schedule(static)
    for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

namespace ref {

void matmul(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
            bool trans_a, bool trans_b) {
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (int64_t p = 0; p < k; ++p) {
                double av = trans_a ? a[p * m + i] : a[i * k + p];
                double bv = trans_b ? b[j * k + p] : b[p * n + j];
                s += av * bv;
            }
            c[i * n + j] = s;
        }
    }
}

void softmax_rows(const double* x, double* y, int64_t r, int64_t c) {
    for (int64_t i = 0; i < r; ++i) {
        const double* xi = x + i * c;
        double* yi = y + i * c;
        double mx = xi[0];
        for (int64_t j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            z += yi[j];
        }
        for (int64_t j = 0; j < c; ++j) yi[j] /= z;
    }
}

void attention_scores_fwd(const double* q, const double* k, double* scores, int64_t batch,
                          int64_t sq, int64_t sk, int64_t d, int64_t heads) {
    const int64_t dh = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t i = 0; i < sq; ++i)
                for (int64_t j = 0; j < sk; ++j) {
                    double s = 0.0;
                    for (int64_t p = 0; p < dh; ++p)
                        s += q[(b * sq + i) * d + h * dh + p] * k[(b * sk + j) * d + h * dh + p];
                    scores[((b * heads + h) * sq + i) * sk + j] = s * scale;
                }
}

void attention_apply_fwd(const double* attn, const double* v, double* out, int64_t batch,
                         int64_t sq, int64_t sk, int64_t d, int64_t heads) {
    const int64_t dh = d / heads;
    for (int64_t i = 0; i < batch * sq * d; ++i) out[i] = 0.0;
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t h = 0; h < heads; ++h)
            for (int64_t i = 0; i < sq; ++i)
                for (int64_t j = 0; j < sk; ++j) {
                    const double a = attn[((b * heads + h) * sq + i) * sk + j];
                    for (int64_t p = 0; p < dh; ++p)
                        out[(b * sq + i) * d + h * dh + p] += a * v[(b * sk + j) * d + h * dh + p];
                }
}

void layer_norm_fwd(const double* x, const double* gamma, const double* beta, double* y,
                    double* mu, double* rstd, int64_t r, int64_t c, double eps) {
    for (int64_t i = 0; i < r; ++i) {
        double m = 0.0;
        for (int64_t j = 0; j < c; ++j) m += x[i * c + j];
        m /= static_cast<double>(c);
        double var = 0.0;
        for (int64_t j = 0; j < c; ++j) {
            double dd = x[i * c + j] - m;
            var += dd * dd;
        }
        var /= static_cast<double>(c);
        double rs = 1.0 / std::sqrt(var + eps);
        mu[i] = m;
        rstd[i] = rs;
        for (int64_t j = 0; j < c; ++j) y[i * c + j] = (x[i * c + j] - m) * rs * gamma[j] + beta[j];
    }
}

void gelu_fwd(const double* x, double* y, int64_t n) {
    for (int64_t i = 0; i < n; ++i) {
        double v = x[i];
        y[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v)));
    }
}

}  // namespace ref

}  // namespace propot::kernels
