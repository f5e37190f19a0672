#include "propot/autodiff.hpp"

#include <cmath>
#include <stdexcept>

#include "propot/kernels.hpp"

namespace propot {

Var make_op(Tape& tape, Tensor value, bool needs_grad, std::function<void()> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->needs_grad = needs_grad;
    if (needs_grad) n->backprop = std::move(backprop);
    tape.nodes_.push_back(n);
    return n;
}

Var Tape::constant(Tensor t) {
    auto n = std::make_shared<Node>();
    n->value = std::move(t);
    nodes_.push_back(n);
    return n;
}

Var Tape::leaf(Param& p) {
    auto n = std::make_shared<Node>();
    n->value = p.value;
    n->needs_grad = true;
    n->external_grad = &p.grad;
    nodes_.push_back(n);
    return n;
}

void Tape::backward(const Var& loss) {
    if (loss->value.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    grad_buf(loss)[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        Node& n = **it;
        if (!n.needs_grad || n.grad.empty()) continue;
        if (n.backprop) n.backprop();
        if (n.external_grad) kernels::axpy(n.grad.data(), n.external_grad->data(), n.grad.numel(), 1.0);
    }
}

namespace {

void accum(const Var& v, const Tensor& g) {
    if (!v->needs_grad) return;
    kernels::axpy(g.data(), grad_buf(v).data(), g.numel(), 1.0);
}

bool any_grad(const Var& a) { return a->needs_grad; }
bool any_grad(const Var& a, const Var& b) { return a->needs_grad || b->needs_grad; }
bool any_grad(const Var& a, const Var& b, const Var& c) {
    return a->needs_grad || b->needs_grad || c->needs_grad;
}

}  // namespace

Var add(Tape& t, const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
    Tensor out = a->value;
    kernels::axpy(b->value.data(), out.data(), out.numel(), 1.0);
    auto node = make_op(t, std::move(out), any_grad(a, b), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a, b] {
            accum(a, self->grad);
            accum(b, self->grad);
        };
    }
    return node;
}

Var sub(Tape& t, const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("sub: shape mismatch");
    Tensor out = a->value;
    kernels::axpy(b->value.data(), out.data(), out.numel(), -1.0);
    auto node = make_op(t, std::move(out), any_grad(a, b), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a, b] {
            accum(a, self->grad);
            if (b->needs_grad) kernels::axpy(self->grad.data(), grad_buf(b).data(), self->grad.numel(), -1.0);
        };
    }
    return node;
}

Var mul(Tape& t, const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("mul: shape mismatch");
    Tensor out(a->value.rows(), a->value.cols());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * b->value[i];
    auto node = make_op(t, std::move(out), any_grad(a, b), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a, b] {
            if (a->needs_grad) {
                Tensor& ga = grad_buf(a);
                for (int64_t i = 0; i < ga.numel(); ++i) ga[i] += self->grad[i] * b->value[i];
            }
            if (b->needs_grad) {
                Tensor& gb = grad_buf(b);
                for (int64_t i = 0; i < gb.numel(); ++i) gb[i] += self->grad[i] * a->value[i];
            }
        };
    }
    return node;
}

Var scale(Tape& t, const Var& a, double c) {
    Tensor out(a->value.rows(), a->value.cols());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] * c;
    auto node = make_op(t, std::move(out), any_grad(a), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a, c] {
            if (a->needs_grad) kernels::axpy(self->grad.data(), grad_buf(a).data(), self->grad.numel(), c);
        };
    }
    return node;
}

Var gelu(Tape& t, const Var& a) {
    Tensor out(a->value.rows(), a->value.cols());
    kernels::gelu_fwd(a->value.data(), out.data(), out.numel());
    auto node = make_op(t, std::move(out), any_grad(a), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a] {
            if (a->needs_grad)
                kernels::gelu_bwd(a->value.data(), self->grad.data(), grad_buf(a).data(), self->grad.numel());
        };
    }
    return node;
}

Var relu(Tape& t, const Var& a) {
    Tensor out(a->value.rows(), a->value.cols());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
    auto node = make_op(t, std::move(out), any_grad(a), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a] {
            if (!a->needs_grad) return;
            Tensor& ga = grad_buf(a);
            for (int64_t i = 0; i < ga.numel(); ++i)
                if (a->value[i] > 0.0) ga[i] += self->grad[i];
        };
    }
    return node;
}

Var concat_rows(Tape& t, const Var& a, const Var& b) {
    if (a->value.cols() != b->value.cols()) throw std::invalid_argument("concat_rows: cols differ");
    Tensor out(a->value.rows() + b->value.rows(), a->value.cols());
    std::copy(a->value.data(), a->value.data() + a->value.numel(), out.data());
    std::copy(b->value.data(), b->value.data() + b->value.numel(), out.data() + a->value.numel());
    auto node = make_op(t, std::move(out), any_grad(a, b), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a, b] {
            if (a->needs_grad)
                kernels::axpy(self->grad.data(), grad_buf(a).data(), a->value.numel(), 1.0);
            if (b->needs_grad)
                kernels::axpy(self->grad.data() + a->value.numel(), grad_buf(b).data(), b->value.numel(), 1.0);
        };
    }
    return node;
}

Var concat_cols(Tape& t, const std::vector<Var>& cols) {
    if (cols.empty()) throw std::invalid_argument("concat_cols: empty");
    const int64_t r = cols[0]->value.rows();
    const int64_t k = static_cast<int64_t>(cols.size());
    Tensor out(r, k);
    bool ng = false;
    for (int64_t j = 0; j < k; ++j) {
        if (cols[j]->value.rows() != r || cols[j]->value.cols() != 1)
            throw std::invalid_argument("concat_cols: each input must be (R x 1)");
        ng = ng || cols[j]->needs_grad;
        for (int64_t i = 0; i < r; ++i) out.at(i, j) = cols[j]->value[i];
    }
    auto node = make_op(t, std::move(out), ng, nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, cols, r, k] {
            for (int64_t j = 0; j < k; ++j) {
                if (!cols[j]->needs_grad) continue;
                Tensor& g = grad_buf(cols[j]);
                for (int64_t i = 0; i < r; ++i) g[i] += self->grad.at(i, j);
            }
        };
    }
    return node;
}

Var hconcat(Tape& t, const Var& a, const Var& b) {
    if (a->value.rows() != b->value.rows()) throw std::invalid_argument("hconcat: rows differ");
    const int64_t r = a->value.rows(), ca = a->value.cols(), cb = b->value.cols();
    Tensor out(r, ca + cb);
    for (int64_t i = 0; i < r; ++i) {
        std::copy(a->value.row(i), a->value.row(i) + ca, out.row(i));
        std::copy(b->value.row(i), b->value.row(i) + cb, out.row(i) + ca);
    }
    auto node = make_op(t, std::move(out), any_grad(a, b), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a, b, r, ca, cb] {
            if (a->needs_grad) {
                Tensor& g = grad_buf(a);
                for (int64_t i = 0; i < r; ++i) kernels::axpy(self->grad.row(i), g.row(i), ca, 1.0);
            }
            if (b->needs_grad) {
                Tensor& g = grad_buf(b);
                for (int64_t i = 0; i < r; ++i)
                    kernels::axpy(self->grad.row(i) + ca, g.row(i), cb, 1.0);
            }
        };
    }
    return node;
}

Var scale_by(Tape& t, const Var& x, const Var& s) {
    if (s->value.numel() != 1) throw std::invalid_argument("scale_by: scalar required");
    Tensor out(x->value.rows(), x->value.cols());
    const double sv = s->value[0];
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = x->value[i] * sv;
    auto node = make_op(t, std::move(out), any_grad(x, s), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, x, s, sv] {
            if (x->needs_grad)
                kernels::axpy(self->grad.data(), grad_buf(x).data(), self->grad.numel(), sv);
            if (s->needs_grad) {
                double acc = 0.0;
                for (int64_t i = 0; i < self->grad.numel(); ++i) acc += self->grad[i] * x->value[i];
                grad_buf(s)[0] += acc;
            }
        };
    }
    return node;
}

Var gather_rows(Tape& t, const Var& a, std::vector<int64_t> idx) {
    const int64_t c = a->value.cols();
    Tensor out(static_cast<int64_t>(idx.size()), c);
    for (size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= a->value.rows()) throw std::out_of_range("gather_rows: index");
        std::copy(a->value.row(idx[i]), a->value.row(idx[i]) + c, out.row(static_cast<int64_t>(i)));
    }
    auto node = make_op(t, std::move(out), any_grad(a), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a, idx = std::move(idx), c] {
            if (!a->needs_grad) return;
            Tensor& g = grad_buf(a);
            for (size_t i = 0; i < idx.size(); ++i)
                kernels::axpy(self->grad.row(static_cast<int64_t>(i)), g.row(idx[i]), c, 1.0);
        };
    }
    return node;
}

Var pick_cols(Tape& t, const Var& a, std::vector<int64_t> col_per_row) {
    if (static_cast<int64_t>(col_per_row.size()) != a->value.rows())
        throw std::invalid_argument("pick_cols: one column index per row required");
    Tensor out(a->value.rows(), 1);
    for (int64_t i = 0; i < a->value.rows(); ++i) {
        if (col_per_row[i] < 0 || col_per_row[i] >= a->value.cols())
            throw std::out_of_range("pick_cols: column index");
        out[i] = a->value.at(i, col_per_row[i]);
    }
    auto node = make_op(t, std::move(out), any_grad(a), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a, cols = std::move(col_per_row)] {
            if (!a->needs_grad) return;
            Tensor& g = grad_buf(a);
            for (int64_t i = 0; i < g.rows(); ++i) g.at(i, cols[i]) += self->grad[i];
        };
    }
    return node;
}

Var add_row_broadcast(Tape& t, const Var& x, const Var& bias) {
    if (bias->value.rows() != 1 || bias->value.cols() != x->value.cols())
        throw std::invalid_argument("add_row_broadcast: bias must be (1 x C)");
    Tensor out = x->value;
    const int64_t r = out.rows(), c = out.cols();
    for (int64_t i = 0; i < r; ++i) kernels::axpy(bias->value.data(), out.row(i), c, 1.0);
    auto node = make_op(t, std::move(out), any_grad(x, bias), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, x, bias, r, c] {
            accum(x, self->grad);
            if (bias->needs_grad) {
                Tensor& g = grad_buf(bias);
                for (int64_t j = 0; j < c; ++j) {
                    double s = 0.0;
                    for (int64_t i = 0; i < r; ++i) s += self->grad.at(i, j);
                    g[j] += s;
                }
            }
        };
    }
    return node;
}

Var mul_col_broadcast(Tape& t, const Var& x, const Var& w) {
    if (w->value.rows() != x->value.rows() || w->value.cols() != 1)
        throw std::invalid_argument("mul_col_broadcast: weight must be (R x 1)");
    const int64_t r = x->value.rows(), c = x->value.cols();
    Tensor out(r, c);
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out.at(i, j) = x->value.at(i, j) * w->value[i];
    auto node = make_op(t, std::move(out), any_grad(x, w), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, x, w, r, c] {
            if (x->needs_grad) {
                Tensor& g = grad_buf(x);
                for (int64_t i = 0; i < r; ++i)
                    kernels::axpy(self->grad.row(i), g.row(i), c, w->value[i]);
            }
            if (w->needs_grad) {
                Tensor& g = grad_buf(w);
                for (int64_t i = 0; i < r; ++i) {
                    double s = 0.0;
                    for (int64_t j = 0; j < c; ++j) s += self->grad.at(i, j) * x->value.at(i, j);
                    g[i] += s;
                }
            }
        };
    }
    return node;
}

Var rowwise_dot(Tape& t, const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("rowwise_dot: shape mismatch");
    const int64_t r = a->value.rows(), c = a->value.cols();
    Tensor out(r, 1);
    for (int64_t i = 0; i < r; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) s += a->value.at(i, j) * b->value.at(i, j);
        out[i] = s;
    }
    auto node = make_op(t, std::move(out), any_grad(a, b), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a, b, r, c] {
            if (a->needs_grad) {
                Tensor& g = grad_buf(a);
                for (int64_t i = 0; i < r; ++i) kernels::axpy(b->value.row(i), g.row(i), c, self->grad[i]);
            }
            if (b->needs_grad) {
                Tensor& g = grad_buf(b);
                for (int64_t i = 0; i < r; ++i) kernels::axpy(a->value.row(i), g.row(i), c, self->grad[i]);
            }
        };
    }
    return node;
}

Var matmul(Tape& t, const Var& a, const Var& b, bool trans_a, bool trans_b) {
    const int64_t m = trans_a ? a->value.cols() : a->value.rows();
    const int64_t k = trans_a ? a->value.rows() : a->value.cols();
    const int64_t kb = trans_b ? b->value.cols() : b->value.rows();
    const int64_t n = trans_b ? b->value.rows() : b->value.cols();
    if (k != kb)
        throw std::invalid_argument("matmul: inner dims " + a->value.shape_str() + " x " +
                                    b->value.shape_str());
    Tensor out(m, n);
    kernels::matmul(a->value.data(), b->value.data(), out.data(), m, k, n, trans_a, trans_b);
    auto node = make_op(t, std::move(out), any_grad(a, b), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a, b, m, k, n, trans_a, trans_b] {
            const double* g = self->grad.data();
            if (a->needs_grad) {
                Tensor& ga = grad_buf(a);
                if (!trans_a)  // dA = dC * op(B)^T
                    kernels::matmul_acc(g, b->value.data(), ga.data(), m, n, k, false, !trans_b, 1.0);
                else  // dA^T accumulated at (k x m): dA = op(B) * dC^T
                    kernels::matmul_acc(b->value.data(), g, ga.data(), k, n, m, trans_b, true, 1.0);
            }
            if (b->needs_grad) {
                Tensor& gb = grad_buf(b);
                if (!trans_b)  // dB = op(A)^T * dC
                    kernels::matmul_acc(a->value.data(), g, gb.data(), k, m, n, !trans_a, false, 1.0);
                else  // dB at (n x k): dB = dC^T * op(A)
                    kernels::matmul_acc(g, a->value.data(), gb.data(), n, m, k, true, trans_a, 1.0);
            }
        };
    }
    return node;
}

Var linear(Tape& t, const Var& x, const Var& w, const Var& bias) {
    return add_row_broadcast(t, matmul(t, x, w), bias);
}

Var softmax_rows(Tape& t, const Var& a) {
    Tensor out(a->value.rows(), a->value.cols());
    kernels::softmax_rows(a->value.data(), out.data(), out.rows(), out.cols());
    auto node = make_op(t, std::move(out), any_grad(a), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a] {
            if (!a->needs_grad) return;
            Tensor& g = grad_buf(a);
            const int64_t r = self->value.rows(), c = self->value.cols();
            for (int64_t i = 0; i < r; ++i) {
                const double* y = self->value.row(i);
                const double* dy = self->grad.row(i);
                double dot = 0.0;
                for (int64_t j = 0; j < c; ++j) dot += y[j] * dy[j];
                double* gi = g.row(i);
                for (int64_t j = 0; j < c; ++j) gi[j] += y[j] * (dy[j] - dot);
            }
        };
    }
    return node;
}

Var log_softmax_rows(Tape& t, const Var& a) {
    Tensor out(a->value.rows(), a->value.cols());
    kernels::log_softmax_rows(a->value.data(), out.data(), out.rows(), out.cols());
    auto node = make_op(t, std::move(out), any_grad(a), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a] {
            if (!a->needs_grad) return;
            Tensor& g = grad_buf(a);
            const int64_t r = self->value.rows(), c = self->value.cols();
            for (int64_t i = 0; i < r; ++i) {
                const double* y = self->value.row(i);
                const double* dy = self->grad.row(i);
                double s = 0.0;
                for (int64_t j = 0; j < c; ++j) s += dy[j];
                double* gi = g.row(i);
                for (int64_t j = 0; j < c; ++j) gi[j] += dy[j] - std::exp(y[j]) * s;
            }
        };
    }
    return node;
}

Var layer_norm(Tape& t, const Var& x, const Var& gamma, const Var& beta, double eps) {
    const int64_t r = x->value.rows(), c = x->value.cols();
    if (gamma->value.numel() != c || beta->value.numel() != c)
        throw std::invalid_argument("layer_norm: gamma/beta must have C elements");
    Tensor out(r, c);
    auto mu = std::make_shared<Tensor>(r, 1);
    auto rstd = std::make_shared<Tensor>(r, 1);
    kernels::layer_norm_fwd(x->value.data(), gamma->value.data(), beta->value.data(), out.data(),
                            mu->data(), rstd->data(), r, c, eps);
    auto node = make_op(t, std::move(out), any_grad(x, gamma, beta), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, x, gamma, beta, mu, rstd, r, c] {
            Tensor dx(r, c), dgamma(1, c), dbeta(1, c);
            kernels::layer_norm_bwd(x->value.data(), gamma->value.data(), self->grad.data(),
                                    mu->data(), rstd->data(), dx.data(), dgamma.data(),
                                    dbeta.data(), r, c);
            accum(x, dx);
            accum(gamma, dgamma);
            accum(beta, dbeta);
        };
    }
    return node;
}

Var l2_normalize_rows(Tape& t, const Var& x) {
    const int64_t r = x->value.rows(), c = x->value.cols();
    Tensor out(r, c);
    auto inv_norm = std::make_shared<Tensor>(r, 1);
    for (int64_t i = 0; i < r; ++i) {
        double s = 0.0;
        const double* xi = x->value.row(i);
        for (int64_t j = 0; j < c; ++j) s += xi[j] * xi[j];
        double inv = 1.0 / std::sqrt(s + 1e-24);
        (*inv_norm)[i] = inv;
        for (int64_t j = 0; j < c; ++j) out.at(i, j) = xi[j] * inv;
    }
    auto node = make_op(t, std::move(out), any_grad(x), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, x, inv_norm, r, c] {
            if (!x->needs_grad) return;
            Tensor& g = grad_buf(x);
            for (int64_t i = 0; i < r; ++i) {
                const double* y = self->value.row(i);
                const double* dy = self->grad.row(i);
                double dot = 0.0;
                for (int64_t j = 0; j < c; ++j) dot += y[j] * dy[j];
                double* gi = g.row(i);
                const double inv = (*inv_norm)[i];
                for (int64_t j = 0; j < c; ++j) gi[j] += inv * (dy[j] - y[j] * dot);
            }
        };
    }
    return node;
}

Var attention_scores(Tape& t, const Var& q, const Var& k, int64_t batch, int64_t sq, int64_t sk,
                     int64_t heads) {
    const int64_t d = q->value.cols();
    if (q->value.rows() != batch * sq || k->value.rows() != batch * sk || k->value.cols() != d)
        throw std::invalid_argument("attention_scores: shape mismatch");
    if (d % heads != 0) throw std::invalid_argument("attention_scores: heads must divide d");
    Tensor out(batch * heads * sq, sk);
    kernels::attention_scores_fwd(q->value.data(), k->value.data(), out.data(), batch, sq, sk, d, heads);
    auto node = make_op(t, std::move(out), any_grad(q, k), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, q, k, batch, sq, sk, d, heads] {
            Tensor dq(batch * sq, d), dk(batch * sk, d);
            kernels::attention_scores_bwd(q->value.data(), k->value.data(), self->grad.data(),
                                          dq.data(), dk.data(), batch, sq, sk, d, heads);
            accum(q, dq);
            accum(k, dk);
        };
    }
    return node;
}

Var attention_apply(Tape& t, const Var& attn, const Var& v, int64_t batch, int64_t sq, int64_t sk,
                    int64_t heads) {
    const int64_t d = v->value.cols();
    if (attn->value.rows() != batch * heads * sq || attn->value.cols() != sk ||
        v->value.rows() != batch * sk)
        throw std::invalid_argument("attention_apply: shape mismatch");
    Tensor out(batch * sq, d);
    kernels::attention_apply_fwd(attn->value.data(), v->value.data(), out.data(), batch, sq, sk, d, heads);
    auto node = make_op(t, std::move(out), any_grad(attn, v), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, attn, v, batch, sq, sk, d, heads] {
            Tensor dattn(batch * heads * sq, sk), dv(batch * sk, d);
            kernels::attention_apply_bwd(attn->value.data(), v->value.data(), self->grad.data(),
                                         dattn.data(), dv.data(), batch, sq, sk, d, heads);
            accum(attn, dattn);
            accum(v, dv);
        };
    }
    return node;
}

Var embedding(Tape& t, const Var& table, const std::vector<int64_t>& ids) {
    const int64_t d = table->value.cols();
    Tensor out(static_cast<int64_t>(ids.size()), d);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= table->value.rows())
            throw std::out_of_range("embedding: id " + std::to_string(ids[i]));
        std::copy(table->value.row(ids[i]), table->value.row(ids[i]) + d,
                  out.row(static_cast<int64_t>(i)));
    }
    auto node = make_op(t, std::move(out), any_grad(table), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, table, ids, d] {
            if (!table->needs_grad) return;
            Tensor& g = grad_buf(table);
            for (size_t i = 0; i < ids.size(); ++i)
                kernels::axpy(self->grad.row(static_cast<int64_t>(i)), g.row(ids[i]), d, 1.0);
        };
    }
    return node;
}

Var sum_all(Tape& t, const Var& a) {
    Tensor out(1, 1);
    double s = 0.0;
    for (int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
    out[0] = s;
    auto node = make_op(t, std::move(out), any_grad(a), nullptr);
    if (node->needs_grad) {
        Node* self = node.get();
        node->backprop = [self, a] {
            if (!a->needs_grad) return;
            Tensor& g = grad_buf(a);
            const double gv = self->grad[0];
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += gv;
        };
    }
    return node;
}

Var mean_all(Tape& t, const Var& a) { return scale(t, sum_all(t, a), 1.0 / static_cast<double>(a->value.numel())); }

}  // namespace propot
