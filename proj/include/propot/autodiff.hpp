#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "propot/tensor.hpp"

namespace propot {

// A trainable tensor with persistent gradient and Adam state.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m;
    Tensor adam_v;

    Param() = default;
    Param(std::string n, Tensor v)
        : name(std::move(n)),
          value(std::move(v)),
          grad(value.rows(), value.cols()),
          adam_m(value.rows(), value.cols()),
          adam_v(value.rows(), value.cols()) {}

    int64_t numel() const { return value.numel(); }
    void zero_grad() { grad.fill(0.0); }
};

struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool needs_grad = false;
    std::function<void()> backprop;  // reads this->grad, accumulates into parents
    Tensor* external_grad = nullptr;  // parameter leaves flush here
};

using Var = std::shared_ptr<Node>;

inline Tensor& grad_buf(const Var& v) {
    if (v->grad.empty()) v->grad = Tensor(v->value.rows(), v->value.cols());
    return v->grad;
}

// Reverse-mode tape. Node creation order is a valid topological order, so
// backward() is a single reverse sweep. One tape per forward pass.
class Tape {
public:
    Var constant(Tensor t);
    Var leaf(Param& p);

    // `loss` must be 1x1. Accumulates into every reachable Param::grad.
    void backward(const Var& loss);

    size_t size() const { return nodes_.size(); }

private:
    friend Var make_op(Tape&, Tensor, bool, std::function<void()>);
    std::vector<Var> nodes_;
};

Var make_op(Tape& tape, Tensor value, bool needs_grad, std::function<void()> backprop);

// ---- elementwise / shape ----
Var add(Tape& t, const Var& a, const Var& b);
Var sub(Tape& t, const Var& a, const Var& b);
Var mul(Tape& t, const Var& a, const Var& b);
Var scale(Tape& t, const Var& a, double c);
Var gelu(Tape& t, const Var& a);
Var relu(Tape& t, const Var& a);
Var concat_rows(Tape& t, const Var& a, const Var& b);
Var concat_cols(Tape& t, const std::vector<Var>& cols);       // each (R x 1)
Var hconcat(Tape& t, const Var& a, const Var& b);             // (R x Ca+Cb)
Var scale_by(Tape& t, const Var& x, const Var& s);            // s is (1 x 1)
Var gather_rows(Tape& t, const Var& a, std::vector<int64_t> idx);
Var pick_cols(Tape& t, const Var& a, std::vector<int64_t> col_per_row);  // (R x 1)
Var add_row_broadcast(Tape& t, const Var& x, const Var& bias_1xc);
Var mul_col_broadcast(Tape& t, const Var& x, const Var& w_rx1);
Var rowwise_dot(Tape& t, const Var& a, const Var& b);          // (R x 1)

// ---- linear algebra ----
Var matmul(Tape& t, const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var linear(Tape& t, const Var& x, const Var& w, const Var& bias);

// ---- normalization / softmax ----
Var softmax_rows(Tape& t, const Var& a);
Var log_softmax_rows(Tape& t, const Var& a);
Var layer_norm(Tape& t, const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_rows(Tape& t, const Var& x);

// ---- attention ----
Var attention_scores(Tape& t, const Var& q, const Var& k, int64_t batch, int64_t sq, int64_t sk,
                     int64_t heads);
Var attention_apply(Tape& t, const Var& attn, const Var& v, int64_t batch, int64_t sq, int64_t sk,
                    int64_t heads);

// ---- embedding / reductions ----
Var embedding(Tape& t, const Var& table, const std::vector<int64_t>& ids);
Var sum_all(Tape& t, const Var& a);
Var mean_all(Tape& t, const Var& a);

inline double scalar(const Var& v) { return v->value[0]; }

}  // namespace propot
