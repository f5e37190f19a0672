#include "propot/transformer.hpp"

namespace propot {

namespace {
Tensor ones_row(int64_t c) {
    Tensor t(1, c, 1.0);
    return t;
}
}  // namespace

TransformerBlock::TransformerBlock(const std::string& name, int64_t d, int64_t heads,
                                   int64_t ffn_hidden, bool cross, Rng& rng)
    : d_(d), heads_(heads), cross_(cross) {
    const double s = 0.02;
    auto w = [&](const std::string& suffix, int64_t r, int64_t c) {
        return Param(name + "." + suffix, rng.fork(name + suffix).normal_tensor(r, c, s));
    };
    auto zeros = [&](const std::string& suffix, int64_t r, int64_t c) {
        return Param(name + "." + suffix, Tensor(r, c));
    };
    ln1_g_ = Param(name + ".ln1_g", ones_row(d));
    ln1_b_ = zeros("ln1_b", 1, d);
    if (cross_) {
        lnkv_g_ = Param(name + ".lnkv_g", ones_row(d));
        lnkv_b_ = zeros("lnkv_b", 1, d);
    }
    wq_ = w("wq", d, d);
    bq_ = zeros("bq", 1, d);
    wk_ = w("wk", d, d);
    bk_ = zeros("bk", 1, d);
    wv_ = w("wv", d, d);
    bv_ = zeros("bv", 1, d);
    wo_ = w("wo", d, d);
    bo_ = zeros("bo", 1, d);
    ln2_g_ = Param(name + ".ln2_g", ones_row(d));
    ln2_b_ = zeros("ln2_b", 1, d);
    w1_ = w("w1", d, ffn_hidden);
    b1_ = zeros("b1", 1, ffn_hidden);
    w2_ = w("w2", ffn_hidden, d);
    b2_ = zeros("b2", 1, d);
}

Var TransformerBlock::attend(Tape& t, const Var& x_q, const Var& x_kv, int64_t batch, int64_t sq,
                             int64_t sk) {
    Var q = linear(t, x_q, t.leaf(wq_), t.leaf(bq_));
    Var k = linear(t, x_kv, t.leaf(wk_), t.leaf(bk_));
    Var v = linear(t, x_kv, t.leaf(wv_), t.leaf(bv_));
    Var scores = attention_scores(t, q, k, batch, sq, sk, heads_);
    Var attn = softmax_rows(t, scores);
    Var ctx = attention_apply(t, attn, v, batch, sq, sk, heads_);
    return linear(t, ctx, t.leaf(wo_), t.leaf(bo_));
}

Var TransformerBlock::forward_self(Tape& t, const Var& x, int64_t batch, int64_t seq) {
    Var h = layer_norm(t, x, t.leaf(ln1_g_), t.leaf(ln1_b_));
    Var x1 = add(t, x, attend(t, h, h, batch, seq, seq));
    Var h2 = layer_norm(t, x1, t.leaf(ln2_g_), t.leaf(ln2_b_));
    Var f = linear(t, gelu(t, linear(t, h2, t.leaf(w1_), t.leaf(b1_))), t.leaf(w2_), t.leaf(b2_));
    return add(t, x1, f);
}

Var TransformerBlock::forward_cross(Tape& t, const Var& q, const Var& kv, int64_t batch,
                                    int64_t sq, int64_t sk) {
    Var hq = layer_norm(t, q, t.leaf(ln1_g_), t.leaf(ln1_b_));
    Var hkv = layer_norm(t, kv, t.leaf(lnkv_g_), t.leaf(lnkv_b_));
    Var x1 = add(t, q, attend(t, hq, hkv, batch, sq, sk));
    Var h2 = layer_norm(t, x1, t.leaf(ln2_g_), t.leaf(ln2_b_));
    Var f = linear(t, gelu(t, linear(t, h2, t.leaf(w1_), t.leaf(b1_))), t.leaf(w2_), t.leaf(b2_));
    return add(t, x1, f);
}

std::vector<Param*> TransformerBlock::params() {
    std::vector<Param*> out = {&ln1_g_, &ln1_b_, &wq_, &bq_, &wk_, &bk_, &wv_, &bv_,
                               &wo_,    &bo_,    &ln2_g_, &ln2_b_, &w1_, &b1_, &w2_, &b2_};
    if (cross_) {
        out.push_back(&lnkv_g_);
        out.push_back(&lnkv_b_);
    }
    return out;
}

Var tile_rows(Tape& t, const Var& v, int64_t times) {
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(times * v->value.rows()));
    for (int64_t b = 0; b < times; ++b)
        for (int64_t r = 0; r < v->value.rows(); ++r) idx.push_back(r);
    return gather_rows(t, v, std::move(idx));
}

}  // namespace propot
