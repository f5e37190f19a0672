#pragma once

#include <string>
#include <vector>

#include "propot/autodiff.hpp"
#include "propot/rng.hpp"

namespace propot {

// One pre-norm attention block (multi-head attention + feed-forward, both with
// residual connections). Self- and cross-attention share the structure; cross
// blocks normalize keys/values with their own layer norm.
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(const std::string& name, int64_t d, int64_t heads, int64_t ffn_hidden,
                     bool cross, Rng& rng);

    Var forward_self(Tape& t, const Var& x, int64_t batch, int64_t seq);
    Var forward_cross(Tape& t, const Var& q, const Var& kv, int64_t batch, int64_t sq, int64_t sk);

    std::vector<Param*> params();
    int64_t heads() const { return heads_; }

private:
    Var attend(Tape& t, const Var& x_q, const Var& x_kv, int64_t batch, int64_t sq, int64_t sk);

    int64_t d_ = 0;
    int64_t heads_ = 0;
    bool cross_ = false;
    Param ln1_g_, ln1_b_;
    Param lnkv_g_, lnkv_b_;  // cross blocks only
    Param wq_, bq_, wk_, bk_, wv_, bv_, wo_, bo_;
    Param ln2_g_, ln2_b_;
    Param w1_, b1_, w2_, b2_;
};

// Repeats a (1 x d) or (S x d) parameter across a batch via gather.
Var tile_rows(Tape& t, const Var& v, int64_t times);

}  // namespace propot
