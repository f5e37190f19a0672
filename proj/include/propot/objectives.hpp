#pragma once

#include <string>
#include <vector>

#include "propot/autodiff.hpp"
#include "propot/rng.hpp"
#include "propot/transformer.hpp"

namespace propot {

struct LossConfig {
    double tau = 0.02;
    double epsilon = 1e-8;
    double lambda1 = 0.2;
    double lambda2 = 1.0;
    bool literal_no_log_p2i = false;  // keep the printed (log-free) ratio form

    void validate() const;
};

struct LossBundle {
    double sdm = 0.0;
    double id = 0.0;
    double p2i = 0.0;
    double mlm = 0.0;
    double total = 0.0;
};

// cos(a_i, b_j) / tau for all row pairs: (Ra x Rb)
Var cosine_matrix(Tape& t, const Var& a, const Var& b, double tau);

// mean over rows of -log softmax(logits)[row, label]
Var cross_entropy_mean(Tape& t, const Var& logits, const std::vector<int64_t>& labels);

// Similarity distribution matching: KL(p || q + eps) in both directions, with
// p the row-softmax of cosine/tau and q uniform over same-identity columns.
Var sdm_loss(Tape& t, const Var& v_feat, const Var& t_feat, const std::vector<int64_t>& labels,
             const LossConfig& cfg);

// Prototype-to-instance contrastive loss over batch-present identities.
// prototype_identity[i] gives the dense identity of prototype row i; every
// batch label must have a prototype row.
Var p2i_loss(Tape& t, const Var& v_feat, const Var& t_feat, const Var& proto_v, const Var& proto_t,
             const std::vector<int64_t>& labels, const std::vector<int64_t>& prototype_identity,
             const LossConfig& cfg);

// Identity classifier shared between modalities.
class IdClassifier {
public:
    IdClassifier() = default;
    IdClassifier(int64_t d, int64_t n_identities, Rng rng);
    Var loss(Tape& t, const Var& v_feat, const Var& t_feat, const std::vector<int64_t>& labels);
    std::vector<Param*> params() { return {&w_, &b_}; }
    int64_t n_identities() const { return w_.value.cols(); }

private:
    Param w_, b_;
};

// Cross-modal masked-token head: one cross-attention block where text tokens
// query image tokens, then a vocabulary classifier at the masked positions.
class MlmHead {
public:
    struct Out {
        Var loss;                      // scalar (constant 0 when nothing is masked)
        Var logits;                    // n_masked x vocab (null when nothing is masked)
        std::vector<int64_t> targets;  // original ids at the masked positions
    };

    MlmHead() = default;
    MlmHead(int64_t d, int64_t heads, int64_t ffn_hidden, int64_t vocab_size, Rng rng);

    Out forward(Tape& t, const Var& text_tokens, const Var& image_tokens, int64_t batch,
                int64_t image_seq, const std::vector<std::pair<int64_t, int64_t>>& mask_positions,
                const std::vector<std::vector<int64_t>>& original_tokens);

    std::vector<Param*> params();

private:
    TransformerBlock fusion_;
    Param ln_g_, ln_b_, vocab_w_, vocab_b_;
};

struct TotalLoss {
    Var total;  // null when every component is null
    LossBundle bundle;
};

// total = sdm + id + lambda1 * p2i + lambda2 * mlm; null parts count as 0.
// A non-finite part raises NumericError naming the part.
TotalLoss total_loss(Tape& t, const Var& sdm, const Var& id, const Var& p2i, const Var& mlm,
                     const LossConfig& cfg);

}  // namespace propot
