#include "propot/objectives.hpp"

#include <cmath>
#include <unordered_map>

#include "propot/corpus.hpp"
#include "propot/errors.hpp"

namespace propot {

void LossConfig::validate() const {
    if (tau <= 0.0) throw UsageError("loss config: temperature tau must be > 0");
    if (epsilon <= 0.0) throw UsageError("loss config: epsilon must be > 0");
    if (lambda1 < 0.0 || lambda2 < 0.0) throw UsageError("loss config: lambdas must be >= 0");
}

Var cosine_matrix(Tape& t, const Var& a, const Var& b, double tau) {
    if (tau <= 0.0) throw UsageError("cosine_matrix: tau must be > 0");
    Var an = l2_normalize_rows(t, a);
    Var bn = l2_normalize_rows(t, b);
    return scale(t, matmul(t, an, bn, false, true), 1.0 / tau);
}

Var cross_entropy_mean(Tape& t, const Var& logits, const std::vector<int64_t>& labels) {
    if (static_cast<int64_t>(labels.size()) != logits->value.rows())
        throw DataError("cross_entropy_mean: one label per row required");
    for (int64_t l : labels)
        if (l < 0 || l >= logits->value.cols())
            throw DataError("cross_entropy_mean: label " + std::to_string(l) +
                            " outside [0, " + std::to_string(logits->value.cols()) + ")");
    Var lp = log_softmax_rows(t, logits);
    Var picked = pick_cols(t, lp, labels);
    return scale(t, mean_all(t, picked), -1.0);
}

namespace {

// q_{i,j} = [labels_i == labels_j] / #positives(i); rows sum to 1 exactly
Tensor true_match_log(const std::vector<int64_t>& labels, double eps) {
    const int64_t b = static_cast<int64_t>(labels.size());
    Tensor logq(b, b);
    for (int64_t i = 0; i < b; ++i) {
        int64_t pos = 0;
        for (int64_t j = 0; j < b; ++j) pos += labels[i] == labels[j] ? 1 : 0;
        for (int64_t j = 0; j < b; ++j) {
            const double q = labels[i] == labels[j] ? 1.0 / static_cast<double>(pos) : 0.0;
            logq.at(i, j) = std::log(q + eps);
        }
    }
    return logq;
}

Var kl_to_truth(Tape& t, const Var& sim, const Tensor& logq) {
    Var p = softmax_rows(t, sim);
    Var lp = log_softmax_rows(t, sim);
    Var diff = sub(t, lp, t.constant(logq));
    return scale(t, sum_all(t, mul(t, p, diff)), 1.0 / static_cast<double>(sim->value.rows()));
}

}  // namespace

Var sdm_loss(Tape& t, const Var& v_feat, const Var& t_feat, const std::vector<int64_t>& labels,
             const LossConfig& cfg) {
    if (cfg.tau <= 0.0) throw UsageError("sdm_loss: tau must be > 0");
    if (v_feat->value.rows() != t_feat->value.rows() ||
        static_cast<int64_t>(labels.size()) != v_feat->value.rows())
        throw DataError("sdm_loss: batch sizes disagree");
    if (!v_feat->value.all_finite() || !t_feat->value.all_finite())
        throw NumericError("sdm_loss: non-finite features");
    Tensor logq = true_match_log(labels, cfg.epsilon);
    Var i2t = kl_to_truth(t, cosine_matrix(t, v_feat, t_feat, cfg.tau), logq);
    Var t2i = kl_to_truth(t, cosine_matrix(t, t_feat, v_feat, cfg.tau), logq);
    return add(t, i2t, t2i);
}

Var p2i_loss(Tape& t, const Var& v_feat, const Var& t_feat, const Var& proto_v, const Var& proto_t,
             const std::vector<int64_t>& labels, const std::vector<int64_t>& prototype_identity,
             const LossConfig& cfg) {
    if (cfg.tau <= 0.0) throw UsageError("p2i_loss: tau must be > 0");
    const int64_t b = static_cast<int64_t>(labels.size());
    const int64_t m = static_cast<int64_t>(prototype_identity.size());
    if (proto_v->value.rows() != m || proto_t->value.rows() != m)
        throw DataError("p2i_loss: one identity per prototype row required");

    std::unordered_map<int64_t, int64_t> row_of_identity;
    for (int64_t i = 0; i < m; ++i) row_of_identity[prototype_identity[static_cast<size_t>(i)]] = i;
    // positives per prototype row; every batch identity needs a prototype
    Tensor mask(m, b);
    std::vector<int64_t> pos(static_cast<size_t>(m), 0);
    for (int64_t j = 0; j < b; ++j) {
        auto it = row_of_identity.find(labels[static_cast<size_t>(j)]);
        if (it == row_of_identity.end())
            throw DataError("p2i_loss: batch identity " +
                            std::to_string(labels[static_cast<size_t>(j)]) +
                            " has no prototype row");
        ++pos[static_cast<size_t>(it->second)];
    }
    for (int64_t j = 0; j < b; ++j) {
        const int64_t i = row_of_identity.at(labels[static_cast<size_t>(j)]);
        mask.at(i, j) = 1.0 / static_cast<double>(pos[static_cast<size_t>(i)]);
    }

    auto side = [&](const Var& proto, const Var& inst) {
        Var sim = cosine_matrix(t, proto, inst, cfg.tau);  // (m x b)
        Var contrib = cfg.literal_no_log_p2i ? softmax_rows(t, sim) : log_softmax_rows(t, sim);
        return scale(t, sum_all(t, mul(t, contrib, t.constant(mask))), -1.0);
    };
    return add(t, side(proto_v, v_feat), side(proto_t, t_feat));
}

IdClassifier::IdClassifier(int64_t d, int64_t n_identities, Rng rng)
    : w_("id.w", rng.normal_tensor(d, n_identities, 0.02)), b_("id.b", Tensor(1, n_identities)) {}

Var IdClassifier::loss(Tape& t, const Var& v_feat, const Var& t_feat,
                       const std::vector<int64_t>& labels) {
    Var lv = cross_entropy_mean(t, linear(t, v_feat, t.leaf(w_), t.leaf(b_)), labels);
    Var lt = cross_entropy_mean(t, linear(t, t_feat, t.leaf(w_), t.leaf(b_)), labels);
    return add(t, lv, lt);
}

MlmHead::MlmHead(int64_t d, int64_t heads, int64_t ffn_hidden, int64_t vocab_size, Rng rng)
    : fusion_("mlm.fusion", d, heads, ffn_hidden, true, rng),
      ln_g_("mlm.ln_g", Tensor(1, d, 1.0)),
      ln_b_("mlm.ln_b", Tensor(1, d)),
      vocab_w_("mlm.vocab_w", rng.fork("vw").normal_tensor(d, vocab_size, 0.02)),
      vocab_b_("mlm.vocab_b", Tensor(1, vocab_size)) {}

MlmHead::Out MlmHead::forward(Tape& t, const Var& text_tokens, const Var& image_tokens,
                              int64_t batch, int64_t image_seq,
                              const std::vector<std::pair<int64_t, int64_t>>& mask_positions,
                              const std::vector<std::vector<int64_t>>& original_tokens) {
    Out out;
    if (mask_positions.empty()) {
        out.loss = t.constant(Tensor(1, 1));
        return out;
    }
    if (!text_tokens || !image_tokens)
        throw DataError("mlm: token-level features unavailable (embedding-backed encoders)");
    Var fused = fusion_.forward_cross(t, text_tokens, image_tokens, batch, kSeqLen, image_seq);
    fused = layer_norm(t, fused, t.leaf(ln_g_), t.leaf(ln_b_));
    std::vector<int64_t> rows;
    rows.reserve(mask_positions.size());
    for (const auto& [r, p] : mask_positions) {
        rows.push_back(r * kSeqLen + p);
        out.targets.push_back(original_tokens[static_cast<size_t>(r)][static_cast<size_t>(p)]);
    }
    Var picked = gather_rows(t, fused, std::move(rows));
    out.logits = linear(t, picked, t.leaf(vocab_w_), t.leaf(vocab_b_));
    out.loss = cross_entropy_mean(t, out.logits, out.targets);
    return out;
}

std::vector<Param*> MlmHead::params() {
    std::vector<Param*> out = fusion_.params();
    for (Param* p : {&ln_g_, &ln_b_, &vocab_w_, &vocab_b_}) out.push_back(p);
    return out;
}

TotalLoss total_loss(Tape& t, const Var& sdm, const Var& id, const Var& p2i, const Var& mlm,
                     const LossConfig& cfg) {
    cfg.validate();
    TotalLoss out;
    auto check = [](const Var& v, const char* name) {
        if (v && !std::isfinite(scalar(v)))
            throw NumericError(std::string("total_loss: component '") + name + "' is not finite");
    };
    check(sdm, "sdm");
    check(id, "id");
    check(p2i, "p2i");
    check(mlm, "mlm");

    out.bundle.sdm = sdm ? scalar(sdm) : 0.0;
    out.bundle.id = id ? scalar(id) : 0.0;
    out.bundle.p2i = p2i ? scalar(p2i) : 0.0;
    out.bundle.mlm = mlm ? scalar(mlm) : 0.0;
    out.bundle.total =
        out.bundle.sdm + out.bundle.id + cfg.lambda1 * out.bundle.p2i + cfg.lambda2 * out.bundle.mlm;

    Var acc;
    auto accumulate = [&](const Var& v, double lam) {
        if (!v || lam == 0.0) return;
        Var term = lam == 1.0 ? v : scale(t, v, lam);
        acc = acc ? add(t, acc, term) : term;
    };
    accumulate(sdm, 1.0);
    accumulate(id, 1.0);
    accumulate(p2i, cfg.lambda1);
    accumulate(mlm, cfg.lambda2);
    out.total = acc;
    return out;
}

}  // namespace propot
