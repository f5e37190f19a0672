#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "propot/autodiff.hpp"
#include "propot/corpus.hpp"
#include "propot/encoders.hpp"
#include "propot/transformer.hpp"

namespace propot {

// Frozen per-identity feature sums (one row per training identity and
// modality). Built once from eval-mode encoders; never receives gradients.
struct PrototypeBank {
    Tensor pt_v;  // N x d
    Tensor pt_t;  // N x d

    int64_t n() const { return pt_v.rows(); }
    int64_t dim() const { return pt_v.cols(); }

    Tensor rows_v(const std::vector<int64_t>& ids) const;
    Tensor rows_t(const std::vector<int64_t>& ids) const;

    // header (N, d, K, version) + row-major payload; byte layout is stable
    void save(const std::string& path, int64_t context_len) const;
    static PrototypeBank load(const std::string& path, int64_t* context_len = nullptr);
};

PrototypeBank build_initial_prototypes(const Corpus& corpus, Encoders& encoders,
                                       bool mean_instead_of_sum = false,
                                       int64_t batch_limit = 32);

enum class Aggregation { Apa, Sum, Average, Mlp, Parameter };
std::string to_string(Aggregation a);
Aggregation aggregation_from_string(const std::string& s);

struct PipelineConfig {
    int64_t d = 512;
    int64_t context_len = 4;  // K
    int64_t sae_blocks = 1;   // N_a
    int64_t cad_blocks = 3;   // N_e
    int64_t heads = 0;        // 0: derived as in EncoderConfig
    int64_t ffn_hidden = 0;   // 0: 2*d
    bool use_dpp = true;
    bool use_ipp_intra = true;
    bool use_ipp_inter = true;
    Aggregation aggregation = Aggregation::Apa;

    int64_t resolved_heads() const;
    int64_t resolved_ffn() const { return ffn_hidden > 0 ? ffn_hidden : 2 * d; }
};

struct EnrichedPrototypes {
    Var p_a_v, p_a_t;    // task-adapted (null when DPP is off)
    Var p_en_v, p_en_t;  // intra-modal instance-enriched
    Var p_eo_v, p_eo_t;  // inter-modal instance-enriched
    Var p_v, p_t;        // final aggregated prototypes
};

// The 'initialize, adapt, enrich, then aggregate' stack: per-identity prompt
// contexts + shared self-attention encoder (DPP), shared cross-attention
// decoder over batch instances (IPP), and correlation-weighted aggregation
// anchored on the frozen initial prototype (APA).
class PrototypePipeline {
public:
    PrototypePipeline() = default;
    PrototypePipeline(const PipelineConfig& cfg, int64_t n_identities, Rng rng);

    // identity_rows: dense identity indices to compute (batch-restricted
    // during training; 0..N-1 for full-bank analysis).
    std::pair<Var, Var> dpp_forward(Tape& t, const PrototypeBank& bank,
                                    const std::vector<int64_t>& identity_rows);

    // (p_en_v, p_en_t, p_eo_v, p_eo_t); v_batch/t_batch are (B x d)
    std::array<Var, 4> ipp_forward(Tape& t, const PrototypeBank& bank,
                                   const std::vector<int64_t>& identity_rows, const Var& v_batch,
                                   const Var& t_batch);

    // Aggregates whatever prototypes are present; absent ones pass null Vars.
    std::pair<Var, Var> apa_aggregate(Tape& t, const PrototypeBank& bank,
                                      const std::vector<int64_t>& identity_rows, const Var& p_a_v,
                                      const Var& p_a_t, const Var& p_en_v, const Var& p_en_t,
                                      const Var& p_eo_v, const Var& p_eo_t);

    // Full forward pass per the enabled modules.
    EnrichedPrototypes forward(Tape& t, const PrototypeBank& bank,
                               const std::vector<int64_t>& identity_rows, const Var& v_batch,
                               const Var& t_batch);

    std::vector<Param*> params();
    const PipelineConfig& config() const { return cfg_; }
    Param& context_v() { return ctx_v_; }
    Param& context_t() { return ctx_t_; }

private:
    Var aggregate_modality(Tape& t, const Var& pt, const std::vector<Var>& present,
                           const std::string& modality);

    PipelineConfig cfg_;
    int64_t n_ = 0;
    Param ctx_v_, ctx_t_;  // (N*K) x d learnable prompt contexts
    std::vector<TransformerBlock> sae_;
    std::vector<TransformerBlock> cad_;
    // aggregation-scheme parameters (constructed only for the active scheme)
    Param mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_;
    std::array<Param, 3> free_w_v_, free_w_t_;
};

}  // namespace propot
