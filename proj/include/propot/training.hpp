#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "propot/corpus.hpp"
#include "propot/encoders.hpp"
#include "propot/evaluation.hpp"
#include "propot/objectives.hpp"
#include "propot/prototype.hpp"

namespace propot {

struct TrainConfig {
    // optimization (full-scale training defaults; see apply_profile)
    int64_t epochs = 60;
    int64_t batch_size = 64;
    double lr_backbone = 1e-5;
    double lr_modules = 1e-4;
    double weight_decay = 4e-5;
    double warmup_fraction = 0.1;
    uint64_t seed = 0;
    std::string sampler = "random";  // random | pk
    int64_t instances_per_identity = 4;
    double mask_prob = 0.15;
    int64_t checkpoint_every = 0;  // >0: keep epoch-numbered checkpoints too

    // architecture
    int64_t d = 512;
    int64_t heads = 0;  // 0: derived from d
    int64_t encoder_depth = 2;
    int64_t ffn_hidden = 0;
    int64_t pool = 8;
    int64_t patch = 8;
    int64_t context_len = 4;  // K
    int64_t sae_blocks = 1;   // N_a
    int64_t cad_blocks = 3;   // N_e

    // losses
    double tau = 0.02;
    double epsilon = 1e-8;
    double lambda1 = 0.2;
    double lambda2 = 1.0;
    bool literal_no_log_p2i = false;

    // ablation switches (all on = full configuration, Table-4 row 7)
    bool use_inipt = true;
    bool use_dpp = true;
    bool use_ipp_intra = true;
    bool use_ipp_inter = true;
    bool use_mlm = true;
    std::string aggregation = "apa";  // apa | sum | average | mlp | parameter
    bool mean_prototypes = false;     // mean instead of the literal per-identity sum

    void validate() const;
    void apply_profile(const std::string& name);  // "full" | "desk"

    std::string to_json() const;  // canonical flat representation
    static TrainConfig from_json_file(const std::string& path);
    void set_key(const std::string& key, const std::string& value);  // typed override
    // (key, default-value) pairs for every config field, in schema order
    static std::vector<std::pair<std::string, std::string>> keys_with_defaults();
    uint64_t hash() const;

    LossConfig loss_config() const;
    EncoderConfig encoder_config(int64_t vocab_size) const;
    PipelineConfig pipeline_config() const;
};

// linear warmup from 0.1x to 1x over the first warmup fraction of steps, then
// cosine decay to zero at the horizon
double lr_at(int64_t step, int64_t total_steps, double base, double warmup_fraction);

class Adam {
public:
    explicit Adam(double weight_decay) : weight_decay_(weight_decay) {}
    void step(const std::vector<Param*>& params, double lr);

private:
    double weight_decay_;
    int64_t t_ = 0;
};

// Everything trainable plus the frozen bank, wired per the ablation flags.
class Model {
public:
    Model(const TrainConfig& cfg, const Corpus& corpus);

    TotalLoss compute_loss(Tape& tape, const Batch& batch, const Corpus& corpus);

    void build_bank(const Corpus& corpus);  // once, step 0, eval mode, frozen
    bool has_bank() const { return bank_.n() > 0; }
    const PrototypeBank& bank() const { return bank_; }
    PrototypeBank& bank() { return bank_; }

    Encoders& encoders() { return encoders_; }
    PrototypePipeline* pipeline() { return pipeline_ ? &*pipeline_ : nullptr; }
    std::vector<Param*> backbone_params() { return encoders_.params(); }
    std::vector<Param*> module_params();
    std::vector<Param*> all_params();
    int64_t parameter_count();

    const TrainConfig& config() const { return cfg_; }

    void save_checkpoint(const std::string& path, int64_t epoch, int64_t global_step,
                         const LossBundle& snapshot) const;
    struct LoadedState {
        int64_t epoch = 0;
        int64_t global_step = 0;
        LossBundle snapshot;
        TrainConfig config;
    };
    // Fills this model's parameters from the file; the stored config hash must
    // match this model's config.
    LoadedState load_checkpoint(const std::string& path);
    static TrainConfig peek_config(const std::string& path);

private:
    TrainConfig cfg_;
    int64_t n_identities_ = 0;
    Encoders encoders_;
    IdClassifier classifier_;
    std::optional<PrototypePipeline> pipeline_;
    std::optional<MlmHead> mlm_;
    PrototypeBank bank_;
};

struct EpochLog {
    int64_t epoch = 0;
    LossBundle mean_loss;
    double lr_backbone = 0.0, lr_modules = 0.0;
    std::string to_json() const;
};

struct TrainResult {
    std::vector<EpochLog> log;
    int64_t global_steps = 0;
};

// Runs the configured number of epochs. Writes metrics.jsonl (deterministic),
// timings.jsonl (wall clock, kept out of the metric log) and checkpoints under
// out_dir when it is non-empty.
TrainResult train(Model& model, const Corpus& corpus, const std::string& out_dir,
                  const std::string& resume_from = "");

}  // namespace propot
