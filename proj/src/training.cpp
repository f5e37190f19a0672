#include "propot/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

#include "json.hpp"
#include "propot/errors.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace propot {

// ---------------------------------------------------------------------------
// Config schema: flat typed keys, used by the JSON config file and by
// key=value overrides.

namespace {

struct Field {
    std::string name;
    std::function<ordered_json(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const ordered_json&)> set;
    std::function<void(TrainConfig&, const std::string&)> set_str;
};

template <typename T>
Field make_field(const char* name, T TrainConfig::* ptr) {
    Field f;
    f.name = name;
    f.get = [ptr](const TrainConfig& c) { return ordered_json(c.*ptr); };
    f.set = [ptr, name](TrainConfig& c, const ordered_json& v) {
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) throw UsageError("");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) throw UsageError("");
            } else {
                if (!v.is_number()) throw UsageError("");
            }
            c.*ptr = v.get<T>();
        } catch (...) {
            throw UsageError(std::string("config key '") + name + "' has the wrong type");
        }
    };
    f.set_str = [ptr, name](TrainConfig& c, const std::string& s) {
        try {
            size_t used = 0;
            if constexpr (std::is_same_v<T, bool>) {
                if (s == "true" || s == "1") c.*ptr = true;
                else if (s == "false" || s == "0") c.*ptr = false;
                else throw UsageError("");
            } else if constexpr (std::is_same_v<T, std::string>) {
                c.*ptr = s;
            } else if constexpr (std::is_same_v<T, double>) {
                c.*ptr = std::stod(s, &used);
                if (used != s.size()) throw UsageError("");
            } else if constexpr (std::is_same_v<T, uint64_t>) {
                c.*ptr = std::stoull(s, &used);
                if (used != s.size()) throw UsageError("");
            } else {
                c.*ptr = std::stoll(s, &used);
                if (used != s.size()) throw UsageError("");
            }
        } catch (...) {
            throw UsageError(std::string("cannot parse value '") + s + "' for config key '" +
                             name + "'");
        }
    };
    return f;
}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        make_field("epochs", &TrainConfig::epochs),
        make_field("batch_size", &TrainConfig::batch_size),
        make_field("lr_backbone", &TrainConfig::lr_backbone),
        make_field("lr_modules", &TrainConfig::lr_modules),
        make_field("weight_decay", &TrainConfig::weight_decay),
        make_field("warmup_fraction", &TrainConfig::warmup_fraction),
        make_field("seed", &TrainConfig::seed),
        make_field("sampler", &TrainConfig::sampler),
        make_field("instances_per_identity", &TrainConfig::instances_per_identity),
        make_field("mask_prob", &TrainConfig::mask_prob),
        make_field("checkpoint_every", &TrainConfig::checkpoint_every),
        make_field("d", &TrainConfig::d),
        make_field("heads", &TrainConfig::heads),
        make_field("encoder_depth", &TrainConfig::encoder_depth),
        make_field("ffn_hidden", &TrainConfig::ffn_hidden),
        make_field("pool", &TrainConfig::pool),
        make_field("patch", &TrainConfig::patch),
        make_field("context_len", &TrainConfig::context_len),
        make_field("sae_blocks", &TrainConfig::sae_blocks),
        make_field("cad_blocks", &TrainConfig::cad_blocks),
        make_field("tau", &TrainConfig::tau),
        make_field("epsilon", &TrainConfig::epsilon),
        make_field("lambda1", &TrainConfig::lambda1),
        make_field("lambda2", &TrainConfig::lambda2),
        make_field("literal_no_log_p2i", &TrainConfig::literal_no_log_p2i),
        make_field("use_inipt", &TrainConfig::use_inipt),
        make_field("use_dpp", &TrainConfig::use_dpp),
        make_field("use_ipp_intra", &TrainConfig::use_ipp_intra),
        make_field("use_ipp_inter", &TrainConfig::use_ipp_inter),
        make_field("use_mlm", &TrainConfig::use_mlm),
        make_field("aggregation", &TrainConfig::aggregation),
        make_field("mean_prototypes", &TrainConfig::mean_prototypes),
    };
    return f;
}

}  // namespace

void TrainConfig::validate() const {
    if (epochs < 1 || batch_size < 1) throw UsageError("config: epochs and batch_size must be >= 1");
    if (lr_backbone <= 0 || lr_modules <= 0) throw UsageError("config: learning rates must be > 0");
    if (weight_decay < 0) throw UsageError("config: weight_decay must be >= 0");
    if (warmup_fraction < 0 || warmup_fraction >= 1)
        throw UsageError("config: warmup_fraction must be in [0, 1)");
    if (sampler != "random" && sampler != "pk")
        throw UsageError("config: sampler must be random or pk");
    if (mask_prob < 0 || mask_prob > 1) throw UsageError("config: mask_prob must be in [0, 1]");
    if (context_len < 1 || sae_blocks < 1 || cad_blocks < 1)
        throw UsageError("config: K, N_a and N_e must be >= 1");
    if ((use_dpp || use_ipp_intra || use_ipp_inter) && !use_inipt)
        throw UsageError("config: DPP/IPP require use_inipt");
    aggregation_from_string(aggregation);
    loss_config().validate();
}

void TrainConfig::apply_profile(const std::string& name) {
    if (name == "full") return;  // the full-scale defaults above
    if (name == "desk") {
        d = 64;
        batch_size = 16;
        epochs = 60;
        lr_backbone = 4e-4;
        lr_modules = 1e-3;
        return;
    }
    throw UsageError("unknown profile '" + name + "' (expected full|desk)");
}

std::string TrainConfig::to_json() const {
    ordered_json doc;
    for (const auto& f : fields()) doc[f.name] = f.get(*this);
    return doc.dump(2);
}

namespace {
TrainConfig config_from_json(const ordered_json& doc) {
    TrainConfig cfg;
    for (auto& [key, value] : doc.items()) {
        bool found = false;
        for (const auto& fd : fields())
            if (fd.name == key) {
                fd.set(cfg, value);
                found = true;
                break;
            }
        if (!found) throw UsageError("unknown config key '" + key + "'");
    }
    return cfg;
}
}  // namespace

TrainConfig TrainConfig::from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config: " + path);
    ordered_json doc;
    try {
        doc = ordered_json::parse(f);
    } catch (const ordered_json::exception& e) {
        throw DataError("config is not valid JSON: " + std::string(e.what()));
    }
    return config_from_json(doc);
}

void TrainConfig::set_key(const std::string& key, const std::string& value) {
    for (const auto& fd : fields())
        if (fd.name == key) {
            fd.set_str(*this, value);
            return;
        }
    throw UsageError("unknown config key '" + key + "'");
}

std::vector<std::pair<std::string, std::string>> TrainConfig::keys_with_defaults() {
    TrainConfig defaults;
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& fd : fields()) {
        ordered_json v = fd.get(defaults);
        out.emplace_back(fd.name, v.is_string() ? v.get<std::string>() : v.dump());
    }
    return out;
}

uint64_t TrainConfig::hash() const {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : to_json()) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

LossConfig TrainConfig::loss_config() const {
    LossConfig c;
    c.tau = tau;
    c.epsilon = epsilon;
    c.lambda1 = lambda1;
    c.lambda2 = lambda2;
    c.literal_no_log_p2i = literal_no_log_p2i;
    return c;
}

EncoderConfig TrainConfig::encoder_config(int64_t vocab_size) const {
    EncoderConfig c;
    c.d = d;
    c.depth = encoder_depth;
    c.heads = heads;
    c.ffn_hidden = ffn_hidden;
    c.pool = pool;
    c.patch = patch;
    c.vocab_size = vocab_size;
    return c;
}

PipelineConfig TrainConfig::pipeline_config() const {
    PipelineConfig c;
    c.d = d;
    c.context_len = context_len;
    c.sae_blocks = sae_blocks;
    c.cad_blocks = cad_blocks;
    c.heads = heads;
    c.ffn_hidden = ffn_hidden;
    c.use_dpp = use_dpp;
    c.use_ipp_intra = use_ipp_intra;
    c.use_ipp_inter = use_ipp_inter;
    c.aggregation = aggregation_from_string(aggregation);
    return c;
}

// ---------------------------------------------------------------------------

double lr_at(int64_t step, int64_t total_steps, double base, double warmup_fraction) {
    if (total_steps < 1) throw UsageError("lr_at: empty schedule");
    const double warm = warmup_fraction * static_cast<double>(total_steps);
    const double s = static_cast<double>(step);
    if (warm > 0.0 && s < warm) return base * (0.1 + 0.9 * s / warm);
    const double span = static_cast<double>(total_steps) - warm;
    double progress = span > 0.0 ? (s - warm) / span : 1.0;
    progress = std::clamp(progress, 0.0, 1.0);
    return base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void Adam::step(const std::vector<Param*>& params, double lr) {
    ++t_;
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (Param* p : params) {
        for (int64_t i = 0; i < p->numel(); ++i) {
            const double g = p->grad[i] + weight_decay_ * p->value[i];
            p->adam_m[i] = b1 * p->adam_m[i] + (1.0 - b1) * g;
            p->adam_v[i] = b2 * p->adam_v[i] + (1.0 - b2) * g * g;
            const double mhat = p->adam_m[i] / bc1;
            const double vhat = p->adam_v[i] / bc2;
            p->value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Model

Model::Model(const TrainConfig& cfg, const Corpus& corpus) : cfg_(cfg) {
    cfg_.validate();
    n_identities_ = corpus.n_train_identities();
    if (n_identities_ == 0) throw DataError("model: corpus has no training identities");
    encoders_ = Encoders::make_toy(cfg_.encoder_config(corpus.vocab().size()),
                                   Rng(cfg_.seed).fork("encoders"));
    classifier_ = IdClassifier(cfg_.d, n_identities_, Rng(cfg_.seed).fork("classifier"));
    if (cfg_.use_dpp || cfg_.use_ipp_intra || cfg_.use_ipp_inter)
        pipeline_.emplace(cfg_.pipeline_config(), n_identities_, Rng(cfg_.seed).fork("pipeline"));
    if (cfg_.use_mlm) {
        EncoderConfig ecfg = cfg_.encoder_config(corpus.vocab().size());
        mlm_.emplace(cfg_.d, ecfg.resolved_heads(), ecfg.resolved_ffn(), corpus.vocab().size(),
                     Rng(cfg_.seed).fork("mlm"));
    }
}

void Model::build_bank(const Corpus& corpus) {
    bank_ = build_initial_prototypes(corpus, encoders_, cfg_.mean_prototypes);
}

std::vector<Param*> Model::module_params() {
    std::vector<Param*> out = classifier_.params();
    if (pipeline_)
        for (Param* p : pipeline_->params()) out.push_back(p);
    if (mlm_)
        for (Param* p : mlm_->params()) out.push_back(p);
    return out;
}

std::vector<Param*> Model::all_params() {
    std::vector<Param*> out = backbone_params();
    for (Param* p : module_params()) out.push_back(p);
    return out;
}

int64_t Model::parameter_count() {
    int64_t n = 0;
    for (Param* p : all_params()) n += p->numel();
    return n;
}

TotalLoss Model::compute_loss(Tape& tape, const Batch& batch, const Corpus& corpus) {
    const LossConfig lcfg = cfg_.loss_config();
    std::vector<std::string> img_uids, txt_uids;
    for (int64_t i : batch.image_instance) img_uids.push_back(corpus.instance(i).uid);
    for (int64_t i : batch.text_instance) txt_uids.push_back(corpus.instance(i).uid);

    ImageEncoding img = encoders_.encode_images(tape, batch.images, img_uids);
    TextEncoding txt = encoders_.encode_texts(tape, batch.tokens, txt_uids);

    Var sdm = sdm_loss(tape, img.global, txt.global, batch.labels, lcfg);
    Var id = classifier_.loss(tape, img.global, txt.global, batch.labels);

    Var p2i;
    if (cfg_.use_inipt && cfg_.lambda1 > 0.0) {
        if (!has_bank()) throw DataError("compute_loss: prototype bank not built");
        std::set<int64_t> unique(batch.labels.begin(), batch.labels.end());
        std::vector<int64_t> ids(unique.begin(), unique.end());
        Var proto_v, proto_t;
        if (pipeline_) {
            EnrichedPrototypes en = pipeline_->forward(tape, bank_, ids, img.global, txt.global);
            proto_v = en.p_v;
            proto_t = en.p_t;
        } else {
            proto_v = tape.constant(bank_.rows_v(ids));
            proto_t = tape.constant(bank_.rows_t(ids));
        }
        p2i = p2i_loss(tape, img.global, txt.global, proto_v, proto_t, batch.labels, ids, lcfg);
    }

    Var mlm;
    if (mlm_ && cfg_.lambda2 > 0.0) {
        if (batch.mask_positions.empty()) {
            mlm = tape.constant(Tensor(1, 1));
        } else {
            // the masked sequence feeds the encoder so the head cannot read
            // the answer off the input; matching features use the clean pass
            TextEncoding masked = encoders_.encode_texts(tape, batch.masked, txt_uids);
            mlm = mlm_->forward(tape, masked.tokens, img.tokens, batch.size(), img.seq,
                                batch.mask_positions, batch.tokens)
                      .loss;
        }
    }
    return total_loss(tape, sdm, id, p2i, mlm, lcfg);
}

// ---------------------------------------------------------------------------
// Checkpoint io

namespace {

void w_i64(std::ofstream& f, int64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
void w_u64(std::ofstream& f, uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
void w_str(std::ofstream& f, const std::string& s) {
    w_i64(f, static_cast<int64_t>(s.size()));
    f.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void w_tensor(std::ofstream& f, const Tensor& t) {
    w_i64(f, t.rows());
    w_i64(f, t.cols());
    f.write(reinterpret_cast<const char*>(t.data()), t.numel() * 8);
}

int64_t r_i64(std::ifstream& f) {
    int64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    if (!f) throw DataError("checkpoint: truncated file");
    return v;
}
uint64_t r_u64(std::ifstream& f) {
    uint64_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 8);
    if (!f) throw DataError("checkpoint: truncated file");
    return v;
}
std::string r_str(std::ifstream& f) {
    const int64_t n = r_i64(f);
    if (n < 0 || n > (1 << 26)) throw DataError("checkpoint: corrupt string length");
    std::string s(static_cast<size_t>(n), '\0');
    f.read(s.data(), n);
    if (!f) throw DataError("checkpoint: truncated file");
    return s;
}
Tensor r_tensor(std::ifstream& f) {
    const int64_t r = r_i64(f), c = r_i64(f);
    if (r < 0 || c < 0 || r * c > (1LL << 32)) throw DataError("checkpoint: corrupt tensor shape");
    Tensor t(r, c);
    f.read(reinterpret_cast<char*>(t.data()), r * c * 8);
    if (!f) throw DataError("checkpoint: truncated file");
    return t;
}

constexpr char kCkptMagic[4] = {'P', 'P', 'C', 'K'};
constexpr int64_t kCkptVersion = 1;

}  // namespace

void Model::save_checkpoint(const std::string& path, int64_t epoch, int64_t global_step,
                            const LossBundle& snapshot) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write checkpoint: " + path);
    f.write(kCkptMagic, 4);
    w_i64(f, kCkptVersion);
    const std::string cfg_json = cfg_.to_json();
    w_str(f, cfg_json);
    w_u64(f, cfg_.hash());
    w_i64(f, epoch);
    w_i64(f, global_step);
    for (double v : {snapshot.sdm, snapshot.id, snapshot.p2i, snapshot.mlm, snapshot.total})
        f.write(reinterpret_cast<const char*>(&v), 8);

    auto* self = const_cast<Model*>(this);
    auto params = self->all_params();
    w_i64(f, static_cast<int64_t>(params.size()));
    for (Param* p : params) {
        w_str(f, p->name);
        w_tensor(f, p->value);
        w_tensor(f, p->adam_m);
        w_tensor(f, p->adam_v);
    }
    w_i64(f, bank_.n() > 0 ? 1 : 0);
    if (bank_.n() > 0) {
        w_tensor(f, bank_.pt_v);
        w_tensor(f, bank_.pt_t);
    }
    if (!f) throw DataError("short write: " + path);
}

TrainConfig Model::peek_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kCkptMagic, 4) != 0)
        throw DataError("not a checkpoint file: " + path);
    if (r_i64(f) != kCkptVersion) throw DataError("unsupported checkpoint version: " + path);
    const std::string cfg_json = r_str(f);
    try {
        return config_from_json(ordered_json::parse(cfg_json));
    } catch (const ordered_json::exception& e) {
        throw DataError("checkpoint config is not valid JSON: " + std::string(e.what()));
    }
}

Model::LoadedState Model::load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kCkptMagic, 4) != 0)
        throw DataError("not a checkpoint file: " + path);
    if (r_i64(f) != kCkptVersion) throw DataError("unsupported checkpoint version: " + path);

    LoadedState state;
    const std::string cfg_json = r_str(f);
    const uint64_t stored_hash = r_u64(f);
    if (stored_hash != cfg_.hash())
        throw DataError("checkpoint config hash mismatch: refusing to load into a model built "
                        "from a different configuration");
    state.config = cfg_;
    state.epoch = r_i64(f);
    state.global_step = r_i64(f);
    double* snap[5] = {&state.snapshot.sdm, &state.snapshot.id, &state.snapshot.p2i,
                       &state.snapshot.mlm, &state.snapshot.total};
    for (double* v : snap) {
        f.read(reinterpret_cast<char*>(v), 8);
        if (!f) throw DataError("checkpoint: truncated file");
    }

    // read everything before touching the live model: no partial loads
    const int64_t n_params = r_i64(f);
    std::map<std::string, std::array<Tensor, 3>> loaded;
    for (int64_t i = 0; i < n_params; ++i) {
        std::string name = r_str(f);
        Tensor value = r_tensor(f);
        Tensor m = r_tensor(f);
        Tensor v = r_tensor(f);
        loaded[name] = {std::move(value), std::move(m), std::move(v)};
    }
    PrototypeBank new_bank;
    if (r_i64(f) == 1) {
        new_bank.pt_v = r_tensor(f);
        new_bank.pt_t = r_tensor(f);
    }

    auto params = all_params();
    if (static_cast<int64_t>(params.size()) != n_params)
        throw DataError("checkpoint: parameter count mismatch");
    for (Param* p : params) {
        auto it = loaded.find(p->name);
        if (it == loaded.end()) throw DataError("checkpoint: missing parameter '" + p->name + "'");
        if (!it->second[0].same_shape(p->value))
            throw DataError("checkpoint: shape mismatch for '" + p->name + "'");
    }
    for (Param* p : params) {
        auto& arr = loaded.at(p->name);
        p->value = arr[0];
        p->adam_m = arr[1];
        p->adam_v = arr[2];
    }
    bank_ = std::move(new_bank);
    return state;
}

// ---------------------------------------------------------------------------
// Training loop

std::string EpochLog::to_json() const {
    ordered_json doc;
    doc["epoch"] = epoch;
    doc["loss"] = {{"sdm", mean_loss.sdm},
                   {"id", mean_loss.id},
                   {"p2i", mean_loss.p2i},
                   {"mlm", mean_loss.mlm},
                   {"total", mean_loss.total}};
    doc["lr_backbone"] = lr_backbone;
    doc["lr_modules"] = lr_modules;
    return doc.dump();
}

TrainResult train(Model& model, const Corpus& corpus, const std::string& out_dir,
                  const std::string& resume_from) {
    const TrainConfig& cfg = model.config();
    cfg.validate();

    BatchConfig bcfg;
    bcfg.batch_size = cfg.batch_size;
    bcfg.sampler = cfg.sampler == "pk" ? SamplerKind::IdentityAware : SamplerKind::Random;
    bcfg.instances_per_identity = cfg.instances_per_identity;
    bcfg.mask_prob = cfg.mask_prob;
    bcfg.training = true;

    const int64_t pairs = static_cast<int64_t>(corpus.pairs(Split::Train).size());
    if (cfg.batch_size > pairs)
        throw DataError("train: batch size " + std::to_string(cfg.batch_size) + " exceeds " +
                        std::to_string(pairs) + " train pairs");
    const int64_t steps_per_epoch = pairs / cfg.batch_size;
    const int64_t total_steps = cfg.epochs * steps_per_epoch;

    int64_t start_epoch = 0, global_step = 0;
    if (!resume_from.empty()) {
        auto state = model.load_checkpoint(resume_from);
        start_epoch = state.epoch + 1;
        global_step = state.global_step;
    } else if (cfg.use_inipt) {
        model.build_bank(corpus);
    }

    Adam opt_backbone(cfg.weight_decay);
    Adam opt_modules(cfg.weight_decay);
    // resume continues the bias-correction schedule
    for (int64_t i = 0; i < global_step; ++i) {
        opt_backbone.step({}, 0.0);
        opt_modules.step({}, 0.0);
    }

    auto backbone = model.backbone_params();
    auto modules = model.module_params();

    std::ofstream metrics_out, timings_out;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        const auto mode = resume_from.empty() ? std::ios::trunc : std::ios::app;
        metrics_out.open(fs::path(out_dir) / "metrics.jsonl", mode);
        timings_out.open(fs::path(out_dir) / "timings.jsonl", mode);
    }

    Rng root(cfg.seed);
    TrainResult result;
    for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        auto batches = make_batches(corpus, bcfg, root.fork("epoch_" + std::to_string(epoch)));
        EpochLog log;
        log.epoch = epoch;
        for (auto& batch : batches) {
            const double lr_b = lr_at(global_step, total_steps, cfg.lr_backbone, cfg.warmup_fraction);
            const double lr_m = lr_at(global_step, total_steps, cfg.lr_modules, cfg.warmup_fraction);
            for (Param* p : backbone) p->zero_grad();
            for (Param* p : modules) p->zero_grad();

            Tape tape;
            TotalLoss tl;
            try {
                tl = model.compute_loss(tape, batch, corpus);
            } catch (const NumericError& e) {
                std::string uids = "offending batch:";
                for (int64_t i : batch.text_instance) uids += " " + corpus.instance(i).uid;
                throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                                   " step " + std::to_string(global_step) + "; " + uids);
            }
            tape.backward(tl.total);
            opt_backbone.step(backbone, lr_b);
            opt_modules.step(modules, lr_m);

            log.mean_loss.sdm += tl.bundle.sdm;
            log.mean_loss.id += tl.bundle.id;
            log.mean_loss.p2i += tl.bundle.p2i;
            log.mean_loss.mlm += tl.bundle.mlm;
            log.mean_loss.total += tl.bundle.total;
            log.lr_backbone = lr_b;
            log.lr_modules = lr_m;
            ++global_step;
        }
        const double inv = 1.0 / static_cast<double>(batches.size());
        log.mean_loss.sdm *= inv;
        log.mean_loss.id *= inv;
        log.mean_loss.p2i *= inv;
        log.mean_loss.mlm *= inv;
        log.mean_loss.total *= inv;
        result.log.push_back(log);

        if (metrics_out) metrics_out << log.to_json() << "\n";
        if (timings_out) {
            const double ms = std::chrono::duration<double, std::milli>(
                                  std::chrono::steady_clock::now() - t0)
                                  .count();
            timings_out << "{\"epoch\": " << epoch << ", \"ms\": " << ms << "}\n";
        }
        if (!out_dir.empty()) {
            model.save_checkpoint((fs::path(out_dir) / "checkpoint_latest.bin").string(), epoch,
                                  global_step, log.mean_loss);
            if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
                char name[48];
                std::snprintf(name, sizeof(name), "checkpoint_epoch_%05lld.bin",
                              static_cast<long long>(epoch));
                model.save_checkpoint((fs::path(out_dir) / name).string(), epoch, global_step,
                                      log.mean_loss);
            }
        }
    }
    result.global_steps = global_step;
    return result;
}

}  // namespace propot
