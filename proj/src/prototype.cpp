#include "propot/prototype.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "propot/errors.hpp"

namespace propot {

namespace {
constexpr char kBankMagic[4] = {'P', 'T', 'B', 'K'};
constexpr uint32_t kBankVersion = 1;

void write_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
uint32_t read_u32(std::ifstream& f) {
    uint32_t v = 0;
    f.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
}  // namespace

Tensor PrototypeBank::rows_v(const std::vector<int64_t>& ids) const {
    Tensor out(static_cast<int64_t>(ids.size()), dim());
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(pt_v.row(ids[i]), pt_v.row(ids[i]) + dim(), out.row(static_cast<int64_t>(i)));
    return out;
}

Tensor PrototypeBank::rows_t(const std::vector<int64_t>& ids) const {
    Tensor out(static_cast<int64_t>(ids.size()), dim());
    for (size_t i = 0; i < ids.size(); ++i)
        std::copy(pt_t.row(ids[i]), pt_t.row(ids[i]) + dim(), out.row(static_cast<int64_t>(i)));
    return out;
}

void PrototypeBank::save(const std::string& path, int64_t context_len) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write prototype bank: " + path);
    f.write(kBankMagic, 4);
    write_u32(f, kBankVersion);
    write_u32(f, static_cast<uint32_t>(n()));
    write_u32(f, static_cast<uint32_t>(dim()));
    write_u32(f, static_cast<uint32_t>(context_len));
    f.write(reinterpret_cast<const char*>(pt_v.data()), pt_v.numel() * 8);
    f.write(reinterpret_cast<const char*>(pt_t.data()), pt_t.numel() * 8);
    if (!f) throw DataError("short write: " + path);
}

PrototypeBank PrototypeBank::load(const std::string& path, int64_t* context_len) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open prototype bank: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kBankMagic, 4) != 0)
        throw DataError("not a prototype bank file: " + path);
    if (read_u32(f) != kBankVersion) throw DataError("unsupported prototype bank version: " + path);
    const int64_t n = read_u32(f), d = read_u32(f), k = read_u32(f);
    if (context_len) *context_len = k;
    PrototypeBank bank;
    bank.pt_v = Tensor(n, d);
    bank.pt_t = Tensor(n, d);
    f.read(reinterpret_cast<char*>(bank.pt_v.data()), n * d * 8);
    f.read(reinterpret_cast<char*>(bank.pt_t.data()), n * d * 8);
    if (!f) throw DataError("truncated prototype bank: " + path);
    return bank;
}

PrototypeBank build_initial_prototypes(const Corpus& corpus, Encoders& encoders,
                                       bool mean_instead_of_sum, int64_t batch_limit) {
    const int64_t n = corpus.n_train_identities();
    if (n == 0) throw DataError("build_initial_prototypes: no training identities");
    const int64_t d = encoders.dim();
    PrototypeBank bank;
    bank.pt_v = Tensor(n, d);
    bank.pt_t = Tensor(n, d);
    std::vector<int64_t> count_v(static_cast<size_t>(n), 0), count_t(static_cast<size_t>(n), 0);

    auto accumulate = [&](Tensor& dst, std::vector<int64_t>& counts, bool is_image) {
        auto idx = is_image ? corpus.image_indices(Split::Train) : corpus.text_indices(Split::Train);
        for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch_limit)) {
            const size_t end = std::min(idx.size(), start + static_cast<size_t>(batch_limit));
            std::vector<Image> images;
            std::vector<std::vector<int64_t>> tokens;
            std::vector<std::string> uids;
            std::vector<int64_t> labels;
            for (size_t i = start; i < end; ++i) {
                const Instance& inst = corpus.instance(idx[i]);
                uids.push_back(inst.uid);
                labels.push_back(inst.identity.index);
                if (!encoders.toy()) continue;  // lookups key on uid alone
                if (is_image)
                    images.push_back(corpus.load_image(inst));
                else
                    tokens.push_back(tokenize(inst.caption, corpus.vocab()).ids);
            }
            Tape tape;  // eval pass, gradients never requested
            Var global = is_image ? encoders.encode_images(tape, images, uids).global
                                  : encoders.encode_texts(tape, tokens, uids).global;
            for (size_t i = 0; i < labels.size(); ++i) {
                const int64_t row = labels[i];
                if (row < 0) continue;
                for (int64_t j = 0; j < d; ++j)
                    dst.at(row, j) += global->value.at(static_cast<int64_t>(i), j);
                ++counts[static_cast<size_t>(row)];
            }
        }
    };
    accumulate(bank.pt_v, count_v, true);
    accumulate(bank.pt_t, count_t, false);

    for (int64_t i = 0; i < n; ++i) {
        if (count_v[static_cast<size_t>(i)] == 0)
            throw DataError("identity row " + std::to_string(i) + " has no image instances");
        if (count_t[static_cast<size_t>(i)] == 0)
            throw DataError("identity row " + std::to_string(i) + " has no text instances");
        if (mean_instead_of_sum) {
            for (int64_t j = 0; j < d; ++j) {
                bank.pt_v.at(i, j) /= static_cast<double>(count_v[static_cast<size_t>(i)]);
                bank.pt_t.at(i, j) /= static_cast<double>(count_t[static_cast<size_t>(i)]);
            }
        }
    }
    return bank;
}

// ---------------------------------------------------------------------------

std::string to_string(Aggregation a) {
    switch (a) {
        case Aggregation::Apa: return "apa";
        case Aggregation::Sum: return "sum";
        case Aggregation::Average: return "average";
        case Aggregation::Mlp: return "mlp";
        case Aggregation::Parameter: return "parameter";
    }
    return "?";
}

Aggregation aggregation_from_string(const std::string& s) {
    if (s == "apa") return Aggregation::Apa;
    if (s == "sum") return Aggregation::Sum;
    if (s == "average") return Aggregation::Average;
    if (s == "mlp") return Aggregation::Mlp;
    if (s == "parameter") return Aggregation::Parameter;
    throw DataError("unknown aggregation '" + s + "' (expected apa|sum|average|mlp|parameter)");
}

int64_t PipelineConfig::resolved_heads() const {
    if (heads > 0) return heads;
    int64_t h = std::max<int64_t>(1, 8 * d / 512);
    if (d % h != 0) h = 1;
    return h;
}

PrototypePipeline::PrototypePipeline(const PipelineConfig& cfg, int64_t n_identities, Rng rng)
    : cfg_(cfg), n_(n_identities) {
    if (cfg.context_len < 1) throw DataError("pipeline config: context length K must be >= 1");
    if (cfg.d % cfg.resolved_heads() != 0) throw DataError("pipeline config: heads must divide d");
    if (cfg_.use_dpp) {
        ctx_v_ = Param("pipe.ctx_v",
                       rng.fork("ctx_v").normal_tensor(n_ * cfg.context_len, cfg.d, 0.02));
        ctx_t_ = Param("pipe.ctx_t",
                       rng.fork("ctx_t").normal_tensor(n_ * cfg.context_len, cfg.d, 0.02));
        Rng srng = rng.fork("sae");
        for (int64_t i = 0; i < cfg.sae_blocks; ++i)
            sae_.emplace_back("pipe.sae" + std::to_string(i), cfg.d, cfg.resolved_heads(),
                              cfg.resolved_ffn(), false, srng);
    }
    if (cfg_.use_ipp_intra || cfg_.use_ipp_inter) {
        Rng crng = rng.fork("cad");
        for (int64_t i = 0; i < cfg.cad_blocks; ++i)
            cad_.emplace_back("pipe.cad" + std::to_string(i), cfg.d, cfg.resolved_heads(),
                              cfg.resolved_ffn(), true, crng);
    }
    if (cfg_.aggregation == Aggregation::Mlp) {
        const int64_t hidden = std::max<int64_t>(4, cfg.d / 2);
        Rng mrng = rng.fork("agg_mlp");
        mlp_w1_ = Param("pipe.agg_mlp_w1", mrng.normal_tensor(2 * cfg.d, hidden, 0.02));
        mlp_b1_ = Param("pipe.agg_mlp_b1", Tensor(1, hidden));
        mlp_w2_ = Param("pipe.agg_mlp_w2", mrng.normal_tensor(hidden, 1, 0.02));
        mlp_b2_ = Param("pipe.agg_mlp_b2", Tensor(1, 1));
    }
    if (cfg_.aggregation == Aggregation::Parameter) {
        const char* names[3] = {"a", "en", "eo"};
        for (int i = 0; i < 3; ++i) {
            free_w_v_[static_cast<size_t>(i)] =
                Param(std::string("pipe.agg_w_v_") + names[i], Tensor(1, 1));
            free_w_t_[static_cast<size_t>(i)] =
                Param(std::string("pipe.agg_w_t_") + names[i], Tensor(1, 1));
        }
    }
}

std::pair<Var, Var> PrototypePipeline::dpp_forward(Tape& t, const PrototypeBank& bank,
                                                   const std::vector<int64_t>& identity_rows) {
    if (!cfg_.use_dpp) throw DataError("dpp_forward: DPP module is disabled");
    if (bank.dim() != cfg_.d) throw DataError("dpp_forward: bank width mismatch");
    const int64_t m = static_cast<int64_t>(identity_rows.size());
    const int64_t K = cfg_.context_len;

    auto run = [&](Param& ctx, const Tensor& pt_rows) {
        std::vector<int64_t> ctx_idx;
        ctx_idx.reserve(static_cast<size_t>(m * K));
        for (int64_t mi = 0; mi < m; ++mi) {
            const int64_t id = identity_rows[static_cast<size_t>(mi)];
            if (id < 0 || id >= n_) throw DataError("dpp_forward: identity row out of range");
            for (int64_t k = 0; k < K; ++k) ctx_idx.push_back(id * K + k);
        }
        Var ctx_rows = gather_rows(t, t.leaf(ctx), std::move(ctx_idx));
        Var pt = t.constant(pt_rows);
        Var stacked = concat_rows(t, ctx_rows, pt);
        // per identity: K context rows then its (frozen) initial prototype
        std::vector<int64_t> perm;
        perm.reserve(static_cast<size_t>(m * (K + 1)));
        for (int64_t mi = 0; mi < m; ++mi) {
            for (int64_t k = 0; k < K; ++k) perm.push_back(mi * K + k);
            perm.push_back(m * K + mi);
        }
        Var x = gather_rows(t, stacked, std::move(perm));
        for (auto& blk : sae_) x = blk.forward_self(t, x, m, K + 1);
        std::vector<int64_t> last;
        for (int64_t mi = 0; mi < m; ++mi) last.push_back(mi * (K + 1) + K);
        return gather_rows(t, x, std::move(last));
    };
    return {run(ctx_v_, bank.rows_v(identity_rows)), run(ctx_t_, bank.rows_t(identity_rows))};
}

std::array<Var, 4> PrototypePipeline::ipp_forward(Tape& t, const PrototypeBank& bank,
                                                  const std::vector<int64_t>& identity_rows,
                                                  const Var& v_batch, const Var& t_batch) {
    if (cad_.empty()) throw DataError("ipp_forward: IPP module is disabled");
    const int64_t b = v_batch->value.rows();
    if (b == 0 || t_batch->value.rows() == 0) throw DataError("ipp_forward: empty batch");
    if (v_batch->value.cols() != cfg_.d || t_batch->value.cols() != cfg_.d)
        throw DataError("ipp_forward: instance feature width mismatch");
    const int64_t m = static_cast<int64_t>(identity_rows.size());

    auto run = [&](const Tensor& pt_rows, const Var& kv) {
        Var x = t.constant(pt_rows);
        for (auto& blk : cad_) x = blk.forward_cross(t, x, kv, 1, m, kv->value.rows());
        return x;
    };
    Tensor pv = bank.rows_v(identity_rows), pt = bank.rows_t(identity_rows);
    Var p_en_v = run(pv, v_batch);
    Var p_en_t = run(pt, t_batch);
    Var p_eo_v = run(pv, t_batch);
    Var p_eo_t = run(pt, v_batch);
    return {p_en_v, p_en_t, p_eo_v, p_eo_t};
}

Var PrototypePipeline::aggregate_modality(Tape& t, const Var& pt, const std::vector<Var>& present,
                                          const std::string& modality) {
    if (present.empty()) return pt;
    const int64_t k = static_cast<int64_t>(present.size());
    switch (cfg_.aggregation) {
        case Aggregation::Sum: {
            Var acc = pt;
            for (const Var& p : present) acc = add(t, acc, p);
            return acc;
        }
        case Aggregation::Average: {
            Var acc = present[0];
            for (size_t i = 1; i < present.size(); ++i) acc = add(t, acc, present[i]);
            return add(t, pt, scale(t, acc, 1.0 / static_cast<double>(k)));
        }
        case Aggregation::Apa: {
            std::vector<Var> logits;
            for (const Var& p : present) logits.push_back(rowwise_dot(t, pt, p));
            Var w = softmax_rows(t, concat_cols(t, logits));
            Var acc = pt;
            for (int64_t ki = 0; ki < k; ++ki) {
                std::vector<int64_t> col(static_cast<size_t>(w->value.rows()), ki);
                acc = add(t, acc, mul_col_broadcast(t, present[static_cast<size_t>(ki)],
                                                    pick_cols(t, w, std::move(col))));
            }
            return acc;
        }
        case Aggregation::Mlp: {
            std::vector<Var> logits;
            for (const Var& p : present) {
                Var h = linear(t, hconcat(t, pt, p), t.leaf(mlp_w1_), t.leaf(mlp_b1_));
                logits.push_back(linear(t, gelu(t, h), t.leaf(mlp_w2_), t.leaf(mlp_b2_)));
            }
            Var w = softmax_rows(t, concat_cols(t, logits));
            Var acc = pt;
            for (int64_t ki = 0; ki < k; ++ki) {
                std::vector<int64_t> col(static_cast<size_t>(w->value.rows()), ki);
                acc = add(t, acc, mul_col_broadcast(t, present[static_cast<size_t>(ki)],
                                                    pick_cols(t, w, std::move(col))));
            }
            return acc;
        }
        case Aggregation::Parameter: {
            auto& bank_params = modality == "v" ? free_w_v_ : free_w_t_;
            std::vector<Var> logits;
            size_t slot = 0;
            for (const Var& p : present) {
                (void)p;
                logits.push_back(t.leaf(bank_params[slot++]));
            }
            Var w = softmax_rows(t, concat_cols(t, logits));  // (1 x k)
            Var acc = pt;
            for (int64_t ki = 0; ki < k; ++ki)
                acc = add(t, acc, scale_by(t, present[static_cast<size_t>(ki)],
                                           pick_cols(t, w, {ki})));
            return acc;
        }
    }
    throw DataError("unreachable aggregation");
}

std::pair<Var, Var> PrototypePipeline::apa_aggregate(Tape& t, const PrototypeBank& bank,
                                                     const std::vector<int64_t>& identity_rows,
                                                     const Var& p_a_v, const Var& p_a_t,
                                                     const Var& p_en_v, const Var& p_en_t,
                                                     const Var& p_eo_v, const Var& p_eo_t) {
    Var pt_v = t.constant(bank.rows_v(identity_rows));
    Var pt_t = t.constant(bank.rows_t(identity_rows));
    std::vector<Var> present_v, present_t;
    for (const Var& p : {p_a_v, p_en_v, p_eo_v})
        if (p) present_v.push_back(p);
    for (const Var& p : {p_a_t, p_en_t, p_eo_t})
        if (p) present_t.push_back(p);
    for (const Var& p : present_v)
        if (!p->value.same_shape(pt_v->value)) throw DataError("apa_aggregate: shape mismatch");
    for (const Var& p : present_t)
        if (!p->value.same_shape(pt_t->value)) throw DataError("apa_aggregate: shape mismatch");
    return {aggregate_modality(t, pt_v, present_v, "v"),
            aggregate_modality(t, pt_t, present_t, "t")};
}

EnrichedPrototypes PrototypePipeline::forward(Tape& t, const PrototypeBank& bank,
                                              const std::vector<int64_t>& identity_rows,
                                              const Var& v_batch, const Var& t_batch) {
    EnrichedPrototypes out;
    if (cfg_.use_dpp) {
        auto [pav, pat] = dpp_forward(t, bank, identity_rows);
        out.p_a_v = pav;
        out.p_a_t = pat;
    }
    if (cfg_.use_ipp_intra || cfg_.use_ipp_inter) {
        auto run = [&](const Tensor& pt_rows, const Var& kv) {
            Var x = t.constant(pt_rows);
            for (auto& blk : cad_) x = blk.forward_cross(t, x, kv, 1, x->value.rows(), kv->value.rows());
            return x;
        };
        Tensor pv = bank.rows_v(identity_rows), pt = bank.rows_t(identity_rows);
        if (cfg_.use_ipp_intra) {
            out.p_en_v = run(pv, v_batch);
            out.p_en_t = run(pt, t_batch);
        }
        if (cfg_.use_ipp_inter) {
            out.p_eo_v = run(pv, t_batch);
            out.p_eo_t = run(pt, v_batch);
        }
    }
    auto [pv, pt] = apa_aggregate(t, bank, identity_rows, out.p_a_v, out.p_a_t, out.p_en_v,
                                  out.p_en_t, out.p_eo_v, out.p_eo_t);
    out.p_v = pv;
    out.p_t = pt;
    return out;
}

std::vector<Param*> PrototypePipeline::params() {
    std::vector<Param*> out;
    if (cfg_.use_dpp) {
        out.push_back(&ctx_v_);
        out.push_back(&ctx_t_);
        for (auto& blk : sae_)
            for (Param* p : blk.params()) out.push_back(p);
    }
    for (auto& blk : cad_)
        for (Param* p : blk.params()) out.push_back(p);
    if (cfg_.aggregation == Aggregation::Mlp)
        for (Param* p : {&mlp_w1_, &mlp_b1_, &mlp_w2_, &mlp_b2_}) out.push_back(p);
    if (cfg_.aggregation == Aggregation::Parameter)
        for (int i = 0; i < 3; ++i) {
            out.push_back(&free_w_v_[static_cast<size_t>(i)]);
            out.push_back(&free_w_t_[static_cast<size_t>(i)]);
        }
    return out;
}

}  // namespace propot
