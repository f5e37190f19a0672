#include "propot/encoders.hpp"

#include <fstream>

#include "json.hpp"
#include "propot/errors.hpp"

using nlohmann::json;

namespace propot {

int64_t EncoderConfig::resolved_heads() const {
    if (heads > 0) return heads;
    int64_t h = std::max<int64_t>(1, 8 * d / 512);
    if (d % h != 0) h = 1;
    return h;
}

void EncoderConfig::validate() const {
    if (d <= 0) throw DataError("encoder config: d must be positive");
    if (depth < 1) throw DataError("encoder config: depth must be >= 1");
    const int64_t h = resolved_heads();
    if (h < 1 || d % h != 0) throw DataError("encoder config: heads must divide d");
    if (pool < 1 || kImageH % pool != 0 || kImageW % pool != 0)
        throw DataError("encoder config: pool must divide 384 and 128");
    const int64_t gh = kImageH / pool, gw = kImageW / pool;
    if (patch < 1 || gh % patch != 0 || gw % patch != 0)
        throw DataError("encoder config: patch must divide the pooled grid");
    if (mode == EncoderMode::Toy && vocab_size < Vocabulary::kFirstWord)
        throw DataError("encoder config: vocab_size not set");
}

// ---------------------------------------------------------------------------
// EmbeddingStore

Tensor EmbeddingStore::rows(const std::vector<std::string>& uids) const {
    Tensor out(static_cast<int64_t>(uids.size()), d);
    for (size_t i = 0; i < uids.size(); ++i) {
        auto it = features.find(uids[i]);
        if (it == features.end())
            throw DataError("embedding store: unknown instance id '" + uids[i] + "'");
        std::copy(it->second.begin(), it->second.end(), out.row(static_cast<int64_t>(i)));
    }
    return out;
}

void EmbeddingStore::save(const std::string& path) const {
    json doc;
    doc["format"] = "propot-embeddings";
    doc["version"] = 1;
    doc["d"] = d;
    json emb = json::object();
    for (const auto& [uid, vec] : features) emb[uid] = vec;
    doc["embeddings"] = std::move(emb);
    std::ofstream f(path);
    if (!f) throw DataError("cannot write embeddings: " + path);
    f << doc.dump(2) << "\n";
}

EmbeddingStore EmbeddingStore::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open embeddings: " + path);
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::exception& e) {
        throw DataError("embeddings file is not valid JSON: " + std::string(e.what()));
    }
    if (!doc.contains("format") || doc["format"] != "propot-embeddings" ||
        !doc.contains("version") || doc["version"] != 1)
        throw DataError("embeddings file has an unknown header: " + path);
    EmbeddingStore store;
    store.d = doc["d"].get<int64_t>();
    for (auto& [uid, vec] : doc["embeddings"].items()) {
        auto v = vec.get<std::vector<double>>();
        if (static_cast<int64_t>(v.size()) != store.d)
            throw DataError("embedding for '" + uid + "' has wrong width");
        store.features[uid] = std::move(v);
    }
    return store;
}

// ---------------------------------------------------------------------------
// ToyImageEncoder

ToyImageEncoder::ToyImageEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    grid_h_ = kImageH / cfg.pool;
    grid_w_ = kImageW / cfg.pool;
    n_patches_ = (grid_h_ / cfg.patch) * (grid_w_ / cfg.patch);
    patch_dim_ = cfg.patch * cfg.patch * 3;
    patch_proj_ = Param("img.patch_proj", rng.fork("ipp").normal_tensor(patch_dim_, cfg.d, 0.02));
    patch_bias_ = Param("img.patch_bias", Tensor(1, cfg.d));
    cls_ = Param("img.cls", rng.fork("icls").normal_tensor(1, cfg.d, 0.02));
    pos_ = Param("img.pos", rng.fork("ipos").normal_tensor(seq_len(), cfg.d, 0.01));
    for (int64_t i = 0; i < cfg.depth; ++i)
        blocks_.emplace_back("img.block" + std::to_string(i), cfg.d, cfg.resolved_heads(),
                             cfg.resolved_ffn(), false, rng);
    ln_g_ = Param("img.ln_g", Tensor(1, cfg.d, 1.0));
    ln_b_ = Param("img.ln_b", Tensor(1, cfg.d));
    proj_ = Param("img.proj", rng.fork("iproj").normal_tensor(cfg.d, cfg.d, 0.02));
}

std::pair<Var, Var> ToyImageEncoder::forward(Tape& t, const std::vector<Image>& images) {
    const int64_t b = static_cast<int64_t>(images.size());
    if (b == 0) throw DataError("encode_images: empty batch");
    for (const auto& img : images)
        if (img.h != kImageH || img.w != kImageW || img.c != 3)
            throw DataError("encode_images: image must be " + std::to_string(kImageH) + "x" +
                            std::to_string(kImageW) + "x3, got " + std::to_string(img.h) + "x" +
                            std::to_string(img.w) + "x" + std::to_string(img.c));

    // mean-pool stem + patch flatten; pixels carry no gradient
    const int64_t ph = grid_h_ / cfg_.patch, pw = grid_w_ / cfg_.patch;
    Tensor patches(b * n_patches_, patch_dim_);
    for (int64_t bi = 0; bi < b; ++bi) {
        const Image& img = images[static_cast<size_t>(bi)];
        Image grid(grid_h_, grid_w_, 3);
        const double inv = 1.0 / static_cast<double>(cfg_.pool * cfg_.pool);
        for (int64_t gy = 0; gy < grid_h_; ++gy)
            for (int64_t gx = 0; gx < grid_w_; ++gx)
                for (int64_t ch = 0; ch < 3; ++ch) {
                    double s = 0.0;
                    for (int64_t yy = 0; yy < cfg_.pool; ++yy)
                        for (int64_t xx = 0; xx < cfg_.pool; ++xx)
                            s += img.at(gy * cfg_.pool + yy, gx * cfg_.pool + xx, ch);
                    grid.at(gy, gx, ch) = s * inv;
                }
        for (int64_t py = 0; py < ph; ++py)
            for (int64_t px = 0; px < pw; ++px) {
                double* dst = patches.row(bi * n_patches_ + py * pw + px);
                int64_t o = 0;
                for (int64_t yy = 0; yy < cfg_.patch; ++yy)
                    for (int64_t xx = 0; xx < cfg_.patch; ++xx)
                        for (int64_t ch = 0; ch < 3; ++ch)
                            dst[o++] = 2.0 * (grid.at(py * cfg_.patch + yy, px * cfg_.patch + xx, ch) - 0.5);
            }
    }

    Var patch_tokens = linear(t, t.constant(std::move(patches)), t.leaf(patch_proj_), t.leaf(patch_bias_));
    Var cls_rows = tile_rows(t, t.leaf(cls_), b);
    Var stacked = concat_rows(t, cls_rows, patch_tokens);
    // interleave [cls_b, patches_b...] per image
    std::vector<int64_t> perm;
    perm.reserve(static_cast<size_t>(b * seq_len()));
    for (int64_t bi = 0; bi < b; ++bi) {
        perm.push_back(bi);
        for (int64_t p = 0; p < n_patches_; ++p) perm.push_back(b + bi * n_patches_ + p);
    }
    Var x = gather_rows(t, stacked, std::move(perm));
    x = add(t, x, tile_rows(t, t.leaf(pos_), b));
    for (auto& blk : blocks_) x = blk.forward_self(t, x, b, seq_len());
    Var tokens = layer_norm(t, x, t.leaf(ln_g_), t.leaf(ln_b_));
    std::vector<int64_t> cls_idx;
    for (int64_t bi = 0; bi < b; ++bi) cls_idx.push_back(bi * seq_len());
    Var global = matmul(t, gather_rows(t, tokens, std::move(cls_idx)), t.leaf(proj_));
    return {global, tokens};
}

std::vector<Param*> ToyImageEncoder::params() {
    std::vector<Param*> out = {&patch_proj_, &patch_bias_, &cls_, &pos_, &ln_g_, &ln_b_, &proj_};
    for (auto& blk : blocks_)
        for (Param* p : blk.params()) out.push_back(p);
    return out;
}

// ---------------------------------------------------------------------------
// ToyTextEncoder

ToyTextEncoder::ToyTextEncoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    token_emb_ = Param("txt.token_emb", rng.fork("temb").normal_tensor(cfg.vocab_size, cfg.d, 0.02));
    pos_ = Param("txt.pos", rng.fork("tpos").normal_tensor(kSeqLen, cfg.d, 0.01));
    for (int64_t i = 0; i < cfg.depth; ++i)
        blocks_.emplace_back("txt.block" + std::to_string(i), cfg.d, cfg.resolved_heads(),
                             cfg.resolved_ffn(), false, rng);
    ln_g_ = Param("txt.ln_g", Tensor(1, cfg.d, 1.0));
    ln_b_ = Param("txt.ln_b", Tensor(1, cfg.d));
    proj_ = Param("txt.proj", rng.fork("tproj").normal_tensor(cfg.d, cfg.d, 0.02));
}

std::pair<Var, Var> ToyTextEncoder::forward(Tape& t,
                                            const std::vector<std::vector<int64_t>>& token_rows) {
    const int64_t b = static_cast<int64_t>(token_rows.size());
    if (b == 0) throw DataError("encode_texts: empty batch");
    std::vector<int64_t> flat;
    flat.reserve(static_cast<size_t>(b * kSeqLen));
    std::vector<int64_t> eos_rows;
    for (int64_t bi = 0; bi < b; ++bi) {
        const auto& row = token_rows[static_cast<size_t>(bi)];
        if (static_cast<int64_t>(row.size()) != kSeqLen)
            throw DataError("encode_texts: token sequence must have length " +
                            std::to_string(kSeqLen));
        int64_t eos = kSeqLen - 1;
        for (int64_t p = 0; p < kSeqLen; ++p) {
            flat.push_back(row[static_cast<size_t>(p)]);
            if (row[static_cast<size_t>(p)] == Vocabulary::kEos && eos == kSeqLen - 1) eos = p;
        }
        eos_rows.push_back(bi * kSeqLen + eos);
    }
    Var x = embedding(t, t.leaf(token_emb_), flat);
    x = add(t, x, tile_rows(t, t.leaf(pos_), b));
    for (auto& blk : blocks_) x = blk.forward_self(t, x, b, kSeqLen);
    Var tokens = layer_norm(t, x, t.leaf(ln_g_), t.leaf(ln_b_));
    Var global = matmul(t, gather_rows(t, tokens, std::move(eos_rows)), t.leaf(proj_));
    return {global, tokens};
}

std::vector<Param*> ToyTextEncoder::params() {
    std::vector<Param*> out = {&token_emb_, &pos_, &ln_g_, &ln_b_, &proj_};
    for (auto& blk : blocks_)
        for (Param* p : blk.params()) out.push_back(p);
    return out;
}

// ---------------------------------------------------------------------------
// Encoders facade

Encoders Encoders::make_toy(const EncoderConfig& cfg, Rng rng) {
    cfg.validate();
    Encoders e;
    e.cfg_ = cfg;
    Rng irng = rng.fork("image_encoder");
    Rng trng = rng.fork("text_encoder");
    e.image_ = ToyImageEncoder(cfg, irng);
    e.text_ = ToyTextEncoder(cfg, trng);
    return e;
}

Encoders Encoders::embedding_backed(const std::string& features_file) {
    Encoders e;
    e.store_ = EmbeddingStore::load(features_file);
    e.cfg_.mode = EncoderMode::EmbeddingBacked;
    e.cfg_.d = e.store_->d;
    return e;
}

ImageEncoding Encoders::encode_images(Tape& t, const std::vector<Image>& images,
                                      const std::vector<std::string>& uids) {
    ImageEncoding out;
    if (cfg_.mode == EncoderMode::Toy) {
        auto [global, tokens] = image_.forward(t, images);
        out.global = global;
        out.tokens = tokens;
        out.seq = image_.seq_len();
    } else {
        out.global = t.constant(store_->rows(uids));
    }
    if (!out.global->value.all_finite()) throw NumericError("encode_images: non-finite output");
    return out;
}

TextEncoding Encoders::encode_texts(Tape& t, const std::vector<std::vector<int64_t>>& token_rows,
                                    const std::vector<std::string>& uids) {
    TextEncoding out;
    if (cfg_.mode == EncoderMode::Toy) {
        auto [global, tokens] = text_.forward(t, token_rows);
        out.global = global;
        out.tokens = tokens;
    } else {
        out.global = t.constant(store_->rows(uids));
    }
    if (!out.global->value.all_finite()) throw NumericError("encode_texts: non-finite output");
    return out;
}

std::vector<Param*> Encoders::params() {
    if (cfg_.mode != EncoderMode::Toy) return {};
    std::vector<Param*> out = image_.params();
    for (Param* p : text_.params()) out.push_back(p);
    return out;
}

}  // namespace propot
