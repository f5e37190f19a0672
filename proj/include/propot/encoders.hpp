#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "propot/autodiff.hpp"
#include "propot/corpus.hpp"
#include "propot/transformer.hpp"

namespace propot {

enum class EncoderMode { Toy, EmbeddingBacked };

struct EncoderConfig {
    int64_t d = 512;
    int64_t depth = 2;
    int64_t heads = 0;  // 0: derived from d (8 at d=512, scaled down with d)
    int64_t ffn_hidden = 0;  // 0: 2*d
    int64_t pool = 8;        // image stem mean-pool factor
    int64_t patch = 8;       // patch size on the pooled grid
    int64_t vocab_size = 0;
    EncoderMode mode = EncoderMode::Toy;

    int64_t resolved_heads() const;
    int64_t resolved_ffn() const { return ffn_hidden > 0 ? ffn_hidden : 2 * d; }
    void validate() const;
};

// Versioned instance-id -> feature-vector map used by the embedding-backed
// encoder mode and by `export-embeddings`.
struct EmbeddingStore {
    int64_t d = 0;
    std::unordered_map<std::string, std::vector<double>> features;

    Tensor rows(const std::vector<std::string>& uids) const;
    void save(const std::string& path) const;
    static EmbeddingStore load(const std::string& path);
};

// Patch-embedding transformer over an 8x-pooled grid of the 384x128 input.
class ToyImageEncoder {
public:
    ToyImageEncoder() = default;
    ToyImageEncoder(const EncoderConfig& cfg, Rng& rng);

    // (global B x d, tokens B*seq x d)
    std::pair<Var, Var> forward(Tape& t, const std::vector<Image>& images);
    int64_t seq_len() const { return n_patches_ + 1; }
    std::vector<Param*> params();

private:
    EncoderConfig cfg_;
    int64_t grid_h_ = 0, grid_w_ = 0, n_patches_ = 0, patch_dim_ = 0;
    Param patch_proj_, patch_bias_, cls_, pos_;
    std::vector<TransformerBlock> blocks_;
    Param ln_g_, ln_b_;
    Param proj_;  // global projection, no bias
};

// Token transformer; global feature pooled at the EOS position.
class ToyTextEncoder {
public:
    ToyTextEncoder() = default;
    ToyTextEncoder(const EncoderConfig& cfg, Rng& rng);

    // (global B x d, tokens B*kSeqLen x d)
    std::pair<Var, Var> forward(Tape& t, const std::vector<std::vector<int64_t>>& token_rows);
    std::vector<Param*> params();

private:
    EncoderConfig cfg_;
    Param token_emb_, pos_;
    std::vector<TransformerBlock> blocks_;
    Param ln_g_, ln_b_;
    Param proj_;
};

struct ImageEncoding {
    Var global;  // B x d
    Var tokens;  // B*seq x d (null in embedding-backed mode)
    int64_t seq = 0;
};

struct TextEncoding {
    Var global;
    Var tokens;  // B*kSeqLen x d (null in embedding-backed mode)
};

// Mode-aware encoder pair. In embedding-backed mode both encoders become
// frozen lookups keyed by instance uid and expose no token features.
class Encoders {
public:
    static Encoders make_toy(const EncoderConfig& cfg, Rng rng);
    static Encoders embedding_backed(const std::string& features_file);

    ImageEncoding encode_images(Tape& t, const std::vector<Image>& images,
                                const std::vector<std::string>& uids);
    TextEncoding encode_texts(Tape& t, const std::vector<std::vector<int64_t>>& token_rows,
                              const std::vector<std::string>& uids);

    bool toy() const { return cfg_.mode == EncoderMode::Toy; }
    const EncoderConfig& config() const { return cfg_; }
    int64_t dim() const { return cfg_.d; }
    std::vector<Param*> params();

private:
    EncoderConfig cfg_;
    ToyImageEncoder image_;
    ToyTextEncoder text_;
    std::optional<EmbeddingStore> store_;
};

}  // namespace propot
