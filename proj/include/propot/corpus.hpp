#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "propot/image.hpp"
#include "propot/rng.hpp"

namespace propot {

constexpr int64_t kImageH = 384;
constexpr int64_t kImageW = 128;
constexpr int64_t kSeqLen = 77;

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Identity {
    std::string label;
    int64_t index = -1;  // dense in [0, N) over the training split, -1 elsewhere
};

struct TokenSequence {
    std::vector<int64_t> ids;  // length exactly kSeqLen, PAD only as suffix
    int64_t eos_pos() const;
};

// Word-level tokenizer built from the corpus captions. Ids 0..4 are reserved.
class Vocabulary {
public:
    static constexpr int64_t kPad = 0;
    static constexpr int64_t kBos = 1;
    static constexpr int64_t kEos = 2;
    static constexpr int64_t kUnk = 3;
    static constexpr int64_t kMask = 4;
    static constexpr int64_t kFirstWord = 5;

    Vocabulary();
    void add_words_from(const std::string& caption);
    void finalize();  // sorts words, assigns ids
    int64_t size() const { return static_cast<int64_t>(tokens_.size()); }
    int64_t id_of(const std::string& word) const;  // kUnk if absent
    const std::string& token(int64_t id) const { return tokens_[static_cast<size_t>(id)]; }

    void save(const std::string& path) const;  // newline-separated tokens
    static Vocabulary load(const std::string& path);

    static std::vector<std::string> split_words(const std::string& caption);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int64_t> to_id_;
    std::map<std::string, int64_t> pending_;  // ordered for determinism
    bool finalized_ = false;
};

enum class InstanceKind { Image, Text };

struct Instance {
    InstanceKind kind;
    std::string uid;
    Identity identity;
    int64_t pair_id = -1;  // links an image with its annotated captions
    Split split = Split::Train;
    std::string image_path;  // image instances: file location ("" if in-memory)
    int64_t store_index = -1;  // image instances: slot in the in-memory store
    std::string caption;       // text instances
};

struct SyntheticSpec {
    int64_t n_identities = 16;
    int64_t images_per_identity = 4;
    int64_t captions_per_image = 2;
    std::vector<int64_t> attr_vocab_sizes = {8, 8, 6};
    double noise = 0.10;
    uint64_t seed = 0;

    void validate() const;
};

struct CorpusCounts {
    int64_t identities = 0;
    int64_t images = 0;
    int64_t texts = 0;
    int64_t pairs = 0;  // annotated (image, caption) pairs
};

class Corpus {
public:
    const std::vector<Instance>& instances() const { return instances_; }
    const Instance& instance(int64_t i) const { return instances_[static_cast<size_t>(i)]; }

    std::vector<int64_t> image_indices(Split s) const;
    std::vector<int64_t> text_indices(Split s) const;
    // (image instance idx, text instance idx) for every annotated caption
    std::vector<std::pair<int64_t, int64_t>> pairs(Split s) const;

    int64_t n_train_identities() const { return n_train_identities_; }
    CorpusCounts counts(Split s) const;

    const Vocabulary& vocab() const { return vocab_; }
    Vocabulary& vocab() { return vocab_; }

    Image load_image(const Instance& inst) const;

    // Writes annotations.json, vocab.txt and images/*.bmp under dir.
    void save(const std::string& dir) const;

    static Corpus ingest_annotations(const std::string& path);
    static Corpus generate_synthetic(const SyntheticSpec& spec);
    static Corpus load(const std::string& dir);  // from a saved corpus directory

private:
    void index_identities();
    void build_vocab();

    std::vector<Instance> instances_;
    std::vector<Image> store_;  // in-memory images (synthetic corpora)
    Vocabulary vocab_;
    int64_t n_train_identities_ = 0;
    std::string base_dir_;  // for resolving relative image paths
};

TokenSequence tokenize(const std::string& caption, const Vocabulary& vocab);

// One training/eval batch of aligned (image, caption) pairs.
struct Batch {
    std::vector<int64_t> image_instance;  // corpus instance indices
    std::vector<int64_t> text_instance;
    std::vector<Image> images;                    // augmented when training
    std::vector<std::vector<int64_t>> tokens;     // original ids, B x kSeqLen
    std::vector<std::vector<int64_t>> masked;     // ids after MLM masking
    std::vector<std::pair<int64_t, int64_t>> mask_positions;  // (row, pos)
    std::vector<int64_t> labels;  // dense train identity index per row
    int64_t size() const { return static_cast<int64_t>(labels.size()); }
};

enum class SamplerKind { Random, IdentityAware };

struct BatchConfig {
    int64_t batch_size = 64;
    SamplerKind sampler = SamplerKind::Random;
    int64_t instances_per_identity = 4;  // Kinst for the identity-aware sampler
    double mask_prob = 0.15;
    bool training = true;  // augmentation + masking only when true
};

// Materializes the seeded batch order for one epoch.
std::vector<Batch> make_batches(const Corpus& corpus, const BatchConfig& cfg, Rng rng);

}  // namespace propot
