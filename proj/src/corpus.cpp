#include "propot/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "propot/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace propot {

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw DataError("unknown split '" + s + "' (expected train|val|test)");
}

int64_t TokenSequence::eos_pos() const {
    for (size_t i = 0; i < ids.size(); ++i)
        if (ids[i] == Vocabulary::kEos) return static_cast<int64_t>(i);
    return static_cast<int64_t>(ids.size()) - 1;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
    tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>", "<mask>"};
    for (size_t i = 0; i < tokens_.size(); ++i) to_id_[tokens_[i]] = static_cast<int64_t>(i);
}

std::vector<std::string> Vocabulary::split_words(const std::string& caption) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : caption) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        } else if (!cur.empty()) {
            words.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

void Vocabulary::add_words_from(const std::string& caption) {
    for (const auto& w : split_words(caption)) pending_[w] += 1;
}

void Vocabulary::finalize() {
    for (const auto& [w, cnt] : pending_) {
        (void)cnt;
        if (!to_id_.count(w)) {
            to_id_[w] = static_cast<int64_t>(tokens_.size());
            tokens_.push_back(w);
        }
    }
    pending_.clear();
    finalized_ = true;
}

int64_t Vocabulary::id_of(const std::string& word) const {
    auto it = to_id_.find(word);
    return it == to_id_.end() ? kUnk : it->second;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw DataError("cannot write vocabulary: " + path);
    for (const auto& t : tokens_) f << t << "\n";
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read vocabulary: " + path);
    Vocabulary v;
    std::string line;
    std::vector<std::string> all;
    while (std::getline(f, line))
        if (!line.empty()) all.push_back(line);
    if (all.size() < 5 || all[0] != "<pad>" || all[4] != "<mask>")
        throw DataError("vocabulary file missing reserved tokens: " + path);
    for (size_t i = 5; i < all.size(); ++i) {
        v.to_id_[all[i]] = static_cast<int64_t>(v.tokens_.size());
        v.tokens_.push_back(all[i]);
    }
    v.finalized_ = true;
    return v;
}

TokenSequence tokenize(const std::string& caption, const Vocabulary& vocab) {
    if (caption.empty()) throw DataError("tokenize: empty caption");
    TokenSequence seq;
    seq.ids.assign(kSeqLen, Vocabulary::kPad);
    seq.ids[0] = Vocabulary::kBos;
    auto words = Vocabulary::split_words(caption);
    // BOS + words + EOS within kSeqLen; overlong captions are truncated
    const size_t max_words = kSeqLen - 2;
    int64_t pos = 1;
    for (size_t i = 0; i < words.size() && i < max_words; ++i)
        seq.ids[static_cast<size_t>(pos++)] = vocab.id_of(words[i]);
    seq.ids[static_cast<size_t>(pos)] = Vocabulary::kEos;
    return seq;
}

// ---------------------------------------------------------------------------
// Corpus construction

void Corpus::index_identities() {
    std::map<std::string, Split> seen_split;
    std::set<std::string> train_labels;
    for (const auto& inst : instances_) {
        auto it = seen_split.find(inst.identity.label);
        if (it == seen_split.end()) {
            seen_split[inst.identity.label] = inst.split;
        } else if (it->second != inst.split) {
            throw DataError("identity '" + inst.identity.label + "' appears in two splits (" +
                            to_string(it->second) + " and " + to_string(inst.split) + ")");
        }
        if (inst.split == Split::Train) train_labels.insert(inst.identity.label);
    }
    std::map<std::string, int64_t> index;
    int64_t next = 0;
    for (const auto& l : train_labels) index[l] = next++;  // sorted labels -> dense ids
    n_train_identities_ = next;
    for (auto& inst : instances_) {
        auto it = index.find(inst.identity.label);
        inst.identity.index = it == index.end() ? -1 : it->second;
    }
}

void Corpus::build_vocab() {
    for (const auto& inst : instances_)
        if (inst.kind == InstanceKind::Text && inst.split == Split::Train)
            vocab_.add_words_from(inst.caption);
    vocab_.finalize();
}

std::vector<int64_t> Corpus::image_indices(Split s) const {
    std::vector<int64_t> out;
    for (size_t i = 0; i < instances_.size(); ++i)
        if (instances_[i].kind == InstanceKind::Image && instances_[i].split == s)
            out.push_back(static_cast<int64_t>(i));
    return out;
}

std::vector<int64_t> Corpus::text_indices(Split s) const {
    std::vector<int64_t> out;
    for (size_t i = 0; i < instances_.size(); ++i)
        if (instances_[i].kind == InstanceKind::Text && instances_[i].split == s)
            out.push_back(static_cast<int64_t>(i));
    return out;
}

std::vector<std::pair<int64_t, int64_t>> Corpus::pairs(Split s) const {
    std::unordered_map<int64_t, int64_t> image_of_pair;
    for (size_t i = 0; i < instances_.size(); ++i)
        if (instances_[i].kind == InstanceKind::Image)
            image_of_pair[instances_[i].pair_id] = static_cast<int64_t>(i);
    std::vector<std::pair<int64_t, int64_t>> out;
    for (size_t i = 0; i < instances_.size(); ++i) {
        const auto& inst = instances_[i];
        if (inst.kind != InstanceKind::Text || inst.split != s) continue;
        auto it = image_of_pair.find(inst.pair_id);
        if (it == image_of_pair.end())
            throw DataError("text instance '" + inst.uid + "' has no paired image");
        out.emplace_back(it->second, static_cast<int64_t>(i));
    }
    return out;
}

CorpusCounts Corpus::counts(Split s) const {
    CorpusCounts c;
    std::set<std::string> ids;
    for (const auto& inst : instances_) {
        if (inst.split != s) continue;
        ids.insert(inst.identity.label);
        if (inst.kind == InstanceKind::Image)
            ++c.images;
        else
            ++c.texts;
    }
    c.identities = static_cast<int64_t>(ids.size());
    c.pairs = c.texts;
    return c;
}

Image Corpus::load_image(const Instance& inst) const {
    if (inst.kind != InstanceKind::Image) throw DataError("load_image: not an image instance");
    if (inst.store_index >= 0) return store_[static_cast<size_t>(inst.store_index)];
    fs::path p = inst.image_path;
    if (p.is_relative() && !base_dir_.empty()) p = fs::path(base_dir_) / p;
    Image img = read_bmp(p.string());
    if (img.h != kImageH || img.w != kImageW)
        throw DataError("image '" + inst.uid + "' is " + std::to_string(img.h) + "x" +
                        std::to_string(img.w) + ", expected " + std::to_string(kImageH) + "x" +
                        std::to_string(kImageW));
    return img;
}

Corpus Corpus::ingest_annotations(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open annotations: " + path);
    json doc;
    try {
        doc = json::parse(f);
    } catch (const json::exception& e) {
        throw DataError("annotations are not valid JSON: " + std::string(e.what()));
    }
    if (!doc.is_array()) throw DataError("annotations must be a JSON array of records");
    if (doc.empty()) throw DataError("empty corpus");

    Corpus corpus;
    corpus.base_dir_ = fs::path(path).parent_path().string();
    std::set<std::string> seen_paths;
    int64_t pair_id = 0;
    for (size_t ri = 0; ri < doc.size(); ++ri) {
        const json& rec = doc[ri];
        auto fail = [&](const std::string& msg) {
            throw DataError("annotation record " + std::to_string(ri) + ": " + msg);
        };
        if (!rec.is_object()) fail("not an object");
        for (const char* field : {"file_path", "id", "split", "captions"})
            if (!rec.contains(field)) fail(std::string("missing field '") + field + "'");
        if (!rec["file_path"].is_string()) fail("field 'file_path' must be a string");
        if (!rec["id"].is_string() && !rec["id"].is_number_integer())
            fail("field 'id' must be a string or integer");
        if (!rec["split"].is_string()) fail("field 'split' must be a string");
        if (!rec["captions"].is_array()) fail("field 'captions' must be an array");

        const std::string file_path = rec["file_path"].get<std::string>();
        const std::string label = rec["id"].is_string()
                                      ? rec["id"].get<std::string>()
                                      : std::to_string(rec["id"].get<int64_t>());
        Split split;
        try {
            split = split_from_string(rec["split"].get<std::string>());
        } catch (const DataError& e) {
            fail(e.what());
            throw;  // unreachable
        }
        if (!seen_paths.insert(file_path).second) fail("duplicate file_path '" + file_path + "'");

        Instance img;
        img.kind = InstanceKind::Image;
        img.uid = file_path;
        img.identity.label = label;
        img.pair_id = pair_id;
        img.split = split;
        img.image_path = file_path;
        corpus.instances_.push_back(img);

        int64_t ci = 0;
        for (const json& cap : rec["captions"]) {
            if (!cap.is_string()) fail("captions[" + std::to_string(ci) + "] must be a string");
            Instance txt;
            txt.kind = InstanceKind::Text;
            txt.uid = file_path + "#c" + std::to_string(ci);
            txt.identity.label = label;
            txt.pair_id = pair_id;
            txt.split = split;
            txt.caption = cap.get<std::string>();
            corpus.instances_.push_back(txt);
            ++ci;
        }
        ++pair_id;
    }
    corpus.index_identities();
    corpus.build_vocab();
    return corpus;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

struct AttrSlot {
    const char* noun;  // appears in caption templates
    std::vector<std::pair<const char*, std::array<double, 3>>> values;  // word, rgb
};

const std::vector<AttrSlot>& attr_slots() {
    static const std::vector<AttrSlot> slots = {
        {"shirt",
         {{"red", {0.85, 0.10, 0.10}},
          {"blue", {0.12, 0.25, 0.85}},
          {"green", {0.10, 0.70, 0.20}},
          {"yellow", {0.95, 0.90, 0.10}},
          {"purple", {0.55, 0.15, 0.70}},
          {"orange", {0.95, 0.55, 0.05}},
          {"white", {0.95, 0.95, 0.95}},
          {"black", {0.05, 0.05, 0.05}}}},
        {"pants",
         {{"gray", {0.50, 0.50, 0.50}},
          {"brown", {0.45, 0.28, 0.12}},
          {"pink", {0.95, 0.55, 0.70}},
          {"cyan", {0.10, 0.80, 0.85}},
          {"olive", {0.45, 0.50, 0.15}},
          {"navy", {0.08, 0.10, 0.40}},
          {"beige", {0.85, 0.78, 0.62}},
          {"maroon", {0.50, 0.08, 0.12}}}},
        {"item",
         {{"backpack", {0.20, 0.60, 0.45}},
          {"hat", {0.75, 0.20, 0.55}},
          {"umbrella", {0.25, 0.35, 0.05}},
          {"phone", {0.60, 0.60, 0.90}},
          {"book", {0.90, 0.40, 0.30}},
          {"satchel", {0.35, 0.15, 0.05}}}}};
    return slots;
}

const std::vector<const char*>& caption_templates() {
    static const std::vector<const char*> t = {
        "a person wearing a %0 shirt and %1 pants carrying a %2",
        "the person has a %0 shirt with %1 pants and a %2",
        "a pedestrian in a %0 shirt and %1 pants holding a %2",
        "someone dressed in a %0 shirt and %1 pants with a %2",
    };
    return t;
}

std::string fill_template(const std::string& tpl, const std::vector<std::string>& words) {
    std::string out;
    for (size_t i = 0; i < tpl.size(); ++i) {
        if (tpl[i] == '%' && i + 1 < tpl.size() && std::isdigit(static_cast<unsigned char>(tpl[i + 1]))) {
            out += words[static_cast<size_t>(tpl[i + 1] - '0')];
            ++i;
        } else {
            out.push_back(tpl[i]);
        }
    }
    return out;
}

Image render_identity_image(const std::vector<int64_t>& attrs, double noise, Rng& rng) {
    const auto& slots = attr_slots();
    Image img(kImageH, kImageW, 3);
    // neutral background
    for (int64_t i = 0; i < img.numel(); ++i) img.px[static_cast<size_t>(i)] = 0.72;
    // slight per-instance boundary jitter stands in for view changes
    const int64_t jitter = rng.uniform_int(17) - 8;
    const int64_t torso0 = kImageH / 5 + jitter;
    const int64_t torso1 = kImageH * 3 / 5 + jitter;
    auto paint = [&](int64_t y0, int64_t y1, int64_t x0, int64_t x1, const std::array<double, 3>& rgb) {
        for (int64_t y = std::max<int64_t>(0, y0); y < std::min(kImageH, y1); ++y)
            for (int64_t x = std::max<int64_t>(0, x0); x < std::min(kImageW, x1); ++x)
                for (int64_t ch = 0; ch < 3; ++ch) img.at(y, x, ch) = rgb[static_cast<size_t>(ch)];
    };
    paint(torso0, torso1, 8, kImageW - 8, slots[0].values[static_cast<size_t>(attrs[0])].second);
    paint(torso1, kImageH - 16, 16, kImageW - 16, slots[1].values[static_cast<size_t>(attrs[1])].second);
    if (attrs.size() > 2) {
        const int64_t ix = 12 + rng.uniform_int(24);
        const int64_t iy = torso0 + 10 + rng.uniform_int(24);
        paint(iy, iy + 36, ix, ix + 28, slots[2].values[static_cast<size_t>(attrs[2])].second);
    }
    for (int64_t i = 0; i < img.numel(); ++i) {
        double v = img.px[static_cast<size_t>(i)] + noise * (rng.uniform() - 0.5);
        img.px[static_cast<size_t>(i)] = std::clamp(v, 0.0, 1.0);
    }
    return img;
}

// Distinct attribute tuples per identity; fully disjoint words whenever
// n_identities fits within every slot's vocabulary.
std::vector<std::vector<int64_t>> assign_attributes(const SyntheticSpec& spec, Rng& rng) {
    const size_t n_slots = spec.attr_vocab_sizes.size();
    std::vector<std::vector<int64_t>> tuples(static_cast<size_t>(spec.n_identities));
    int64_t min_size = spec.attr_vocab_sizes[0];
    for (int64_t s : spec.attr_vocab_sizes) min_size = std::min(min_size, s);
    if (spec.n_identities <= min_size) {
        std::vector<std::vector<int64_t>> perms(n_slots);
        for (size_t s = 0; s < n_slots; ++s) {
            auto p = rng.fork("attr_perm_" + std::to_string(s)).permutation(spec.attr_vocab_sizes[s]);
            perms[s].assign(p.begin(), p.end());
        }
        for (int64_t i = 0; i < spec.n_identities; ++i)
            for (size_t s = 0; s < n_slots; ++s)
                tuples[static_cast<size_t>(i)].push_back(perms[s][static_cast<size_t>(i)]);
        return tuples;
    }
    // more identities than the smallest slot: enumerate distinct tuples
    int64_t product = 1;
    for (int64_t s : spec.attr_vocab_sizes) product *= s;
    Rng pr = rng.fork("attr_tuples");
    auto order = pr.permutation(product);
    for (int64_t i = 0; i < spec.n_identities; ++i) {
        int64_t code = order[static_cast<size_t>(i)];
        std::vector<int64_t> tuple;
        for (size_t s = 0; s < n_slots; ++s) {
            tuple.push_back(code % spec.attr_vocab_sizes[s]);
            code /= spec.attr_vocab_sizes[s];
        }
        tuples[static_cast<size_t>(i)] = std::move(tuple);
    }
    return tuples;
}

}  // namespace

void SyntheticSpec::validate() const {
    if (n_identities < 1 || images_per_identity < 1 || captions_per_image < 1)
        throw DataError("synthetic spec: all counts must be >= 1");
    if (attr_vocab_sizes.empty()) throw DataError("synthetic spec: need at least one attribute slot");
    const auto& slots = attr_slots();
    if (attr_vocab_sizes.size() > slots.size())
        throw DataError("synthetic spec: at most " + std::to_string(slots.size()) + " attribute slots");
    int64_t product = 1;
    for (size_t s = 0; s < attr_vocab_sizes.size(); ++s) {
        if (attr_vocab_sizes[s] < 1 ||
            attr_vocab_sizes[s] > static_cast<int64_t>(slots[s].values.size()))
            throw DataError("synthetic spec: attribute slot " + std::to_string(s) + " size out of range");
        product *= attr_vocab_sizes[s];
    }
    if (n_identities > product)
        throw DataError("synthetic spec: " + std::to_string(n_identities) +
                        " identities exceed the " + std::to_string(product) +
                        " distinct attribute tuples");
    if (noise < 0.0 || noise > 1.0) throw DataError("synthetic spec: noise must be in [0, 1]");
    if (attr_vocab_sizes.size() < 3)
        throw DataError("synthetic spec: captions name 3 attributes; need 3 slots");
}

Corpus Corpus::generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    Rng root(spec.seed);
    Corpus corpus;
    const auto& slots = attr_slots();
    auto tuples = assign_attributes(spec, root);

    int64_t pair_id = 0;
    for (int64_t i = 0; i < spec.n_identities; ++i) {
        char label[16];
        std::snprintf(label, sizeof(label), "id_%04d", static_cast<int>(i));
        const auto& attrs = tuples[static_cast<size_t>(i)];
        std::vector<std::string> words;
        for (size_t s = 0; s < attrs.size(); ++s)
            words.push_back(slots[s].values[static_cast<size_t>(attrs[s])].first);

        for (int64_t j = 0; j < spec.images_per_identity; ++j) {
            Rng img_rng = root.fork("img_" + std::to_string(i) + "_" + std::to_string(j));
            Instance img;
            img.kind = InstanceKind::Image;
            img.uid = std::string(label) + "_" + std::to_string(j);
            img.identity.label = label;
            img.pair_id = pair_id;
            img.split = Split::Train;
            img.store_index = static_cast<int64_t>(corpus.store_.size());
            corpus.store_.push_back(render_identity_image(attrs, spec.noise, img_rng));
            corpus.instances_.push_back(img);

            Rng cap_rng = root.fork("cap_" + std::to_string(i) + "_" + std::to_string(j));
            for (int64_t k = 0; k < spec.captions_per_image; ++k) {
                const auto& tpls = caption_templates();
                std::string tpl = tpls[static_cast<size_t>(cap_rng.uniform_int(
                    static_cast<int64_t>(tpls.size())))];
                Instance txt;
                txt.kind = InstanceKind::Text;
                txt.uid = img.uid + "#c" + std::to_string(k);
                txt.identity.label = label;
                txt.pair_id = pair_id;
                txt.split = Split::Train;
                txt.caption = fill_template(tpl, words);
                corpus.instances_.push_back(txt);
            }
            ++pair_id;
        }
    }
    corpus.index_identities();
    corpus.build_vocab();
    return corpus;
}

void Corpus::save(const std::string& dir) const {
    fs::create_directories(dir);
    fs::create_directories(fs::path(dir) / "images");
    json doc = json::array();
    std::unordered_map<int64_t, const Instance*> image_of_pair;
    for (const auto& inst : instances_)
        if (inst.kind == InstanceKind::Image) image_of_pair[inst.pair_id] = &inst;
    for (const auto& inst : instances_) {
        if (inst.kind != InstanceKind::Image) continue;
        std::string rel;
        if (inst.store_index >= 0) {
            rel = "images/" + inst.uid + ".bmp";
            write_bmp((fs::path(dir) / rel).string(), store_[static_cast<size_t>(inst.store_index)]);
        } else {
            fs::path p = inst.image_path;
            if (p.is_relative() && !base_dir_.empty()) p = fs::path(base_dir_) / p;
            rel = fs::absolute(p).lexically_normal().string();
        }
        json rec;
        rec["file_path"] = rel;
        rec["id"] = inst.identity.label;
        rec["split"] = to_string(inst.split);
        json caps = json::array();
        for (const auto& other : instances_)
            if (other.kind == InstanceKind::Text && other.pair_id == inst.pair_id)
                caps.push_back(other.caption);
        rec["captions"] = caps;
        doc.push_back(rec);
    }
    std::ofstream f(fs::path(dir) / "annotations.json");
    if (!f) throw DataError("cannot write annotations under " + dir);
    f << doc.dump(2) << "\n";
    vocab_.save((fs::path(dir) / "vocab.txt").string());
}

Corpus Corpus::load(const std::string& dir) {
    Corpus c = ingest_annotations((fs::path(dir) / "annotations.json").string());
    fs::path vpath = fs::path(dir) / "vocab.txt";
    if (fs::exists(vpath)) c.vocab_ = Vocabulary::load(vpath.string());
    return c;
}

// ---------------------------------------------------------------------------
// Batching

namespace {

void apply_mlm_masking(Batch& batch, const Vocabulary& vocab, double mask_prob, Rng& rng) {
    batch.masked = batch.tokens;
    const int64_t n_words = vocab.size() - Vocabulary::kFirstWord;
    for (size_t row = 0; row < batch.tokens.size(); ++row) {
        const auto& ids = batch.tokens[row];
        for (size_t pos = 1; pos < ids.size(); ++pos) {
            const int64_t id = ids[pos];
            if (id == Vocabulary::kPad || id == Vocabulary::kEos || id == Vocabulary::kBos) continue;
            if (rng.uniform() >= mask_prob) continue;
            batch.mask_positions.emplace_back(static_cast<int64_t>(row), static_cast<int64_t>(pos));
            const double r = rng.uniform();
            if (r < 0.8)
                batch.masked[row][pos] = Vocabulary::kMask;
            else if (r < 0.9 && n_words > 0)
                batch.masked[row][pos] = Vocabulary::kFirstWord + rng.uniform_int(n_words);
            // else: keep the original token
        }
    }
}

}  // namespace

std::vector<Batch> make_batches(const Corpus& corpus, const BatchConfig& cfg, Rng rng) {
    auto all_pairs = corpus.pairs(Split::Train);
    const int64_t total = static_cast<int64_t>(all_pairs.size());
    if (total == 0) throw DataError("train split has no (image, caption) pairs");
    if (cfg.batch_size > total)
        throw DataError("batch size " + std::to_string(cfg.batch_size) + " exceeds " +
                        std::to_string(total) + " train pairs");
    if (cfg.batch_size < 1) throw DataError("batch size must be >= 1");

    const int64_t n_batches = total / cfg.batch_size;
    std::vector<std::vector<std::pair<int64_t, int64_t>>> plan;

    if (cfg.sampler == SamplerKind::Random) {
        auto order = rng.fork("pair_order").permutation(total);
        for (int64_t b = 0; b < n_batches; ++b) {
            std::vector<std::pair<int64_t, int64_t>> rows;
            for (int64_t r = 0; r < cfg.batch_size; ++r)
                rows.push_back(all_pairs[static_cast<size_t>(order[static_cast<size_t>(b * cfg.batch_size + r)])]);
            plan.push_back(std::move(rows));
        }
    } else {
        const int64_t kinst = cfg.instances_per_identity;
        if (kinst < 1 || cfg.batch_size % kinst != 0)
            throw DataError("identity-aware sampler: instances_per_identity must divide batch size");
        // group pairs by identity
        std::map<std::string, std::vector<int64_t>> by_label;
        for (int64_t p = 0; p < total; ++p)
            by_label[corpus.instance(all_pairs[static_cast<size_t>(p)].first).identity.label].push_back(p);
        std::vector<std::string> labels;
        for (auto& [l, v] : by_label) labels.push_back(l);
        const int64_t p_ids = cfg.batch_size / kinst;
        Rng order_rng = rng.fork("pk_order");
        std::map<std::string, std::vector<int64_t>> queues;
        for (auto& [l, v] : by_label) {
            auto perm = order_rng.fork("q_" + l).permutation(static_cast<int64_t>(v.size()));
            std::vector<int64_t> q;
            for (int64_t idx : perm) q.push_back(v[static_cast<size_t>(idx)]);
            queues[l] = std::move(q);
        }
        auto label_order = order_rng.permutation(static_cast<int64_t>(labels.size()));
        size_t cursor = 0;
        for (int64_t b = 0; b < n_batches; ++b) {
            std::vector<std::pair<int64_t, int64_t>> rows;
            for (int64_t pi = 0; pi < p_ids; ++pi) {
                const std::string& label =
                    labels[static_cast<size_t>(label_order[cursor % label_order.size()])];
                ++cursor;
                auto& q = queues[label];
                for (int64_t r = 0; r < kinst; ++r) {
                    int64_t pair_idx;
                    if (!q.empty()) {
                        pair_idx = q.back();
                        q.pop_back();
                    } else {  // identity exhausted this epoch: resample
                        const auto& src = by_label[label];
                        pair_idx = src[static_cast<size_t>(
                            order_rng.uniform_int(static_cast<int64_t>(src.size())))];
                    }
                    rows.push_back(all_pairs[static_cast<size_t>(pair_idx)]);
                }
            }
            plan.push_back(std::move(rows));
        }
    }

    std::vector<Batch> batches;
    for (size_t b = 0; b < plan.size(); ++b) {
        Rng brng = rng.fork("batch_" + std::to_string(b));
        Batch batch;
        for (const auto& [img_idx, txt_idx] : plan[b]) {
            const Instance& img = corpus.instance(img_idx);
            const Instance& txt = corpus.instance(txt_idx);
            batch.image_instance.push_back(img_idx);
            batch.text_instance.push_back(txt_idx);
            Image raster = corpus.load_image(img);
            if (cfg.training) raster = augment(raster, brng);
            batch.images.push_back(std::move(raster));
            batch.tokens.push_back(tokenize(txt.caption, corpus.vocab()).ids);
            batch.labels.push_back(img.identity.index);
        }
        if (cfg.training) {
            Rng mrng = brng.fork("mlm");
            apply_mlm_masking(batch, corpus.vocab(), cfg.mask_prob, mrng);
        } else {
            batch.masked = batch.tokens;
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

}  // namespace propot
