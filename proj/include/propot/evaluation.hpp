#pragma once

#include <string>
#include <vector>

#include "propot/corpus.hpp"
#include "propot/encoders.hpp"

namespace propot {

struct EmbeddedSplit {
    Tensor gallery;  // G x d, one row per split image
    Tensor queries;  // Q x d, one row per split text
    std::vector<std::string> gallery_labels, query_labels;
    std::vector<std::string> gallery_uids, query_uids;
    std::vector<int64_t> gallery_instance, query_instance;  // corpus indices
};

EmbeddedSplit embed_split(const Corpus& corpus, Split split, Encoders& encoders,
                          int64_t batch_limit = 32);

// Per query: gallery indices by descending cosine similarity, exact ties
// broken by ascending gallery index, plus aligned relevance flags.
struct RankedRetrieval {
    std::vector<std::vector<int64_t>> order;
    std::vector<std::vector<char>> relevant;
    int64_t gallery_size() const { return order.empty() ? 0 : static_cast<int64_t>(order[0].size()); }
    int64_t query_count() const { return static_cast<int64_t>(order.size()); }
};

RankedRetrieval rank(const Tensor& queries, const Tensor& gallery,
                     const std::vector<std::string>& query_labels,
                     const std::vector<std::string>& gallery_labels);

// fraction of queries whose top-k contains at least one relevant item
double recall_at_k(const RankedRetrieval& ranked, int64_t k);

struct MapResult {
    double value = 0.0;
    int64_t evaluated = 0;
    int64_t excluded = 0;  // zero-relevant queries, reported but not averaged
};
MapResult mean_average_precision(const RankedRetrieval& ranked);

struct Metrics {
    double r1 = 0.0, r5 = 0.0, r10 = 0.0, map = 0.0;
    int64_t queries = 0, gallery = 0, excluded_queries = 0;
    std::string to_json() const;
};

Metrics compute_metrics(const RankedRetrieval& ranked);

// Fig-style static retrieval panels: per query the caption, top-n gallery
// thumbnails and green/red match flags; optionally two models side by side.
void render_report(const std::string& path, const Corpus& corpus, const EmbeddedSplit& split,
                   const RankedRetrieval& ranked, int64_t top_n,
                   const RankedRetrieval* baseline = nullptr, int64_t max_queries = 8);

}  // namespace propot
