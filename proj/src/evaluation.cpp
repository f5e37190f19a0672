#include "propot/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "propot/errors.hpp"
#include "propot/kernels.hpp"

namespace propot {

EmbeddedSplit embed_split(const Corpus& corpus, Split split, Encoders& encoders,
                          int64_t batch_limit) {
    auto img_idx = corpus.image_indices(split);
    auto txt_idx = corpus.text_indices(split);
    if (img_idx.empty() || txt_idx.empty())
        throw DataError("embed_split: split '" + to_string(split) + "' is empty");

    EmbeddedSplit out;
    out.gallery = Tensor(static_cast<int64_t>(img_idx.size()), encoders.dim());
    out.queries = Tensor(static_cast<int64_t>(txt_idx.size()), encoders.dim());

    auto encode = [&](const std::vector<int64_t>& idx, Tensor& dst, bool is_image,
                      std::vector<std::string>& labels, std::vector<std::string>& uids,
                      std::vector<int64_t>& inst_out) {
        for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(batch_limit)) {
            const size_t end = std::min(idx.size(), start + static_cast<size_t>(batch_limit));
            std::vector<Image> images;
            std::vector<std::vector<int64_t>> tokens;
            std::vector<std::string> batch_uids;
            for (size_t i = start; i < end; ++i) {
                const Instance& inst = corpus.instance(idx[i]);
                batch_uids.push_back(inst.uid);
                labels.push_back(inst.identity.label);
                uids.push_back(inst.uid);
                inst_out.push_back(idx[i]);
                if (!encoders.toy()) continue;
                if (is_image)
                    images.push_back(corpus.load_image(inst));  // eval mode: no augmentation
                else
                    tokens.push_back(tokenize(inst.caption, corpus.vocab()).ids);
            }
            Tape tape;
            Var global = is_image ? encoders.encode_images(tape, images, batch_uids).global
                                  : encoders.encode_texts(tape, tokens, batch_uids).global;
            for (size_t i = start; i < end; ++i)
                std::copy(global->value.row(static_cast<int64_t>(i - start)),
                          global->value.row(static_cast<int64_t>(i - start)) + encoders.dim(),
                          dst.row(static_cast<int64_t>(i)));
        }
    };
    encode(img_idx, out.gallery, true, out.gallery_labels, out.gallery_uids, out.gallery_instance);
    encode(txt_idx, out.queries, false, out.query_labels, out.query_uids, out.query_instance);
    return out;
}

RankedRetrieval rank(const Tensor& queries, const Tensor& gallery,
                     const std::vector<std::string>& query_labels,
                     const std::vector<std::string>& gallery_labels) {
    if (queries.cols() != gallery.cols()) throw DataError("rank: dimension mismatch");
    const int64_t q = queries.rows(), g = gallery.rows();

    auto normalized = [](const Tensor& x) {
        Tensor n(x.rows(), x.cols());
        for (int64_t i = 0; i < x.rows(); ++i) {
            double s = 0;
            for (int64_t j = 0; j < x.cols(); ++j) s += x.at(i, j) * x.at(i, j);
            double inv = 1.0 / std::sqrt(s + 1e-24);
            for (int64_t j = 0; j < x.cols(); ++j) n.at(i, j) = x.at(i, j) * inv;
        }
        return n;
    };
    Tensor qn = normalized(queries), gn = normalized(gallery);
    Tensor sim(q, g);
    kernels::matmul(qn.data(), gn.data(), sim.data(), q, queries.cols(), g, false, true);

    RankedRetrieval out;
    out.order.resize(static_cast<size_t>(q));
    out.relevant.resize(static_cast<size_t>(q));
#pragma omp parallel for schedule(static)
    for (int64_t i = 0; i < q; ++i) {
        std::vector<int64_t> idx(static_cast<size_t>(g));
        for (int64_t j = 0; j < g; ++j) idx[static_cast<size_t>(j)] = j;
        const double* row = sim.row(i);
        std::sort(idx.begin(), idx.end(), [row](int64_t a, int64_t b) {
            if (row[a] != row[b]) return row[a] > row[b];
            return a < b;
        });
        std::vector<char> rel(static_cast<size_t>(g));
        for (int64_t r = 0; r < g; ++r)
            rel[static_cast<size_t>(r)] =
                gallery_labels[static_cast<size_t>(idx[static_cast<size_t>(r)])] ==
                query_labels[static_cast<size_t>(i)];
        out.order[static_cast<size_t>(i)] = std::move(idx);
        out.relevant[static_cast<size_t>(i)] = std::move(rel);
    }
    return out;
}

double recall_at_k(const RankedRetrieval& ranked, int64_t k) {
    if (k < 1) throw DataError("recall_at_k: k must be >= 1");
    if (k > ranked.gallery_size())
        throw DataError("recall_at_k: k=" + std::to_string(k) + " exceeds gallery size " +
                        std::to_string(ranked.gallery_size()));
    int64_t hits = 0;
    for (const auto& rel : ranked.relevant) {
        for (int64_t r = 0; r < k; ++r)
            if (rel[static_cast<size_t>(r)]) {
                ++hits;
                break;
            }
    }
    return static_cast<double>(hits) / static_cast<double>(ranked.query_count());
}

MapResult mean_average_precision(const RankedRetrieval& ranked) {
    MapResult res;
    double total = 0;
    for (const auto& rel : ranked.relevant) {
        int64_t seen = 0;
        double ap = 0;
        for (size_t r = 0; r < rel.size(); ++r) {
            if (!rel[r]) continue;
            ++seen;
            ap += static_cast<double>(seen) / static_cast<double>(r + 1);
        }
        if (seen == 0) {
            ++res.excluded;
            continue;
        }
        total += ap / static_cast<double>(seen);
        ++res.evaluated;
    }
    if (res.excluded > 0)
        std::fprintf(stderr, "warning: %lld queries without relevant gallery items excluded from mAP\n",
                     static_cast<long long>(res.excluded));
    res.value = res.evaluated > 0 ? total / static_cast<double>(res.evaluated) : 0.0;
    return res;
}

std::string Metrics::to_json() const {
    std::ostringstream os;
    os.precision(17);
    os << "{\"R1\": " << r1 << ", \"R5\": " << r5 << ", \"R10\": " << r10 << ", \"mAP\": " << map
       << ", \"counts\": {\"queries\": " << queries << ", \"gallery\": " << gallery
       << ", \"excluded_queries\": " << excluded_queries << "}}";
    return os.str();
}

Metrics compute_metrics(const RankedRetrieval& ranked) {
    Metrics m;
    m.queries = ranked.query_count();
    m.gallery = ranked.gallery_size();
    m.r1 = recall_at_k(ranked, std::min<int64_t>(1, m.gallery));
    m.r5 = recall_at_k(ranked, std::min<int64_t>(5, m.gallery));
    m.r10 = recall_at_k(ranked, std::min<int64_t>(10, m.gallery));
    MapResult ap = mean_average_precision(ranked);
    m.map = ap.value;
    m.excluded_queries = ap.excluded;
    return m;
}

// ---------------------------------------------------------------------------
// HTML report

namespace {

std::string base64(const std::string& bytes) {
    static const char* tbl = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    size_t i = 0;
    while (i + 2 < bytes.size()) {
        uint32_t v = (static_cast<uint8_t>(bytes[i]) << 16) |
                     (static_cast<uint8_t>(bytes[i + 1]) << 8) | static_cast<uint8_t>(bytes[i + 2]);
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(tbl[(v >> 6) & 63]);
        out.push_back(tbl[v & 63]);
        i += 3;
    }
    if (i + 1 == bytes.size()) {
        uint32_t v = static_cast<uint8_t>(bytes[i]) << 16;
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out += "==";
    } else if (i + 2 == bytes.size()) {
        uint32_t v = (static_cast<uint8_t>(bytes[i]) << 16) |
                     (static_cast<uint8_t>(bytes[i + 1]) << 8);
        out.push_back(tbl[(v >> 18) & 63]);
        out.push_back(tbl[(v >> 12) & 63]);
        out.push_back(tbl[(v >> 6) & 63]);
        out += "=";
    }
    return out;
}

std::string escape_html(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else if (c == '&') out += "&amp;";
        else out.push_back(c);
    }
    return out;
}

std::string tile_html(const Corpus& corpus, const EmbeddedSplit& split, int64_t gallery_pos,
                      bool relevant) {
    std::string img_b64;
    try {
        Image img = corpus.load_image(
            corpus.instance(split.gallery_instance[static_cast<size_t>(gallery_pos)]));
        img_b64 = base64(bmp_bytes(downscale(img, 96, 32)));
    } catch (const DataError&) {
        Image placeholder(96, 32, 3, 0.5);  // missing file: gray tile, keep going
        img_b64 = base64(bmp_bytes(placeholder));
    }
    std::string border = relevant ? "#2e8b57" : "#c0392b";
    return "<span class=\"tile\" style=\"border-color:" + border +
           "\"><img src=\"data:image/bmp;base64," + img_b64 + "\" title=\"" +
           escape_html(split.gallery_uids[static_cast<size_t>(gallery_pos)]) + "\"></span>";
}

void render_row(std::ostream& os, const Corpus& corpus, const EmbeddedSplit& split,
                const RankedRetrieval& ranked, int64_t qi, int64_t top_n, const char* tag) {
    os << "<div class=\"row\"><span class=\"tag\">" << tag << "</span>";
    for (int64_t r = 0; r < std::min<int64_t>(top_n, ranked.gallery_size()); ++r) {
        const int64_t g = ranked.order[static_cast<size_t>(qi)][static_cast<size_t>(r)];
        const bool rel = ranked.relevant[static_cast<size_t>(qi)][static_cast<size_t>(r)] != 0;
        os << tile_html(corpus, split, g, rel);
    }
    os << "</div>\n";
}

}  // namespace

void render_report(const std::string& path, const Corpus& corpus, const EmbeddedSplit& split,
                   const RankedRetrieval& ranked, int64_t top_n, const RankedRetrieval* baseline,
                   int64_t max_queries) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write report: " + path);
    os << "<!doctype html><html><head><meta charset=\"utf-8\"><title>retrieval report</title>\n"
       << "<style>body{font-family:sans-serif;background:#fafafa;margin:24px}"
       << ".q{margin:18px 0;padding:12px;background:#fff;border:1px solid #ddd;border-radius:6px}"
       << ".cap{font-weight:600;margin-bottom:8px}"
       << ".row{margin:4px 0;white-space:nowrap}"
       << ".tag{display:inline-block;width:72px;color:#666;font-size:12px}"
       << ".tile{display:inline-block;border:3px solid;margin-right:4px;line-height:0}"
       << ".tile img{width:32px;height:96px}</style></head><body>\n"
       << "<h1>Text-to-image retrieval: top-" << top_n << "</h1>\n";
    const int64_t q = std::min<int64_t>(max_queries, ranked.query_count());
    for (int64_t qi = 0; qi < q; ++qi) {
        const Instance& inst = corpus.instance(split.query_instance[static_cast<size_t>(qi)]);
        os << "<div class=\"q\"><div class=\"cap\">" << escape_html(inst.caption)
           << " <small>(" << escape_html(inst.identity.label) << ")</small></div>\n";
        if (baseline) render_row(os, corpus, split, *baseline, qi, top_n, "baseline");
        render_row(os, corpus, split, ranked, qi, top_n, baseline ? "propot" : "model");
        os << "</div>\n";
    }
    os << "</body></html>\n";
}

}  // namespace propot
