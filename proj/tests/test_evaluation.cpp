#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "propot/errors.hpp"
#include "propot/evaluation.hpp"

using namespace propot;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> labels_of(const std::vector<int64_t>& ids) {
    std::vector<std::string> out;
    for (int64_t i : ids) out.push_back("p" + std::to_string(i));
    return out;
}

// naive oracle: full pairwise cosine + stable sort per query
RankedRetrieval oracle_rank(const Tensor& q, const Tensor& g,
                            const std::vector<std::string>& ql,
                            const std::vector<std::string>& gl) {
    RankedRetrieval out;
    for (int64_t i = 0; i < q.rows(); ++i) {
        std::vector<std::pair<double, int64_t>> scored;
        for (int64_t j = 0; j < g.rows(); ++j) {
            double dot = 0, nq = 0, ng = 0;
            for (int64_t k = 0; k < q.cols(); ++k) {
                dot += q.at(i, k) * g.at(j, k);
                nq += q.at(i, k) * q.at(i, k);
                ng += g.at(j, k) * g.at(j, k);
            }
            scored.emplace_back(dot / std::sqrt(nq * ng), j);
        }
        std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            return a.first > b.first;
        });
        std::vector<int64_t> order;
        std::vector<char> rel;
        for (auto& [s, j] : scored) {
            order.push_back(j);
            rel.push_back(gl[static_cast<size_t>(j)] == ql[static_cast<size_t>(i)]);
        }
        out.order.push_back(std::move(order));
        out.relevant.push_back(std::move(rel));
    }
    return out;
}

}  // namespace

TEST_CASE("rank: exact-match query wins; equal similarities fall back to index order") {
    Tensor g(3, 3);
    g.at(0, 0) = 1;
    g.at(1, 1) = 1;
    g.at(2, 2) = 1;
    Tensor q(1, 3);
    q.at(0, 1) = 1;  // equals gallery row 1, orthogonal to others
    auto r = rank(q, g, labels_of({1}), labels_of({0, 1, 2}));
    CHECK(r.order[0][0] == 1);
    CHECK(r.relevant[0][0] == 1);
    // the two orthogonal rows tie at similarity 0 -> ascending index
    CHECK(r.order[0][1] == 0);
    CHECK(r.order[0][2] == 2);

    Tensor q2(1, 3, 0.5);  // equal similarity to every one-hot row
    auto r2 = rank(q2, g, labels_of({0}), labels_of({0, 1, 2}));
    CHECK(r2.order[0] == std::vector<int64_t>({0, 1, 2}));
}

TEST_CASE("rank: matches the naive sort oracle on 50 x 100 random features") {
    Rng rng(101);
    Tensor q = rng.normal_tensor(50, 16, 1.0), g = rng.normal_tensor(100, 16, 1.0);
    std::vector<int64_t> qid, gid;
    for (int i = 0; i < 50; ++i) qid.push_back(rng.uniform_int(20));
    for (int i = 0; i < 100; ++i) gid.push_back(rng.uniform_int(20));
    auto got = rank(q, g, labels_of(qid), labels_of(gid));
    auto want = oracle_rank(q, g, labels_of(qid), labels_of(gid));
    for (size_t i = 0; i < got.order.size(); ++i) {
        CHECK(got.order[i] == want.order[i]);
        CHECK(got.relevant[i] == want.relevant[i]);
    }
}

TEST_CASE("rank: invariant to positive per-vector rescaling") {
    Rng rng(103);
    Tensor q = rng.normal_tensor(10, 8, 1.0), g = rng.normal_tensor(20, 8, 1.0);
    std::vector<int64_t> qid(10, 0), gid(20, 0);
    auto base = rank(q, g, labels_of(qid), labels_of(gid));
    Tensor q2 = q, g2 = g;
    for (int64_t i = 0; i < 10; ++i)
        for (int64_t j = 0; j < 8; ++j) q2.at(i, j) *= 0.5 + static_cast<double>(i);
    for (int64_t i = 0; i < 20; ++i)
        for (int64_t j = 0; j < 8; ++j) g2.at(i, j) *= 10.0 / (1.0 + static_cast<double>(i));
    auto scaled = rank(q2, g2, labels_of(qid), labels_of(gid));
    for (size_t i = 0; i < base.order.size(); ++i) CHECK(base.order[i] == scaled.order[i]);
}

TEST_CASE("recall_at_k: definition, bounds checking and monotonicity") {
    RankedRetrieval r;
    r.order = {{0, 1, 2}, {1, 0, 2}};
    r.relevant = {{1, 0, 0}, {0, 0, 1}};
    CHECK(recall_at_k(r, 1) == 0.5);
    CHECK(recall_at_k(r, 2) == 0.5);
    CHECK(recall_at_k(r, 3) == 1.0);
    CHECK_THROWS_AS(recall_at_k(r, 4), DataError);
    CHECK_THROWS_AS(recall_at_k(r, 0), DataError);

    Rng rng(107);
    Tensor q = rng.normal_tensor(20, 8, 1.0), g = rng.normal_tensor(30, 8, 1.0);
    std::vector<int64_t> qid, gid;
    for (int i = 0; i < 20; ++i) qid.push_back(rng.uniform_int(5));
    for (int i = 0; i < 30; ++i) gid.push_back(rng.uniform_int(5));
    auto rr = rank(q, g, labels_of(qid), labels_of(gid));
    double prev = 0;
    for (int64_t k = 1; k <= 30; ++k) {
        double cur = recall_at_k(rr, k);
        CHECK(cur >= prev);
        prev = cur;
    }
    CHECK(prev == 1.0);  // every label occurs in the gallery of 30 over 5 ids
}

TEST_CASE("mAP: analytic cases including the 1,3,5 rank example") {
    RankedRetrieval r;
    r.order = {{0}};
    r.relevant = {{1}};
    CHECK(mean_average_precision(r).value == 1.0);

    RankedRetrieval r2;
    r2.order = {{0, 1}};
    r2.relevant = {{0, 1}};
    CHECK(mean_average_precision(r2).value == 0.5);

    // relevant at ranks 1, 3, 5: AP = (1/1 + 2/3 + 3/5) / 3
    RankedRetrieval r3;
    r3.order = {{0, 1, 2, 3, 4}};
    r3.relevant = {{1, 0, 1, 0, 1}};
    CHECK(mean_average_precision(r3).value == doctest::Approx(0.7556).epsilon(1e-4));

    // zero-relevant query excluded with count
    RankedRetrieval r4;
    r4.order = {{0, 1}, {0, 1}};
    r4.relevant = {{1, 0}, {0, 0}};
    auto res = mean_average_precision(r4);
    CHECK(res.evaluated == 1);
    CHECK(res.excluded == 1);
    CHECK(res.value == 1.0);
}

TEST_CASE("mAP and recall match brute force on 100 random instances") {
    Rng rng(109);
    for (int trial = 0; trial < 100; ++trial) {
        const int64_t nq = 2 + rng.uniform_int(6), ng = 3 + rng.uniform_int(10);
        Tensor q = rng.normal_tensor(nq, 4, 1.0), g = rng.normal_tensor(ng, 4, 1.0);
        std::vector<int64_t> qid, gid;
        for (int64_t i = 0; i < nq; ++i) qid.push_back(rng.uniform_int(3));
        for (int64_t i = 0; i < ng; ++i) gid.push_back(rng.uniform_int(3));
        auto r = rank(q, g, labels_of(qid), labels_of(gid));

        // brute-force oracle over the ranking structure
        const int64_t k = 1 + rng.uniform_int(ng);
        int64_t hits = 0;
        double ap_total = 0;
        int64_t ap_n = 0;
        for (int64_t i = 0; i < nq; ++i) {
            bool hit = false;
            for (int64_t rr = 0; rr < k; ++rr)
                hit = hit || r.relevant[static_cast<size_t>(i)][static_cast<size_t>(rr)];
            hits += hit;
            int64_t seen = 0;
            double ap = 0;
            for (int64_t rr = 0; rr < ng; ++rr)
                if (r.relevant[static_cast<size_t>(i)][static_cast<size_t>(rr)]) {
                    ++seen;
                    ap += static_cast<double>(seen) / static_cast<double>(rr + 1);
                }
            if (seen > 0) {
                ap_total += ap / static_cast<double>(seen);
                ++ap_n;
            }
        }
        CHECK(recall_at_k(r, k) == static_cast<double>(hits) / static_cast<double>(nq));
        auto res = mean_average_precision(r);
        if (ap_n > 0) CHECK(res.value == doctest::Approx(ap_total / static_cast<double>(ap_n)).epsilon(1e-12));
    }
}

TEST_CASE("embed_split: shapes, determinism, eval-mode purity") {
    SyntheticSpec spec;
    spec.n_identities = 5;
    spec.images_per_identity = 2;
    spec.captions_per_image = 2;
    spec.seed = 17;
    Corpus corpus = Corpus::generate_synthetic(spec);

    EncoderConfig ecfg;
    ecfg.d = 32;
    ecfg.vocab_size = corpus.vocab().size();
    Encoders enc = Encoders::make_toy(ecfg, Rng(55));

    auto a = embed_split(corpus, Split::Train, enc);
    CHECK(a.gallery.rows() == 10);
    CHECK(a.queries.rows() == 20);
    CHECK(a.gallery.cols() == 32);
    auto b = embed_split(corpus, Split::Train, enc);
    CHECK(a.gallery.max_abs_diff(b.gallery) == 0.0);
    CHECK(a.queries.max_abs_diff(b.queries) == 0.0);

    CHECK_THROWS_AS(embed_split(corpus, Split::Test, enc), DataError);
}

TEST_CASE("render_report writes panels and survives missing image files") {
    SyntheticSpec spec;
    spec.n_identities = 3;
    spec.images_per_identity = 2;
    spec.captions_per_image = 1;
    spec.seed = 19;
    Corpus mem = Corpus::generate_synthetic(spec);

    // save + reload so images come from disk, then delete one file
    fs::path dir = fs::temp_directory_path() / "propot_report_corpus";
    fs::remove_all(dir);
    mem.save(dir.string());
    Corpus corpus = Corpus::load(dir.string());
    fs::remove(dir / "images" / "id_0001_0.bmp");

    EncoderConfig ecfg;
    ecfg.d = 16;
    ecfg.vocab_size = corpus.vocab().size();
    Encoders enc = Encoders::make_toy(ecfg, Rng(77));
    EmbeddedSplit split;
    // hand-build the split to avoid touching the deleted file during encoding
    Rng rng(7);
    split.gallery = rng.normal_tensor(6, 16, 1.0);
    split.queries = rng.normal_tensor(6, 16, 1.0);
    for (int64_t idx : corpus.image_indices(Split::Train)) {
        split.gallery_labels.push_back(corpus.instance(idx).identity.label);
        split.gallery_uids.push_back(corpus.instance(idx).uid);
        split.gallery_instance.push_back(idx);
    }
    for (int64_t idx : corpus.text_indices(Split::Train)) {
        split.query_labels.push_back(corpus.instance(idx).identity.label);
        split.query_uids.push_back(corpus.instance(idx).uid);
        split.query_instance.push_back(idx);
    }
    auto ranked = rank(split.queries, split.gallery, split.query_labels, split.gallery_labels);

    fs::path report = fs::temp_directory_path() / "propot_report.html";
    render_report(report.string(), corpus, split, ranked, 5, &ranked);
    std::ifstream f(report);
    std::string html((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    CHECK(html.find("data:image/bmp;base64,") != std::string::npos);
    CHECK(html.find("baseline") != std::string::npos);
    CHECK(html.find("propot") != std::string::npos);
    // identical rankings in comparison mode produce identical rows
    size_t first = html.find("<div class=\"row\">");
    REQUIRE(first != std::string::npos);
}

TEST_CASE("metrics JSON carries R1/R5/R10/mAP and counts") {
    RankedRetrieval r;
    r.order = {{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10}};
    r.relevant = {{0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0}};
    Metrics m = compute_metrics(r);
    CHECK(m.r1 == 0.0);
    CHECK(m.r5 == 1.0);
    CHECK(m.r10 == 1.0);
    std::string js = m.to_json();
    CHECK(js.find("\"R1\"") != std::string::npos);
    CHECK(js.find("\"mAP\"") != std::string::npos);
    CHECK(js.find("\"queries\": 1") != std::string::npos);
}
