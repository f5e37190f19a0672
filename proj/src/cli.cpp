#include "propot/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "propot/errors.hpp"
#include "propot/evaluation.hpp"
#include "propot/training.hpp"

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace propot {

namespace {

fs::path resolve_out(const std::string& path) {
    fs::path p = path;
    if (p.is_absolute()) return p;
    const char* root = std::getenv("PROPOT_OUT_ROOT");
    return root && *root ? fs::path(root) / p : p;
}

// Deletes everything this invocation created unless commit() is reached.
class OutputGuard {
public:
    void track(const fs::path& p) { fresh_.push_back(p); }
    void track_dir(const fs::path& dir) {
        if (!fs::exists(dir)) {
            fs::create_directories(dir);
            fresh_.push_back(dir);
        }
    }
    void commit() { fresh_.clear(); }
    ~OutputGuard() {
        for (auto it = fresh_.rbegin(); it != fresh_.rend(); ++it) {
            std::error_code ec;
            fs::remove_all(*it, ec);
        }
    }

private:
    std::vector<fs::path> fresh_;
};

// One writer per output directory.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) : path_(dir / ".propot.lock") {
        fs::create_directories(dir);
        if (fs::exists(path_))
            throw DataError("output directory is locked by another invocation: " + path_.string() +
                            " (remove the lock file if that run is gone)");
        std::ofstream f(path_);
        f << "locked\n";
    }
    ~DirLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }

private:
    fs::path path_;
};

TrainConfig assemble_config(const std::string& config_file, const std::string& profile,
                            const std::vector<std::string>& overrides,
                            const std::vector<std::string>& flag_overrides) {
    TrainConfig cfg;
    if (!config_file.empty()) cfg = TrainConfig::from_json_file(config_file);
    if (!profile.empty()) cfg.apply_profile(profile);
    for (const auto& list : {overrides, flag_overrides})
        for (const auto& kv : list) {
            auto eq = kv.find('=');
            if (eq == std::string::npos)
                throw UsageError("override '" + kv + "' must have the form key=value");
            cfg.set_key(kv.substr(0, eq), kv.substr(eq + 1));
        }
    cfg.validate();
    return cfg;
}

Model load_model(const std::string& checkpoint, const Corpus& corpus) {
    TrainConfig cfg = Model::peek_config(checkpoint);
    Model model(cfg, corpus);
    model.load_checkpoint(checkpoint);
    return model;
}

Metrics evaluate_split(Model& model, const Corpus& corpus, Split split) {
    EmbeddedSplit emb = embed_split(corpus, split, model.encoders());
    RankedRetrieval ranked = rank(emb.queries, emb.gallery, emb.query_labels, emb.gallery_labels);
    return compute_metrics(ranked);
}

int run_impl(int argc, const char* const* argv) {
    CLI::App app{"Propot: prototypical prompting for text-to-image person retrieval"};
    app.require_subcommand(1);

    // ---- synth ----
    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    SyntheticSpec spec;
    std::string synth_out = "corpus";
    std::string attr_sizes = "8,8,6";
    synth->add_option("--ids", spec.n_identities, "identities")->capture_default_str();
    synth->add_option("--imgs", spec.images_per_identity, "images per identity")->capture_default_str();
    synth->add_option("--caps", spec.captions_per_image, "captions per image")->capture_default_str();
    synth->add_option("--noise", spec.noise, "pixel noise level")->capture_default_str();
    synth->add_option("--seed", spec.seed, "corpus seed")->capture_default_str();
    synth->add_option("--attr-sizes", attr_sizes, "attribute vocabulary sizes")->capture_default_str();
    synth->add_option("--out", synth_out, "output corpus directory")->capture_default_str();

    // ---- ingest ----
    auto* ingest = app.add_subcommand("ingest", "ingest an annotation file into a corpus cache");
    std::string ann_path, ingest_out = "corpus";
    ingest->add_option("--annotations", ann_path, "annotation JSON file")->required();
    ingest->add_option("--out", ingest_out, "output corpus directory")->capture_default_str();

    // ---- shared train-ish options ----
    // every config key becomes a flag whose help shows its default;
    // values given on the command line are applied as typed overrides
    struct KeyFlags {
        std::vector<std::string> values;  // parallel to keys
        std::vector<CLI::Option*> opts;
        std::vector<std::string> keys;
        std::vector<std::string> as_overrides() const {
            std::vector<std::string> out;
            for (size_t i = 0; i < keys.size(); ++i)
                if (opts[i]->count() > 0) out.push_back(keys[i] + "=" + values[i]);
            return out;
        }
    };
    auto key_flags_a = std::make_shared<KeyFlags>();
    auto key_flags_b = std::make_shared<KeyFlags>();
    auto add_config_opts = [](CLI::App* cmd, std::string& data, std::string& config_file,
                              std::string& profile, std::vector<std::string>& sets,
                              const std::shared_ptr<KeyFlags>& kf) {
        cmd->add_option("--data", data, "corpus directory")->required();
        cmd->add_option("--config", config_file, "config JSON file");
        cmd->add_option("--profile", profile, "preset: full or desk");
        cmd->add_option("--set", sets, "config override key=value (repeatable)");
        auto keys = TrainConfig::keys_with_defaults();
        kf->values.resize(keys.size());
        for (size_t i = 0; i < keys.size(); ++i) {
            kf->keys.push_back(keys[i].first);
            auto* opt = cmd->add_option("--" + keys[i].first, kf->values[i],
                                        "config key (default: " + keys[i].second + ")");
            opt->default_str(keys[i].second);
            kf->opts.push_back(opt);
        }
    };

    auto* tr = app.add_subcommand("train", "train a model (full-scale defaults: 60 epochs, batch 64, "
                                           "tau 0.02, lambda1 0.2, lambda2 1.0, K 4, N_a 1, N_e 3)");
    std::string tr_data, tr_config, tr_profile, tr_out = "run", tr_resume;
    std::vector<std::string> tr_sets;
    add_config_opts(tr, tr_data, tr_config, tr_profile, tr_sets, key_flags_a);
    tr->add_option("--out", tr_out, "run output directory")->capture_default_str();
    tr->add_option("--resume", tr_resume, "checkpoint to resume from");

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "evaluate retrieval metrics for a checkpoint");
    std::string ev_data, ev_ckpt, ev_split = "test", ev_out;
    ev->add_option("--data", ev_data, "corpus directory")->required();
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--split", ev_split, "split: train|val|test")->capture_default_str();
    ev->add_option("--out", ev_out, "metrics JSON output file");

    // ---- retrieve ----
    auto* re = app.add_subcommand("retrieve", "rank gallery images for a free-text query");
    std::string re_data, re_ckpt, re_text, re_split = "test";
    int64_t re_k = 10;
    re->add_option("--data", re_data, "corpus directory")->required();
    re->add_option("--checkpoint", re_ckpt, "checkpoint file")->required();
    re->add_option("--text", re_text, "query text")->required();
    re->add_option("--k", re_k, "results to return")->capture_default_str();
    re->add_option("--split", re_split, "gallery split")->capture_default_str();

    // ---- export-embeddings ----
    auto* ex = app.add_subcommand("export-embeddings", "write instance embeddings to a JSON store");
    std::string ex_data, ex_ckpt, ex_split = "test", ex_out = "embeddings.json";
    ex->add_option("--data", ex_data, "corpus directory")->required();
    ex->add_option("--checkpoint", ex_ckpt, "checkpoint file")->required();
    ex->add_option("--split", ex_split, "split to embed")->capture_default_str();
    ex->add_option("--out", ex_out, "output file")->capture_default_str();

    // ---- ablate-aggregation ----
    auto* ab = app.add_subcommand("ablate-aggregation",
                                  "train and evaluate every aggregation scheme (Table layout: "
                                  "Sum, Average, MLP, Parameter, APA)");
    std::string ab_data, ab_config, ab_profile = "desk", ab_out = "ablation", ab_split = "train";
    std::vector<std::string> ab_sets;
    add_config_opts(ab, ab_data, ab_config, ab_profile, ab_sets, key_flags_b);
    ab->add_option("--out", ab_out, "output directory")->capture_default_str();
    ab->add_option("--eval-split", ab_split, "split for the metric rows")->capture_default_str();

    // ---- report ----
    auto* rp = app.add_subcommand("report", "render an HTML panel of top-n retrievals");
    std::string rp_data, rp_ckpt, rp_baseline, rp_split = "test", rp_out = "report.html";
    int64_t rp_topn = 10, rp_max_queries = 8;
    rp->add_option("--data", rp_data, "corpus directory")->required();
    rp->add_option("--checkpoint", rp_ckpt, "checkpoint file")->required();
    rp->add_option("--baseline", rp_baseline, "second checkpoint for side-by-side rows");
    rp->add_option("--split", rp_split, "split to render")->capture_default_str();
    rp->add_option("--top-n", rp_topn, "gallery tiles per query")->capture_default_str();
    rp->add_option("--max-queries", rp_max_queries, "panels to render")->capture_default_str();
    rp->add_option("--out", rp_out, "output HTML file")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (synth->parsed()) {
        spec.attr_vocab_sizes.clear();
        std::stringstream ss(attr_sizes);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            try {
                size_t used = 0;
                spec.attr_vocab_sizes.push_back(std::stoll(tok, &used));
                if (used != tok.size()) throw std::invalid_argument(tok);
            } catch (...) {
                throw UsageError("--attr-sizes must be a comma-separated list of integers");
            }
        }
        fs::path out = resolve_out(synth_out);
        OutputGuard guard;
        guard.track_dir(out);
        DirLock lock(out);
        Corpus corpus = Corpus::generate_synthetic(spec);
        corpus.save(out.string());
        auto c = corpus.counts(Split::Train);
        std::cout << "{\"corpus\": \"" << out.string() << "\", \"identities\": " << c.identities
                  << ", \"images\": " << c.images << ", \"texts\": " << c.texts << "}\n";
        guard.commit();
        return 0;
    }

    if (ingest->parsed()) {
        fs::path out = resolve_out(ingest_out);
        OutputGuard guard;
        guard.track_dir(out);
        DirLock lock(out);
        Corpus corpus = Corpus::ingest_annotations(ann_path);
        corpus.save(out.string());
        ordered_json doc;
        for (Split s : {Split::Train, Split::Val, Split::Test}) {
            auto c = corpus.counts(s);
            doc[to_string(s)] = {{"identities", c.identities}, {"images", c.images}, {"texts", c.texts}};
        }
        doc["corpus"] = out.string();
        std::cout << doc.dump() << "\n";
        guard.commit();
        return 0;
    }

    if (tr->parsed()) {
        TrainConfig cfg = assemble_config(tr_config, tr_profile, tr_sets, key_flags_a->as_overrides());
        Corpus corpus = Corpus::load(tr_data);
        fs::path out = resolve_out(tr_out);
        OutputGuard guard;
        guard.track_dir(out);
        DirLock lock(out);
        {
            std::ofstream f(out / "config.json");
            f << cfg.to_json() << "\n";
        }
        Model model(cfg, corpus);
        TrainResult res = train(model, corpus, out.string(), tr_resume);
        if (model.has_bank())
            model.bank().save((out / "prototype_bank.bin").string(), cfg.context_len);
        std::cout << "{\"run\": \"" << out.string() << "\", \"epochs\": " << cfg.epochs
                  << ", \"steps\": " << res.global_steps << ", \"final_total_loss\": "
                  << (res.log.empty() ? 0.0 : res.log.back().mean_loss.total) << "}\n";
        guard.commit();
        return 0;
    }

    if (ev->parsed()) {
        Corpus corpus = Corpus::load(ev_data);
        Model model = load_model(ev_ckpt, corpus);
        Metrics m = evaluate_split(model, corpus, split_from_string(ev_split));
        std::cout << m.to_json() << "\n";
        if (!ev_out.empty()) {
            OutputGuard guard;
            fs::path out = resolve_out(ev_out);
            std::ofstream f(out);
            if (!f) throw DataError("cannot write metrics: " + out.string());
            guard.track(out);
            f << m.to_json() << "\n";
            guard.commit();
        }
        return 0;
    }

    if (re->parsed()) {
        Corpus corpus = Corpus::load(re_data);
        Model model = load_model(re_ckpt, corpus);
        EmbeddedSplit emb = embed_split(corpus, split_from_string(re_split), model.encoders());
        if (re_k < 1 || re_k > emb.gallery.rows())
            throw UsageError("retrieve: k must be in [1, gallery size]");
        TokenSequence seq = tokenize(re_text, corpus.vocab());
        Tape tape;
        Var q = model.encoders().encode_texts(tape, {seq.ids}, {"query"}).global;
        std::vector<std::string> qlabel = {"?"};
        RankedRetrieval ranked = rank(q->value, emb.gallery, qlabel, emb.gallery_labels);
        ordered_json doc = ordered_json::array();
        Tensor qn = q->value;
        for (int64_t r = 0; r < re_k; ++r) {
            const int64_t g = ranked.order[0][static_cast<size_t>(r)];
            double dot = 0, nq = 0, ng = 0;
            for (int64_t j = 0; j < emb.gallery.cols(); ++j) {
                dot += qn.at(0, j) * emb.gallery.at(g, j);
                nq += qn.at(0, j) * qn.at(0, j);
                ng += emb.gallery.at(g, j) * emb.gallery.at(g, j);
            }
            doc.push_back({{"rank", r + 1},
                           {"uid", emb.gallery_uids[static_cast<size_t>(g)]},
                           {"identity", emb.gallery_labels[static_cast<size_t>(g)]},
                           {"cosine", dot / std::sqrt(nq * ng)}});
        }
        std::cout << doc.dump(2) << "\n";
        return 0;
    }

    if (ex->parsed()) {
        Corpus corpus = Corpus::load(ex_data);
        Model model = load_model(ex_ckpt, corpus);
        EmbeddedSplit emb = embed_split(corpus, split_from_string(ex_split), model.encoders());
        EmbeddingStore store;
        store.d = emb.gallery.cols();
        for (int64_t i = 0; i < emb.gallery.rows(); ++i)
            store.features[emb.gallery_uids[static_cast<size_t>(i)]] =
                std::vector<double>(emb.gallery.row(i), emb.gallery.row(i) + store.d);
        for (int64_t i = 0; i < emb.queries.rows(); ++i)
            store.features[emb.query_uids[static_cast<size_t>(i)]] =
                std::vector<double>(emb.queries.row(i), emb.queries.row(i) + store.d);
        OutputGuard guard;
        fs::path out = resolve_out(ex_out);
        store.save(out.string());
        guard.track(out);
        std::cout << "{\"embeddings\": \"" << out.string() << "\", \"instances\": "
                  << store.features.size() << "}\n";
        guard.commit();
        return 0;
    }

    if (ab->parsed()) {
        TrainConfig base = assemble_config(ab_config, ab_profile, ab_sets, key_flags_b->as_overrides());
        Corpus corpus = Corpus::load(ab_data);
        fs::path out = resolve_out(ab_out);
        OutputGuard guard;
        guard.track_dir(out);
        DirLock lock(out);
        const std::pair<const char*, const char*> schemes[5] = {{"Sum", "sum"},
                                                                {"Average", "average"},
                                                                {"MLP", "mlp"},
                                                                {"Parameter", "parameter"},
                                                                {"APA", "apa"}};
        ordered_json rows = ordered_json::array();
        std::printf("%-10s %8s %8s %8s %8s\n", "Method", "R@1", "R@5", "R@10", "mAP");
        for (const auto& [label, key] : schemes) {
            TrainConfig cfg = base;
            cfg.aggregation = key;
            Model model(cfg, corpus);
            train(model, corpus, (out / key).string());
            Metrics m = evaluate_split(model, corpus, split_from_string(ab_split));
            std::printf("%-10s %8.4f %8.4f %8.4f %8.4f\n", label, m.r1, m.r5, m.r10, m.map);
            rows.push_back({{"method", label},
                            {"R1", m.r1},
                            {"R5", m.r5},
                            {"R10", m.r10},
                            {"mAP", m.map}});
        }
        std::ofstream f(out / "aggregation_ablation.json");
        f << rows.dump(2) << "\n";
        guard.commit();
        return 0;
    }

    if (rp->parsed()) {
        Corpus corpus = Corpus::load(rp_data);
        Model model = load_model(rp_ckpt, corpus);
        Split split = split_from_string(rp_split);
        EmbeddedSplit emb = embed_split(corpus, split, model.encoders());
        RankedRetrieval ranked = rank(emb.queries, emb.gallery, emb.query_labels, emb.gallery_labels);
        OutputGuard guard;
        fs::path out = resolve_out(rp_out);
        if (!rp_baseline.empty()) {
            Model base = load_model(rp_baseline, corpus);
            EmbeddedSplit bemb = embed_split(corpus, split, base.encoders());
            RankedRetrieval branked =
                rank(bemb.queries, bemb.gallery, bemb.query_labels, bemb.gallery_labels);
            render_report(out.string(), corpus, emb, ranked, rp_topn, &branked, rp_max_queries);
        } else {
            render_report(out.string(), corpus, emb, ranked, rp_topn, nullptr, rp_max_queries);
        }
        guard.track(out);
        std::cout << "{\"report\": \"" << out.string() << "\"}\n";
        guard.commit();
        return 0;
    }

    return 2;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    try {
        return run_impl(argc, argv);
    } catch (const UsageError& e) {
        std::cerr << "error: usage: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: data: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "error: numeric: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: data: " << e.what() << "\n";
        return 3;
    }
}

}  // namespace propot
