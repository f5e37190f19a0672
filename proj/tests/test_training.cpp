#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "propot/errors.hpp"
#include "propot/training.hpp"

using namespace propot;
namespace fs = std::filesystem;

namespace {

Corpus small_corpus(int ids = 4, int imgs = 2, int caps = 1, uint64_t seed = 3) {
    SyntheticSpec spec;
    spec.n_identities = ids;
    spec.images_per_identity = imgs;
    spec.captions_per_image = caps;
    spec.seed = seed;
    return Corpus::generate_synthetic(spec);
}

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.apply_profile("desk");
    cfg.d = 32;
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.pool = 16;  // 24x8 grid
    cfg.patch = 8;  // 3 patches
    cfg.seed = 5;
    return cfg;
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("lr schedule: warmup endpoints, cosine tail, junction continuity") {
    const int64_t total = 1000;
    const double base = 2.0;
    CHECK(lr_at(0, total, base, 0.1) == doctest::Approx(0.1 * base).epsilon(1e-12));
    CHECK(lr_at(100, total, base, 0.1) == doctest::Approx(base).epsilon(1e-9));
    CHECK(lr_at(total, total, base, 0.1) == doctest::Approx(0.0).epsilon(1e-12));
    // continuity at the warmup/cosine junction
    double before = lr_at(99, total, base, 0.1);
    double at = lr_at(100, total, base, 0.1);
    double after = lr_at(101, total, base, 0.1);
    CHECK(std::fabs(at - before) < 0.02 * base);
    CHECK(std::fabs(after - at) < 0.02 * base);
    // no warmup
    CHECK(lr_at(0, total, base, 0.0) == doctest::Approx(base).epsilon(1e-12));
    // monotone decay after warmup
    double prev = lr_at(100, total, base, 0.1);
    for (int64_t s = 110; s <= total; s += 10) {
        double cur = lr_at(s, total, base, 0.1);
        CHECK(cur <= prev + 1e-12);
        prev = cur;
    }
}

TEST_CASE("config: profile, json round trip, typed overrides, unknown keys") {
    TrainConfig cfg;
    CHECK(cfg.epochs == 60);
    CHECK(cfg.batch_size == 64);
    CHECK(cfg.tau == 0.02);
    CHECK(cfg.lambda1 == 0.2);
    CHECK(cfg.lambda2 == 1.0);
    CHECK(cfg.context_len == 4);
    CHECK(cfg.sae_blocks == 1);
    CHECK(cfg.cad_blocks == 3);
    CHECK(cfg.weight_decay == 4e-5);
    CHECK(cfg.lr_backbone == 1e-5);
    CHECK(cfg.lr_modules == 1e-4);
    CHECK(cfg.use_inipt);
    CHECK(cfg.use_mlm);

    cfg.set_key("epochs", "3");
    CHECK(cfg.epochs == 3);
    cfg.set_key("lambda1", "0.5");
    CHECK(cfg.lambda1 == 0.5);
    cfg.set_key("use_mlm", "false");
    CHECK_FALSE(cfg.use_mlm);
    cfg.set_key("aggregation", "sum");
    CHECK(cfg.aggregation == "sum");
    CHECK_THROWS_AS(cfg.set_key("no_such_key", "1"), UsageError);
    CHECK_THROWS_AS(cfg.set_key("epochs", "abc"), UsageError);

    fs::path p = fs::temp_directory_path() / "propot_cfg.json";
    {
        std::ofstream f(p);
        f << cfg.to_json();
    }
    TrainConfig back = TrainConfig::from_json_file(p.string());
    CHECK(back.hash() == cfg.hash());
    CHECK(back.epochs == 3);
    CHECK(back.aggregation == "sum");

    TrainConfig desk;
    desk.apply_profile("desk");
    CHECK(desk.d == 64);
    CHECK(desk.hash() != TrainConfig().hash());

    TrainConfig bad;
    bad.use_inipt = false;  // DPP without IniPt must be rejected
    CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("ablation wiring: flags control which parameters exist") {
    Corpus corpus = small_corpus();

    auto count = [&](bool inipt, bool dpp, bool ipp_i, bool ipp_o, bool mlm) {
        TrainConfig cfg = tiny_config();
        cfg.use_inipt = inipt;
        cfg.use_dpp = dpp;
        cfg.use_ipp_intra = ipp_i;
        cfg.use_ipp_inter = ipp_o;
        cfg.use_mlm = mlm;
        Model model(cfg, corpus);
        return model.parameter_count();
    };

    const int64_t row0 = count(false, false, false, false, false);  // Baseline
    const int64_t row1 = count(true, false, false, false, false);   // +IniP
    const int64_t row2 = count(true, true, false, false, false);    // +DPP
    const int64_t row6 = count(true, true, true, true, false);      // +DPP+IPP
    const int64_t row7 = count(true, true, true, true, true);       // full

    CHECK(row0 == row1);  // the bank is frozen, not a parameter
    CHECK(row0 < row2);   // DPP adds per-identity contexts and the SAE
    CHECK(row2 < row6);   // IPP adds the CAD stack
    CHECK(row6 < row7);   // MLM head parameters
}

TEST_CASE("two seeded runs produce bitwise-identical metric logs and checkpoints") {
    Corpus corpus = small_corpus();
    fs::path dir_a = fs::temp_directory_path() / "propot_run_a";
    fs::path dir_b = fs::temp_directory_path() / "propot_run_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);

    TrainConfig cfg = tiny_config();
    {
        Model model(cfg, corpus);
        train(model, corpus, dir_a.string());
    }
    {
        Model model(cfg, corpus);
        train(model, corpus, dir_b.string());
    }
    std::string la = read_file(dir_a / "metrics.jsonl");
    CHECK(!la.empty());
    CHECK(la == read_file(dir_b / "metrics.jsonl"));
    CHECK(read_file(dir_a / "checkpoint_latest.bin") == read_file(dir_b / "checkpoint_latest.bin"));
}

TEST_CASE("checkpoint round trip is bit-exact and resume continues the schedule") {
    Corpus corpus = small_corpus();
    TrainConfig cfg = tiny_config();
    cfg.epochs = 4;

    fs::path dir_full = fs::temp_directory_path() / "propot_full";
    fs::path dir_part = fs::temp_directory_path() / "propot_part";
    fs::remove_all(dir_full);
    fs::remove_all(dir_part);

    // one uninterrupted run
    {
        Model model(cfg, corpus);
        train(model, corpus, dir_full.string());
    }
    // the same run split into 2 + 2 epochs via resume
    {
        TrainConfig half = cfg;
        half.epochs = 2;
        Model model(half, corpus);
        train(model, corpus, dir_part.string());
    }
    {
        // resuming reuses the full-horizon config: same hash requirement
        Model model(cfg, corpus);
        auto st = Model::peek_config((dir_part / "checkpoint_latest.bin").string());
        CHECK(st.epochs == 2);
        // rewrite the stored config? no: resume must refuse on hash mismatch
        CHECK_THROWS_AS(model.load_checkpoint((dir_part / "checkpoint_latest.bin").string()),
                        DataError);
    }
    // matching-config resume: run 4-epoch config for 2 epochs by truncating,
    // then resume from its checkpoint and compare final state to dir_full
    fs::path dir_res = fs::temp_directory_path() / "propot_resume";
    fs::remove_all(dir_res);
    {
        Model model(cfg, corpus);
        // train writes a checkpoint every epoch; stop early by training a
        // truncated schedule with identical config through the same code path
        BatchConfig bcfg;
        bcfg.batch_size = cfg.batch_size;
        bcfg.mask_prob = cfg.mask_prob;
        // simply run the full trainer but snapshot after epoch 1 via
        // checkpoint_latest written per epoch: emulate interruption by copying
        train(model, corpus, dir_res.string());
    }
    // the per-epoch checkpoint written after the final epoch equals full run's
    CHECK(read_file(dir_res / "checkpoint_latest.bin") ==
          read_file(dir_full / "checkpoint_latest.bin"));

    // save -> load round trip: parameters bitwise equal
    {
        Model model(cfg, corpus);
        auto state = model.load_checkpoint((dir_full / "checkpoint_latest.bin").string());
        CHECK(state.epoch == 3);
        Model fresh(cfg, corpus);
        fresh.load_checkpoint((dir_full / "checkpoint_latest.bin").string());
        auto pa = model.all_params(), pb = fresh.all_params();
        for (size_t i = 0; i < pa.size(); ++i)
            CHECK(pa[i]->value.max_abs_diff(pb[i]->value) == 0.0);
    }

    // corrupted file: error, no partial load
    {
        fs::path bad = fs::temp_directory_path() / "propot_bad.bin";
        std::string bytes = read_file(dir_full / "checkpoint_latest.bin");
        bytes.resize(bytes.size() / 2);
        std::ofstream f(bad, std::ios::binary);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        f.close();
        Model model(cfg, corpus);
        model.build_bank(corpus);
        Tensor before = model.all_params()[0]->value;
        CHECK_THROWS_AS(model.load_checkpoint(bad.string()), DataError);
        CHECK(model.all_params()[0]->value.max_abs_diff(before) == 0.0);
    }
}

TEST_CASE("resume from a mid-run checkpoint reproduces the uninterrupted run") {
    Corpus corpus = small_corpus();
    TrainConfig cfg = tiny_config();
    cfg.epochs = 4;
    cfg.checkpoint_every = 1;  // keep per-epoch checkpoints

    fs::path dir_a = fs::temp_directory_path() / "propot_resume_a";
    fs::path dir_b = fs::temp_directory_path() / "propot_resume_b";
    fs::remove_all(dir_a);
    fs::remove_all(dir_b);
    {
        Model model(cfg, corpus);
        train(model, corpus, dir_a.string());
    }
    {
        Model model(cfg, corpus);
        train(model, corpus, dir_b.string(),
              (dir_a / "checkpoint_epoch_00001.bin").string());  // resume after epoch 1
    }
    CHECK(read_file(dir_a / "checkpoint_latest.bin") == read_file(dir_b / "checkpoint_latest.bin"));
}

TEST_CASE("training on a small synthetic corpus decreases the loss") {
    Corpus corpus = small_corpus(4, 2, 1, 11);
    TrainConfig cfg = tiny_config();
    cfg.epochs = 10;
    cfg.use_mlm = false;  // keep this unit fast; the acceptance run covers MLM
    Model model(cfg, corpus);
    TrainResult res = train(model, corpus, "");
    REQUIRE(res.log.size() == 10);
    CHECK(res.log.back().mean_loss.total < res.log.front().mean_loss.total);
}

TEST_CASE("baseline flags off: no prototype parameters receive gradients") {
    Corpus corpus = small_corpus();
    TrainConfig cfg = tiny_config();
    cfg.use_inipt = false;
    cfg.use_dpp = false;
    cfg.use_ipp_intra = false;
    cfg.use_ipp_inter = false;
    cfg.use_mlm = false;
    Model model(cfg, corpus);
    for (Param* p : model.all_params())
        CHECK(p->name.find("pipe.") == std::string::npos);

    // gradients flow end to end on a random batch (encoder gradient check)
    BatchConfig bcfg;
    bcfg.batch_size = 4;
    auto batches = make_batches(corpus, bcfg, Rng(2));
    for (Param* p : model.all_params()) p->zero_grad();
    Tape tape;
    auto tl = model.compute_loss(tape, batches[0], corpus);
    tape.backward(tl.total);
    int64_t nonzero = 0;
    for (Param* p : model.all_params())
        if (p->grad.max_abs() > 0) ++nonzero;
    CHECK(nonzero == static_cast<int64_t>(model.all_params().size()));
}

TEST_CASE("full configuration: pipeline parameters receive gradients when lambda1 > 0") {
    Corpus corpus = small_corpus();
    TrainConfig cfg = tiny_config();
    Model model(cfg, corpus);
    model.build_bank(corpus);

    BatchConfig bcfg;
    bcfg.batch_size = 8;
    auto batches = make_batches(corpus, bcfg, Rng(4));
    for (Param* p : model.all_params()) p->zero_grad();
    Tape tape;
    auto tl = model.compute_loss(tape, batches[0], corpus);
    tape.backward(tl.total);
    int64_t pipe_nonzero = 0, pipe_total = 0;
    for (Param* p : model.all_params())
        if (p->name.find("pipe.") == 0) {
            ++pipe_total;
            if (p->grad.max_abs() > 0) ++pipe_nonzero;
        }
    CHECK(pipe_total > 0);
    // contexts of identities absent from the batch stay at zero grad, so check
    // blocks rather than every row; both context tensors must be touched
    CHECK(pipe_nonzero == pipe_total);

    // with lambda1 = 0 the pipeline is skipped entirely
    TrainConfig no_p2i = cfg;
    no_p2i.lambda1 = 0.0;
    Model model2(no_p2i, corpus);
    model2.build_bank(corpus);
    for (Param* p : model2.all_params()) p->zero_grad();
    Tape tape2;
    auto tl2 = model2.compute_loss(tape2, batches[0], corpus);
    tape2.backward(tl2.total);
    for (Param* p : model2.all_params())
        if (p->name.find("pipe.") == 0) CHECK(p->grad.max_abs() == 0.0);
}
