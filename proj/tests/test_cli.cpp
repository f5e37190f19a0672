#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "propot/cli.hpp"

using propot::run_cli;
namespace fs = std::filesystem;

namespace {

int cli(std::initializer_list<const char*> args) {
    std::vector<const char*> argv = {"propot"};
    for (const char* a : args) argv.push_back(a);
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

struct Workspace {
    fs::path root;
    Workspace() {
        root = fs::temp_directory_path() / "propot_cli_ws";
        fs::remove_all(root);
        fs::create_directories(root);
    }
    std::string p(const std::string& rel) const { return (root / rel).string(); }
};

}  // namespace

TEST_CASE("cli: full pipeline smoke (synth -> train -> eval -> retrieve -> report)") {
    Workspace ws;
    CHECK(cli({"synth", "--ids", "4", "--imgs", "2", "--caps", "2", "--seed", "7", "--out",
               ws.p("corpus").c_str()}) == 0);
    CHECK(fs::exists(ws.root / "corpus" / "annotations.json"));
    CHECK(fs::exists(ws.root / "corpus" / "vocab.txt"));

    CHECK(cli({"train", "--data", ws.p("corpus").c_str(), "--profile", "desk", "--set",
               "epochs=2", "--set", "batch_size=8", "--set", "d=32", "--set", "pool=16",
               "--set", "use_mlm=false", "--seed", "3", "--out", ws.p("run").c_str()}) == 0);
    CHECK(fs::exists(ws.root / "run" / "checkpoint_latest.bin"));
    CHECK(fs::exists(ws.root / "run" / "metrics.jsonl"));
    CHECK(fs::exists(ws.root / "run" / "config.json"));

    CHECK(cli({"eval", "--data", ws.p("corpus").c_str(), "--checkpoint",
               ws.p("run/checkpoint_latest.bin").c_str(), "--split", "train", "--out",
               ws.p("metrics.json").c_str()}) == 0);
    std::string metrics = read_file(ws.root / "metrics.json");
    CHECK(metrics.find("\"R1\"") != std::string::npos);
    CHECK(metrics.find("\"mAP\"") != std::string::npos);

    CHECK(cli({"retrieve", "--data", ws.p("corpus").c_str(), "--checkpoint",
               ws.p("run/checkpoint_latest.bin").c_str(), "--text", "a person wearing a shirt",
               "--k", "3", "--split", "train"}) == 0);

    CHECK(cli({"export-embeddings", "--data", ws.p("corpus").c_str(), "--checkpoint",
               ws.p("run/checkpoint_latest.bin").c_str(), "--split", "train", "--out",
               ws.p("emb.json").c_str()}) == 0);
    CHECK(read_file(ws.root / "emb.json").find("propot-embeddings") != std::string::npos);

    CHECK(cli({"report", "--data", ws.p("corpus").c_str(), "--checkpoint",
               ws.p("run/checkpoint_latest.bin").c_str(), "--baseline",
               ws.p("run/checkpoint_latest.bin").c_str(), "--split", "train", "--top-n", "4",
               "--out", ws.p("report.html").c_str()}) == 0);
    std::string html = read_file(ws.root / "report.html");
    CHECK(html.find("data:image/bmp;base64,") != std::string::npos);
}

TEST_CASE("cli: identical seeded invocations produce identical artifacts") {
    Workspace ws;
    REQUIRE(cli({"synth", "--ids", "4", "--imgs", "2", "--caps", "1", "--seed", "1", "--out",
                 ws.p("corpus").c_str()}) == 0);
    const char* common[] = {"--data", "", "--profile", "desk"};
    (void)common;
    auto train_once = [&](const std::string& out) {
        return cli({"train", "--data", ws.p("corpus").c_str(), "--profile", "desk", "--set",
                    "epochs=2", "--set", "batch_size=4", "--set", "d=32", "--set", "pool=16",
                    "--set", "use_mlm=false", "--seed", "9", "--out", out.c_str()});
    };
    REQUIRE(train_once(ws.p("r1")) == 0);
    REQUIRE(train_once(ws.p("r2")) == 0);
    CHECK(read_file(ws.root / "r1" / "metrics.jsonl") == read_file(ws.root / "r2" / "metrics.jsonl"));
    CHECK(read_file(ws.root / "r1" / "checkpoint_latest.bin") ==
          read_file(ws.root / "r2" / "checkpoint_latest.bin"));
}

TEST_CASE("cli: exit codes for usage, data and override errors") {
    Workspace ws;
    CHECK(cli({"no-such-command"}) == 2);
    CHECK(cli({"train"}) == 2);  // missing required --data
    CHECK(cli({"eval", "--data", ws.p("missing").c_str(), "--checkpoint", "nope.bin"}) == 3);
    REQUIRE(cli({"synth", "--ids", "2", "--imgs", "1", "--caps", "1", "--out",
                 ws.p("corpus").c_str()}) == 0);
    CHECK(cli({"train", "--data", ws.p("corpus").c_str(), "--set", "bogus_key=1", "--out",
               ws.p("run").c_str()}) == 2);
    CHECK(cli({"train", "--data", ws.p("corpus").c_str(), "--set", "epochs=zebra", "--out",
               ws.p("run2").c_str()}) == 2);
    // batch size above the pair count is a data error
    CHECK(cli({"train", "--data", ws.p("corpus").c_str(), "--profile", "desk", "--set",
               "epochs=1", "--set", "use_mlm=false", "--out", ws.p("run3").c_str()}) == 3);
}

TEST_CASE("cli: failed invocations leave no partial run directory behind") {
    Workspace ws;
    REQUIRE(cli({"synth", "--ids", "2", "--imgs", "1", "--caps", "1", "--out",
                 ws.p("corpus").c_str()}) == 0);
    // fails because batch 16 > 2 pairs
    CHECK(cli({"train", "--data", ws.p("corpus").c_str(), "--profile", "desk", "--set",
               "epochs=1", "--out", ws.p("doomed").c_str()}) == 3);
    CHECK_FALSE(fs::exists(ws.root / "doomed"));
}

TEST_CASE("cli: lock file blocks concurrent writers") {
    Workspace ws;
    fs::create_directories(ws.root / "corpus");
    std::ofstream(ws.root / "corpus" / ".propot.lock") << "locked\n";
    CHECK(cli({"synth", "--ids", "2", "--imgs", "1", "--caps", "1", "--out",
               ws.p("corpus").c_str()}) == 3);
}

TEST_CASE("cli: help lists the section-4.1 defaults") {
    // --help returns 0 and lists flags; just verify the exit code here since
    // CLI11 prints to stdout directly
    CHECK(cli({"train", "--help"}) == 0);
    CHECK(cli({"--help"}) == 0);
    CHECK(cli({"ablate-aggregation", "--help"}) == 0);
}

TEST_CASE("cli: ablate-aggregation writes one metrics row per scheme") {
    Workspace ws;
    REQUIRE(cli({"synth", "--ids", "4", "--imgs", "2", "--caps", "1", "--seed", "5", "--out",
                 ws.p("corpus").c_str()}) == 0);
    CHECK(cli({"ablate-aggregation", "--data", ws.p("corpus").c_str(), "--profile", "desk",
               "--set", "d=32", "--set", "pool=16", "--set", "epochs=1", "--set", "batch_size=8",
               "--set", "use_mlm=false", "--seed", "3", "--out", ws.p("abl").c_str(),
               "--eval-split", "train"}) == 0);
    std::string rows = read_file(ws.root / "abl" / "aggregation_ablation.json");
    for (const char* name : {"Sum", "Average", "MLP", "Parameter", "APA"})
        CHECK(rows.find(std::string("\"") + name + "\"") != std::string::npos);
    for (const char* scheme : {"sum", "average", "mlp", "parameter", "apa"})
        CHECK(fs::exists(ws.root / "abl" / scheme / "metrics.jsonl"));
}

TEST_CASE("cli: ingest normalizes an external annotation file") {
    Workspace ws;
    // build a real corpus first so image files exist on disk
    REQUIRE(cli({"synth", "--ids", "3", "--imgs", "2", "--caps", "2", "--seed", "4", "--out",
                 ws.p("source").c_str()}) == 0);
    CHECK(cli({"ingest", "--annotations", ws.p("source/annotations.json").c_str(), "--out",
               ws.p("cache").c_str()}) == 0);
    CHECK(fs::exists(ws.root / "cache" / "annotations.json"));
    CHECK(fs::exists(ws.root / "cache" / "vocab.txt"));

    std::ofstream bad(ws.root / "bad.json");
    bad << "[{\"file_path\": \"x.bmp\", \"id\": \"a\", \"captions\": [\"no split\"]}]";
    bad.close();
    CHECK(cli({"ingest", "--annotations", (ws.root / "bad.json").string().c_str(), "--out",
               ws.p("cache2").c_str()}) == 3);
    CHECK_FALSE(fs::exists(ws.root / "cache2"));
}
