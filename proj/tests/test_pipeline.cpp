#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <fstream>
#include <set>
#include <sstream>

#include "pal/errors.h"
#include "pal/pipeline/config.h"
#include "pal/pipeline/runner.h"
#include "pal/pipeline/synthetic.h"
#include "pal/text.h"
#include "support.h"

using namespace pal;
using namespace pal::pipeline;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Small enough that a full run takes a few seconds.
json fast_config(const fs::path& root) {
    return {
        {"data", {{"synthetic_samples", 40}, {"synthetic_seed", 3}}},
        {"split", {{"targets", {{"valid1", {{"fraction", 0.2}}}, {"valid2", {{"fraction", 0.1}}}, {"test", {{"fraction", 0.1}}}}}}},
        {"backend",
         {{"vocab_pieces", 64},
          {"tiny", {{"d_model", 8}, {"n_layers", 1}, {"n_heads", 2}, {"d_ff", 16}, {"context", 512}, {"seed", 2}}}}},
        {"stage1", {{"lr", 0.01}, {"warmup_steps", 2}, {"epochs", 1}, {"batch_size", 8}}},
        {"dpo", {{"lr", 0.001}, {"warmup_steps", 1}, {"max_steps", 4}, {"eval_every", 2}, {"patience", 2}, {"batch_size", 4}}},
        {"validation", {{"max_samples", 3}}},
        {"inference", {{"max_new", 4}, {"max_samples", 3}}},
        {"output", {{"root", root.string()}}},
    };
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    REQUIRE(in);
    return json::parse(in);
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Pipeline make(const json& file, const std::string& tag, std::vector<std::string> ablations = {},
              std::vector<std::string> overrides = {}, bool force = false) {
    return Pipeline(resolve_config(file, overrides, ablations), {tag, force, nullptr});
}

struct CliResult {
    int status;
    std::string out;
};

CliResult cli(const std::string& args) {
    const std::string cmd = std::string(PAL_CLI) + " " + args + " 2>&1";
    FILE* p = ::popen(cmd.c_str(), "r");
    REQUIRE(p);
    std::string out;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof(buf), p)) out.append(buf, n);
    const int st = ::pclose(p);
    return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, out};
}

}  // namespace

TEST_CASE("configuration defaults and validation") {
    const auto cfg = resolve_config(json::object());
    CHECK(cfg.dpo.beta == 0.1);
    CHECK(cfg.stage1.schedule.lr == 2e-5);
    CHECK(cfg.stage1.mix_ratio == 0.5);
    CHECK(cfg.pairs_split == corpus::Split::valid1);
    CHECK(cfg.validation.split == corpus::Split::valid2);
    CHECK(cfg.inference.split == corpus::Split::test);

    try {
        resolve_config({{"dpo", {{"beta", "high"}, {"betta", 1}}}, {"stage1", {{"lr", -1.0}}}});
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("dpo.beta") != std::string::npos);
        CHECK(msg.find("dpo.betta") != std::string::npos);
        CHECK(msg.find("stage1.lr") != std::string::npos);
    }
    CHECK_THROWS_AS(resolve_config(json::object(), {"inference.strategy=beam"}), ConfigError);
    CHECK_THROWS_AS(resolve_config(json::object(), {"nonsense"}), ConfigError);
}

TEST_CASE("overrides and ablations resolve into the recorded config") {
    const auto cfg = resolve_config(json::object(), {"dpo.beta=0.25", "inference.seed=7"}, {"only-dg"});
    CHECK(cfg.dpo.beta == 0.25);
    CHECK(cfg.resolved["dpo"]["beta"] == 0.25);
    CHECK(cfg.stage1.mix_ratio == 0.0);
    CHECK(cfg.resolved["stage1"]["mix_ratio"] == 0.0);
    CHECK(cfg.resolved["ablations"] == json::array({"only-dg"}));
    CHECK(resolve_config(json::object(), {}, {"only-ps"}).stage1.mix_ratio == 1.0);
    CHECK(resolve_config(json::object(), {}, {"infer=random"}).inference.strategy ==
          inference::StrategyKind::random_select);
    CHECK(resolve_config(json::object(), {}, {"infer=notselect"}).inference.strategy ==
          inference::StrategyKind::not_select);

    for (const auto& pair : std::vector<std::vector<std::string>>{{"only-dg", "only-ps"},
                                                                  {"infer=random", "infer=notselect"},
                                                                  {"no-pa", "no-pc"},
                                                                  {"no-mix", "only-dg"}}) {
        CHECK_THROWS_AS(resolve_config(json::object(), {}, pair), UsageError);
    }
    CHECK_THROWS_AS(resolve_config(json::object(), {}, {"no-such-thing"}), ConfigError);

    // The output location does not change the digest; anything else does.
    const auto a = resolve_config({{"output", {{"root", "/tmp/a"}}}});
    const auto b = resolve_config({{"output", {{"root", "/tmp/b"}}}});
    CHECK(a.digest() == b.digest());
    CHECK(a.digest() != resolve_config(json::object(), {"dpo.beta=0.2"}).digest());
}

TEST_CASE("ablation plans") {
    testutil::TempDir dir;
    const auto file = fast_config(dir.path());
    using S = Stage;
    CHECK(make(file, "t").plan_all() ==
          std::vector<Stage>{S::prepare, S::train_mix, S::build_pairs, S::train_align, S::generate, S::evaluate});
    CHECK(make(file, "t", {"no-pa"}).plan_all() == std::vector<Stage>{S::prepare, S::train_mix, S::generate, S::evaluate});
    CHECK(make(file, "t", {"no-pc"}).plan_all() ==
          std::vector<Stage>{S::prepare, S::train_mix, S::train_align, S::generate, S::evaluate});
    CHECK_THROWS_AS(make(file, "latest"), UsageError);
    CHECK_THROWS_AS(make(file, "a/b"), UsageError);
}

TEST_CASE("missing upstream output is a dependency error naming the stage") {
    testutil::TempDir dir;
    auto p = make(fast_config(dir.path()), "t");
    try {
        p.run("evaluate");
        FAIL("expected DependencyError");
    } catch (const DependencyError& e) {
        CHECK(std::string(e.what()).find("'generate'") != std::string::npos);
    }
    CHECK_FALSE(fs::exists(dir / "evaluate/t/manifest.json"));
    CHECK(fs::exists(dir / "evaluate/t/FAILED"));
    CHECK_FALSE(fs::exists(dir / ".lock"));
    // A rerun refuses to overwrite without --force.
    CHECK_THROWS_AS(p.run("evaluate"), UsageError);
}

TEST_CASE("full run writes manifests, latest links and a report") {
    testutil::TempDir dir;
    const auto file = fast_config(dir.path());
    auto p = make(file, "r1", {}, {"dpo.beta=0.1"});
    p.run("all");
    for (const char* st : {"prepare", "train-mix", "build-pairs", "train-align", "generate", "evaluate"}) {
        const fs::path d = dir / st / "r1";
        REQUIRE(fs::exists(d / "manifest.json"));
        CHECK(fs::read_symlink(dir / st / "latest") == "r1");
        const auto m = read_json(d / "manifest.json");
        for (const char* k : {"stage", "tag", "config_digest", "config", "inputs", "outputs", "counters", "started_at",
                              "wall_clock_seconds"})
            CHECK(m.contains(k));
        CHECK(m["config"]["dpo"]["beta"] == 0.1);
        for (const auto& o : m["outputs"]) CHECK(text::sha256_file((d / o["path"].get<std::string>()).string()) == o["sha256"]);
    }
    const auto align = read_json(dir / "train-align/r1/manifest.json");
    CHECK(align["counters"]["objective"] == "dpo");
    std::set<std::string> upstream;
    for (const auto& in : align["inputs"]) upstream.insert(in["stage"].get<std::string>());
    CHECK(upstream == std::set<std::string>{"prepare", "train-mix", "build-pairs"});
    CHECK(align["counters"]["best_cscore"].get<double>() >= align["counters"]["initial_cscore"].get<double>());
    const auto report = read_json(dir / "evaluate/r1/report.json");
    CHECK(report["metrics"]["n_samples"] == 3);
    CHECK(report["provenance"]["strategy"] == "select_then_generate");
    const auto gen = read_json(dir / "generate/r1/manifest.json");
    CHECK(report["provenance"]["checkpoint_id"] == gen["counters"]["checkpoint_id"]);
    CHECK(slurp(dir / "evaluate/r1/report.txt").find("PAL") != std::string::npos);

    SUBCASE("a second prepare is byte-identical") {
        make(file, "r2").run("prepare");
        for (const char* f : {"data.jsonl", "train.jsonl", "valid1.jsonl", "valid2.jsonl", "test.jsonl", "split_manifest.json"})
            CHECK(slurp(dir / "prepare/r1" / f) == slurp(dir / "prepare/r2" / f));
    }
    SUBCASE("random inference stamps its seed") {
        make(file, "rnd", {"infer=random"}, {"inference.seed=5"}).run("generate");
        const auto m = read_json(dir / "generate/rnd/manifest.json");
        CHECK(m["counters"]["strategy"] == "random");
        CHECK(m["counters"]["seed"] == 5);
        std::ifstream in(dir / "generate/rnd/generations.jsonl");
        std::string line;
        while (std::getline(in, line)) CHECK(json::parse(line)["strategy"] == "random");
    }
    SUBCASE("--force replaces an existing tag") {
        CHECK_THROWS_AS(make(file, "r1").run("evaluate"), UsageError);
        make(file, "r1", {}, {}, true).run("evaluate");
        CHECK(fs::exists(dir / "evaluate/r1/report.json"));
    }
}

TEST_CASE("no-pa skips preference alignment") {
    testutil::TempDir dir;
    make(fast_config(dir.path()), "a", {"no-pa"}).run("all");
    CHECK_FALSE(fs::exists(dir / "train-align"));
    CHECK_FALSE(fs::exists(dir / "build-pairs"));
    const auto gen = read_json(dir / "generate/a/manifest.json");
    CHECK(gen["counters"]["model_stage"] == "train-mix");
    CHECK(fs::exists(dir / "evaluate/a/report.json"));
}

TEST_CASE("no-pc trains stage 2 with next-token loss") {
    testutil::TempDir dir;
    make(fast_config(dir.path()), "a", {"no-pc"}).run("all");
    CHECK_FALSE(fs::exists(dir / "build-pairs"));
    const auto m = read_json(dir / "train-align/a/manifest.json");
    CHECK(m["counters"]["objective"] == "ntp");
    CHECK(m["counters"]["best_margin_mean"].is_null());
    std::ifstream csv(dir / "train-align/a/log.csv");
    std::string header, row;
    std::getline(csv, header);
    CHECK(header == "step,lr,loss,grad_norm,margin_mean,val_cscore");
    int rows = 0;
    while (std::getline(csv, row)) {
        ++rows;
        std::vector<std::string> cells;
        std::stringstream ss(row);
        for (std::string c; std::getline(ss, c, ',');) cells.push_back(c);
        if (!row.empty() && row.back() == ',') cells.push_back("");
        REQUIRE(cells.size() == 6);
        CHECK(cells[4].empty());
        if (cells[0] != "0") CHECK_FALSE(cells[2].empty());
    }
    CHECK(rows >= 4);
}

TEST_CASE("no-mix keeps the untrained model") {
    testutil::TempDir dir;
    auto p = make(fast_config(dir.path()), "a", {"no-mix"});
    p.run("prepare");
    p.run("train-mix");
    const auto m = read_json(dir / "train-mix/a/manifest.json");
    CHECK(m["counters"]["skipped"] == true);
    CHECK(fs::exists(dir / "train-mix/a/model/model.json"));
}

TEST_CASE("run lock") {
    testutil::TempDir dir;
    {
        RunLock lock(dir.path());
        CHECK(fs::exists(dir / ".lock"));
        CHECK_THROWS_AS(RunLock(dir.path()), PalError);
        CHECK_THROWS_AS(make(fast_config(dir.path()), "x").run("prepare"), PalError);
    }
    CHECK_FALSE(fs::exists(dir / ".lock"));
    // A lock held by a process that no longer exists is taken over.
    const pid_t child = ::fork();
    if (child == 0) ::_exit(0);
    int st = 0;
    ::waitpid(child, &st, 0);
    std::ofstream(dir / ".lock") << child << "\n";
    RunLock taken(dir.path());
    CHECK(std::stol(slurp(dir / ".lock")) == ::getpid());
}

TEST_CASE("synthetic corpus") {
    const auto a = synthetic_corpus(200, 7);
    const auto b = synthetic_corpus(200, 7);
    REQUIRE(a.size() == 200);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(corpus::to_json(a[i]) == corpus::to_json(b[i]));
    std::set<std::string> ids;
    for (const auto& s : a) {
        ids.insert(s.sample_id);
        CHECK(s.profile.personas.size() == 4);
        CHECK(s.context.back().speaker == corpus::Speaker::partner);
        for (const auto& t : s.context)
            for (const auto& p : s.profile.personas) CHECK(t.text.find(p) == std::string::npos);
    }
    CHECK(ids.size() == 200);
}

TEST_CASE("command line") {
    testutil::TempDir dir;
    std::ofstream(dir / "cfg.json") << fast_config(dir / "runs").dump();
    const std::string cfg = "--config " + (dir / "cfg.json").string();

    auto r = cli("evaluate " + cfg + " --tag t");
    CHECK(r.status == 3);
    CHECK(r.out.find("'generate'") != std::string::npos);

    r = cli("all " + cfg + " --ablation only-dg --ablation only-ps");
    CHECK(r.status == 2);
    std::ofstream(dir / "bad.json") << R"({"dpo": {"beta": "x"}})";
    r = cli("prepare --config " + (dir / "bad.json").string());
    CHECK(r.status == 2);
    CHECK(r.out.find("dpo.beta") != std::string::npos);
    CHECK(cli("prepare --config /nonexistent.json").status == 2);

    r = cli("prepare " + cfg + " --tag t --overrides dpo.beta=0.3");
    CHECK(r.status == 0);
    CHECK(read_json(dir / "runs/prepare/t/manifest.json")["config"]["dpo"]["beta"] == 0.3);
    CHECK(cli("prepare " + cfg + " --tag t").status == 2);
    CHECK(cli("prepare " + cfg + " --tag t --force").status == 0);

    r = cli("config " + cfg + " --overrides dpo.beta=0.1");
    CHECK(r.status == 0);
    CHECK(r.out.find("digest ") != std::string::npos);
    r = cli("templates");
    CHECK(r.status == 0);
    CHECK(r.out.find("Please generate a response to the dialogue.") != std::string::npos);
    r = cli("synth -n 3 --seed 1");
    CHECK(r.status == 0);
    CHECK(std::count(r.out.begin(), r.out.end(), '\n') == 3);
    CHECK(cli("frobnicate").status != 0);
}
