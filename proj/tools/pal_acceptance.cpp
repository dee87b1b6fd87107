// Acceptance harness: one PASS/FAIL line per criterion.
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "pal/align_trainer.h"
#include "pal/errors.h"
#include "pal/eval.h"
#include "pal/inference.h"
#include "pal/lm/tiny_lm.h"
#include "pal/mix_trainer.h"
#include "pal/nli.h"
#include "pal/pipeline/config.h"
#include "pal/pipeline/runner.h"
#include "pal/pipeline/synthetic.h"
#include "pal/prompt.h"
#include "pal/text.h"

namespace fs = std::filesystem;
using namespace pal;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), f, v);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw PalError("cannot read " + p.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::unique_ptr<lm::TinyLm> micro_model(std::uint64_t seed, lm::PositionMode positions = lm::PositionMode::learned) {
    lm::TinyLmConfig cfg;
    cfg.d_model = 4;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 8;
    cfg.context = 16;
    cfg.seed = seed;
    cfg.init_std = 0.5;
    cfg.positions = positions;
    cfg.optimizer.kind = lm::OptimizerKind::sgd;
    return std::make_unique<lm::TinyLm>(lm::Tokenizer::alphabet("abcd "), cfg);
}

std::string random_text(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
    static const std::string alphabet = "abcd ";
    std::string s;
    for (std::size_t n = lo + rng() % (hi - lo + 1); n > 0; --n) s += alphabet[rng() % alphabet.size()];
    return s;
}

align::AlignmentPair random_pair(std::mt19937_64& rng) {
    align::AlignmentPair p;
    p.sample_id = "pair";
    p.conditioning_prompt = random_text(rng, 2, 5);
    p.chosen = random_text(rng, 1, 4);
    p.rejected = random_text(rng, 1, 4);
    return p;
}

// ---------------------------------------------------------------------------

Outcome dpo_identity() {
    const auto t0 = Clock::now();
    const double ln2 = std::log(2.0);
    std::mt19937_64 rng(1);
    double worst = 0.0;
    std::size_t pairs = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto policy = micro_model(seed);
        auto reference = policy->clone_frozen();
        for (int i = 0; i < 40; ++i, ++pairs) {
            worst = std::max(worst, std::abs(align::dpo_loss(*policy, *reference, random_pair(rng), 0.1).loss - ln2));
        }
        // Move the policy, then check that beta = 0 ignores the margin.
        auto p = policy->mutable_parameters();
        std::normal_distribution<double> noise(0.0, 0.5);
        for (auto& v : p) v += noise(rng);
        for (int i = 0; i < 40; ++i, ++pairs) {
            const auto st = align::dpo_loss(*policy, *reference, random_pair(rng), 0.0);
            worst = std::max(worst, std::abs(st.loss - ln2));
        }
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-9 && secs < 1.0, "max |L - ln 2| = " + fmt("%.3g", worst) + " over " + std::to_string(pairs) +
                                             " pairs, " + fmt("%.3f", secs) + " s"};
}

Outcome dpo_gradient() {
    const auto t0 = Clock::now();
    std::size_t bad = 0, checked = 0, params = 0;
    double worst = 0.0;
    const int n_pairs = 24;
    for (auto mode : {lm::PositionMode::learned, lm::PositionMode::alibi}) {
        auto policy = micro_model(7, mode);
        auto reference = policy->clone_frozen();
        std::mt19937_64 rng(7);
        auto p = policy->mutable_parameters();
        params = std::max(params, p.size());
        std::normal_distribution<double> noise(0.0, 0.3);
        for (auto& v : p) v += noise(rng);
        const double beta = 0.5, h = 1e-5;
        for (int i = 0; i < n_pairs; ++i) {
            const auto pair = random_pair(rng);
            policy->zero_gradients();
            align::accumulate_dpo_gradient(*policy, *reference, {&pair}, beta);
            const std::vector<double> g(policy->gradients().begin(), policy->gradients().end());
            policy->zero_gradients();
            for (std::size_t k = 0; k < p.size(); ++k) {
                const double orig = p[k];
                p[k] = orig + h;
                const double up = align::dpo_loss(*policy, *reference, pair, beta).loss;
                p[k] = orig - h;
                const double down = align::dpo_loss(*policy, *reference, pair, beta).loss;
                p[k] = orig;
                const double fd = (up - down) / (2 * h);
                const double scale = std::max(std::abs(fd), std::abs(g[k]));
                const double err = std::abs(fd - g[k]);
                if (scale > 1e-6) worst = std::max(worst, err / scale);
                if (err > 1e-3 * scale + 1e-8) ++bad;
                ++checked;
            }
        }
    }
    const double secs = seconds_since(t0);
    return {bad == 0 && params <= 1000 && secs < 60.0,
            "<= " + std::to_string(params) + " params, " + std::to_string(n_pairs) +
                " pairs per position mode, " + std::to_string(checked) + " partials, max rel err " +
                fmt("%.2e", worst) + ", " + std::to_string(bad) + " outside 1e-3, " + fmt("%.2f", secs) + " s"};
}

Outcome mix_oracle() {
    const auto t0 = Clock::now();
    lm::TinyLmConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.context = 256;
    cfg.init = lm::InitMode::uniform;
    lm::TinyLm uniform(lm::Tokenizer::byte_level(), cfg);
    const double lnV = std::log(static_cast<double>(uniform.vocab_size()));
    std::mt19937_64 rng(3);
    double worst_uniform = 0.0;
    for (int i = 0; i < 20; ++i) {
        mix::MixBatch b;
        b.instances.push_back({prompt::TaskKind::generation, "persona and context " + std::to_string(i),
                               "reply number " + std::to_string(i * 37), "s"});
        const auto loss = mix::mix_loss(uniform, b);
        worst_uniform = std::max(worst_uniform, std::abs(loss.sum - static_cast<double>(loss.tokens) * lnV));
    }

    // Masking: every loss term sits on a target position; prompt tokens contribute nothing.
    auto micro = micro_model(3);
    const auto& tok = micro->tokenizer();
    std::size_t mismatches = 0;
    for (int i = 0; i < 100; ++i) {
        const std::string prompt = random_text(rng, 0, 6);
        const std::string target = random_text(rng, 1, 5);
        mix::MixBatch b;
        b.instances.push_back({prompt::TaskKind::selection, prompt, target, "s"});
        const auto loss = mix::mix_loss(*micro, b);
        auto ids = tok.encode(target);
        ids.push_back(tok.eot());
        auto prefix = tok.encode(prompt);
        double oracle = 0.0;
        for (auto id : ids) {
            oracle -= micro->next_token_logprobs(prefix)[static_cast<std::size_t>(id)];
            prefix.push_back(id);
        }
        if (loss.tokens != ids.size() || std::abs(loss.sum - oracle) > 1e-9) ++mismatches;
    }
    const double secs = seconds_since(t0);
    return {worst_uniform <= 1e-6 && mismatches == 0 && secs < 10.0,
            "max |L - T ln V| = " + fmt("%.3g", worst_uniform) + "; masking mismatches " + std::to_string(mismatches) +
                "/100; " + fmt("%.2f", secs) + " s"};
}

Outcome metric_oracles() {
    struct Case {
        const char* name;
        double got;
        double want;
    };
    const std::vector<Case> cases = {
        {"bleu1(a b c d | a b x y)", eval::bleu_n({"a b c d"}, {"a b x y"}, 1), 0.5},
        {"bleu1(a a a | a b)", eval::bleu_n({"a a a"}, {"a b"}, 1), 1.0 / 3.0},
        {"rougeL(a b c | a c)", eval::rouge_l({"a b c"}, {"a c"}), 0.8},
        {"entropy(4 uniform)", eval::entropy({"a b c d"}), std::log(4.0)},
        {"entropy(a:2 b:1 c:1)", eval::entropy({"a b a c"}), 1.039721},
    };
    std::string failed;
    for (const auto& c : cases)
        if (std::abs(c.got - c.want) > 1e-6) failed += std::string(" ") + c.name;

    auto golds = pipeline::synthetic_corpus(200, 7);
    std::vector<std::string> refs;
    for (const auto& s : golds) refs.push_back(s.gold_response);
    const double b1 = eval::bleu_n(refs, refs, 1), b2 = eval::bleu_n(refs, refs, 2), rl = eval::rouge_l(refs, refs);
    if (b1 != 1.0 || b2 != 1.0 || rl != 1.0) failed += " self-evaluation";
    return {failed.empty(), failed.empty() ? "5 fixtures within 1e-6; gold self-evaluation BLEU-1/2 and ROUGE-L = 1"
                                           : "failed:" + failed};
}

Outcome cscore_bruteforce() {
    const nli::StubNliScorer stub;
    const std::vector<std::string> words = {"i", "have", "a", "dog", "cat", "like", "jazz", "not", "no", ".", "never", "pizza"};
    std::mt19937_64 rng(11);
    auto sentence = [&](std::size_t lo, std::size_t hi) {
        std::string s;
        for (std::size_t n = lo + rng() % (hi - lo + 1); n > 0; --n) s += words[rng() % words.size()] + " ";
        return s;
    };
    std::size_t mismatches = 0, out_of_bounds = 0, records_total = 0;
    for (int inst = 0; inst < 500; ++inst) {
        std::vector<corpus::DialogueSample> samples;
        std::vector<inference::GenerationRecord> records;
        const std::size_t n = 1 + rng() % 5;
        for (std::size_t i = 0; i < n; ++i) {
            corpus::DialogueSample s;
            s.sample_id = "s" + std::to_string(i);
            for (std::size_t l = 1 + rng() % 5; l > 0; --l) s.profile.personas.push_back(sentence(1, 5));
            samples.push_back(s);
            inference::GenerationRecord r;
            r.sample_id = s.sample_id;
            r.response = sentence(0, 8);
            records.push_back(r);
        }
        std::shuffle(records.begin(), records.end(), rng);
        const auto got = eval::cscore(records, samples, stub);
        long long total = 0;
        for (std::size_t i = 0; i < records.size(); ++i) {
            int sum = 0;
            std::size_t l = 0;
            for (const auto& s : samples) {
                if (s.sample_id != records[i].sample_id) continue;
                l = s.profile.personas.size();
                for (const auto& p : s.profile.personas) sum += static_cast<int>(stub.classify(p, records[i].response));
            }
            if (got.per_sample[i] != sum) ++mismatches;
            if (std::abs(got.per_sample[i]) > static_cast<int>(l)) ++out_of_bounds;
            total += sum;
            ++records_total;
        }
        if (got.mean != static_cast<double>(total) / static_cast<double>(records.size())) ++mismatches;
    }
    return {mismatches == 0 && out_of_bounds == 0,
            "500 instances, " + std::to_string(records_total) + " records; mismatches " + std::to_string(mismatches) +
                ", out of bounds " + std::to_string(out_of_bounds)};
}

Outcome prompt_exactness() {
    corpus::DialogueSample s;
    s.sample_id = "d#2";
    s.profile.personas = {"i love film .", "i have a dog named pedro ."};
    s.context = {{corpus::Speaker::partner, "hi , do you like movies ?"},
                 {corpus::Speaker::self, "yes !"},
                 {corpus::Speaker::partner, "what kind ?"}};
    s.gold_response = "comedies mostly .";
    s.relevant_persona = corpus::PersonaChoice::at(0);

    const std::string personas = "The user's persona is described with: i love film .\ni have a dog named pedro ..\n";
    const std::string ctx = "Dialogue context: Person 1: hi , do you like movies ?\nPerson 2: yes !\nPerson 1: what kind ?.\n";
    const std::string select_body =
        personas +
        "If a persona description is required to generate a response, select the most appropriate one. "
        "If no persona is needed, respond with 'No persona data needed'.\n" +
        ctx + "The preferred persona is: ";
    const std::vector<std::pair<std::string, std::pair<std::string, std::string>>> cases = {
        {"selection", {prompt::render_selection(s).prompt_text, select_body}},
        {"generation",
         {prompt::render_generation(s, true).prompt_text,
          personas + "Please generate a response to the dialogue.\n" + ctx + "Response: "}},
        {"pair construction",
         {prompt::render_generation(s, false).prompt_text,
          "Please generate a response to the dialogue.\n" + ctx + "Response: "}},
        {"inference selection", {prompt::render_infer_select(s).prompt_text, select_body}},
        {"inference generation",
         {prompt::render_generation(s, true, std::string("i love film .")).prompt_text,
          personas + "The most related persona is i love film .. Please generate a response to the dialogue.\n" + ctx +
              "Response: "}},
    };
    std::string failed;
    for (const auto& [name, texts] : cases)
        if (texts.first != texts.second) failed += " " + name;

    auto corpus = pipeline::synthetic_corpus(200, 7);
    corpus.push_back(s);
    std::size_t leaks = 0, scanned = 0;
    for (const auto& c : corpus) {
        const auto blind = prompt::render_generation(c, false).prompt_text;
        for (const auto& p : c.profile.personas) {
            ++scanned;
            if (blind.find(p) != std::string::npos) ++leaks;
        }
    }
    return {failed.empty() && leaks == 0,
            (failed.empty() ? std::string("5/5 templates byte-exact") : "mismatch:" + failed) + "; " +
                std::to_string(leaks) + " persona sentences found in " + std::to_string(corpus.size()) +
                " pair-construction prompts (" + std::to_string(scanned) + " scans)"};
}

// ---------------------------------------------------------------------------
// Desk-scale end to end

struct DeskRuns {
    fs::path config;
    fs::path root1, root2;
    double seconds1 = -1.0;
    std::string error;
};

pipeline::RunConfig desk_config(const fs::path& config, const fs::path& root, const std::vector<std::string>& ablations = {}) {
    std::vector<std::string> overrides = {"output.root=" + json(root.string()).dump()};
    return pipeline::resolve_config(pipeline::load_config_file(config.string()), overrides, ablations);
}

void run_all(DeskRuns& d, const fs::path& root, double* seconds) {
    const auto t0 = Clock::now();
    pipeline::Pipeline p(desk_config(d.config, root), {"a", false, nullptr});
    p.run("all");
    if (seconds) *seconds = seconds_since(t0);
}

Outcome desk_end_to_end(DeskRuns& d) {
    if (!d.error.empty()) return {false, d.error};
    const auto mix = read_json(d.root1 / "train-mix/latest/manifest.json")["counters"];
    const auto align = read_json(d.root1 / "train-align/latest/manifest.json")["counters"];
    const double drop = mix["relative_drop"].get<double>();
    const json margin_j = align["best_margin_mean"];
    const double margin = margin_j.is_number() ? margin_j.get<double>() : 0.0;
    const double best = align["best_cscore"].get<double>(), initial = align["initial_cscore"].get<double>();
    const bool pass = d.seconds1 < 900.0 && drop >= 0.30 && margin_j.is_number() && margin > 0.0 && best >= initial;
    return {pass, fmt("%.1f", d.seconds1) + " s; stage-1 loss " + fmt("%.3f", mix["initial_loss"].get<double>()) +
                      " -> " + fmt("%.3f", mix["final_loss"].get<double>()) + " (drop " + fmt("%.1f", 100 * drop) +
                      "%); best step " + std::to_string(align["best_step"].get<long>()) + ", margin " +
                      fmt("%.4f", margin) + "; validation C.score " + fmt("%.3f", initial) + " -> " +
                      fmt("%.3f", best)};
}

class CountingBackend final : public lm::Backend {
public:
    explicit CountingBackend(const lm::Backend& inner) : inner_(inner) {}
    lm::BackendKind kind() const override { return inner_.kind(); }
    bool frozen() const override { return true; }
    std::string checkpoint_id() const override { return inner_.checkpoint_id(); }
    lm::ScoredContinuation score(std::string_view p, std::string_view t, bool term) const override {
        return inner_.score(p, t, term);
    }
    std::string generate(std::string_view p, int max_new) const override {
        ++calls;
        return inner_.generate(p, max_new);
    }
    std::unique_ptr<lm::Backend> clone_frozen() const override { return inner_.clone_frozen(); }
    mutable std::size_t calls = 0;

private:
    const lm::Backend& inner_;
};

Outcome strategy_harness(DeskRuns& d) {
    if (!d.error.empty()) return {false, d.error};
    const std::vector<std::pair<std::string, std::string>> variants = {{"random", "infer=random"},
                                                                        {"notselect", "infer=notselect"}};
    for (const auto& [tag, flag] : variants) {
        pipeline::Pipeline p(desk_config(d.config, d.root1, {flag}), {tag, true, nullptr});
        p.run("generate");
        p.run("evaluate");
    }
    std::set<std::string> checkpoints, metric_keys;
    std::set<std::size_t> sizes;
    std::string table;
    for (const std::string tag : {"a", "random", "notselect"}) {
        const auto gen = read_json(d.root1 / "generate" / tag / "manifest.json")["counters"];
        const auto rep = read_json(d.root1 / "evaluate" / tag / "report.json");
        checkpoints.insert(gen["checkpoint_id"].get<std::string>());
        sizes.insert(rep["metrics"]["n_samples"].get<std::size_t>());
        std::string keys;
        for (const auto& [k, v] : rep["metrics"].items()) keys += k + ",";
        metric_keys.insert(keys);
        table += " " + gen["strategy"].get<std::string>() + "=" + fmt("%.3f", rep["metrics"]["cscore"].get<double>());
    }

    // Call-count probe on the same checkpoint.
    const auto cfg = desk_config(d.config, d.root1);
    auto model = lm::TinyLm::load(d.root1 / "train-align/latest/model");
    auto samples = corpus::read_jsonl((d.root1 / "prepare/latest/test.jsonl").string());
    if (cfg.inference.max_samples > 0 && samples.size() > cfg.inference.max_samples)
        samples.resize(cfg.inference.max_samples);
    CountingBackend counter(*model);
    inference::batch_respond(counter, samples, {inference::StrategyKind::not_select, 0}, cfg.inference.max_new);
    const bool one_call = counter.calls == samples.size();

    const bool pass = checkpoints.size() == 1 && sizes.size() == 1 && metric_keys.size() == 1 && one_call;
    return {pass, "checkpoints " + std::to_string(checkpoints.size()) + ", C.score" + table + "; not-select calls " +
                      std::to_string(counter.calls) + " for " + std::to_string(samples.size()) + " samples"};
}

void write_fixture_part(const fs::path& path, std::size_t dialogues, std::size_t samples, std::mt19937_64& rng) {
    // Turn counts in [4, 11] that sum to `samples` exactly.
    std::vector<std::size_t> turns(dialogues, 4);
    std::size_t remaining = samples - 4 * dialogues;
    while (remaining > 0) {
        auto& t = turns[rng() % dialogues];
        if (t < 11) {
            ++t;
            --remaining;
        }
    }
    std::ofstream out(path);
    for (std::size_t d = 0; d < dialogues; ++d) {
        int line = 1;
        for (int k = 0; k < 4; ++k) out << line++ << " your persona: fixture persona " << d << " " << k << ".\n";
        for (std::size_t t = 0; t < turns[d]; ++t)
            out << line++ << " partner turn " << t << "\tself turn " << t << " of " << d << "\t\tcand a|cand b\n";
    }
}

Outcome data_fidelity(const fs::path& config, const fs::path& work) {
    const std::map<std::string, std::size_t> want = {{"train", 65719}, {"valid1", 6500}, {"valid2", 1301}, {"test", 7512}};
    auto run_prepare = [&](const std::map<std::string, std::string>& files, const fs::path& root) {
        json file = pipeline::load_config_file(config.string());
        for (const auto& [part, path] : files) file["data"]["files"][part] = path;
        file["output"]["root"] = root.string();
        pipeline::Pipeline p(pipeline::resolve_config(file), {"a", true, nullptr});
        p.run("prepare");
        return read_json(root / "prepare/a/split_manifest.json")["counts"];
    };
    auto check = [&](const json& counts, std::string& detail) {
        bool ok = true;
        for (const auto& [split, n] : want) {
            const std::size_t got = counts.value(split, std::size_t{0});
            detail += " " + split + "=" + std::to_string(got);
            ok = ok && got == n;
        }
        return ok;
    };

    const char* real = std::getenv("PAL_PERSONACHAT_DIR");
    if (real && *real) {
        const fs::path dir(real);
        std::string detail = "real release:";
        const auto counts = run_prepare({{"train", (dir / "train_self_original.txt").string()},
                                         {"valid", (dir / "valid_self_original.txt").string()},
                                         {"test", (dir / "test_self_original.txt").string()}},
                                        work / "fidelity-real");
        return {check(counts, detail), detail};
    }

    // No release supplied: exercise the same loader and split configuration on a
    // structure-matched fixture (8939 / 1000 / 968 dialogues with the release's sample totals).
    std::mt19937_64 rng(5);
    const fs::path fx = work / "fixture";
    fs::create_directories(fx);
    write_fixture_part(fx / "train_self_original.txt", 8939, 65719, rng);
    write_fixture_part(fx / "valid_self_original.txt", 1000, 7801, rng);
    write_fixture_part(fx / "test_self_original.txt", 968, 7512, rng);
    std::string detail = "PAL_PERSONACHAT_DIR not set; structure-matched fixture:";
    const auto counts = run_prepare({{"train", (fx / "train_self_original.txt").string()},
                                     {"valid", (fx / "valid_self_original.txt").string()},
                                     {"test", (fx / "test_self_original.txt").string()}},
                                    work / "fidelity-fixture");
    return {check(counts, detail), detail};
}

Outcome determinism(DeskRuns& d) {
    if (!d.error.empty()) return {false, d.error};
    run_all(d, d.root2, nullptr);
    std::string detail;
    bool pass = true;
    for (const auto& rel : {fs::path("generate/a/generations.jsonl"), fs::path("evaluate/a/report.json"),
                            fs::path("evaluate/a/report.txt")}) {
        const bool same = slurp(d.root1 / rel) == slurp(d.root2 / rel);
        pass = pass && same;
        detail += " " + rel.filename().string() + (same ? " identical" : " DIFFERS") + ";";
    }
    detail += " sha256 " + text::sha256_file((d.root1 / "generate/a/generations.jsonl").string()).substr(0, 12);
    return {pass, detail.substr(1)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::string work_dir;
    std::string config = std::string(PAL_SOURCE_DIR) + "/configs/desk.json";
    std::string data_config = std::string(PAL_SOURCE_DIR) + "/configs/personachat.json";
    std::vector<int> only;
    bool keep = false;
    app.add_option("--work-dir", work_dir, "directory for run outputs (default: a fresh temporary directory)");
    app.add_option("--config", config, "desk-scale run configuration");
    app.add_option("--data-config", data_config, "configuration used for the data fidelity check");
    app.add_option("--only", only, "run only these criteria")->check(CLI::Range(1, 10));
    app.add_flag("--keep", keep, "keep the work directory");
    CLI11_PARSE(app, argc, argv);

    fs::path work;
    bool temporary = work_dir.empty();
    if (temporary) {
        std::string tmpl = (fs::temp_directory_path() / "pal-acceptance-XXXXXX").string();
        if (!::mkdtemp(tmpl.data())) {
            std::cerr << "cannot create a temporary directory\n";
            return 1;
        }
        work = tmpl;
    } else {
        work = work_dir;
        fs::create_directories(work);
    }

    auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };

    DeskRuns desk;
    desk.config = config;
    desk.root1 = work / "desk-run1";
    desk.root2 = work / "desk-run2";
    if (wanted(7) || wanted(8) || wanted(10)) {
        try {
            fs::remove_all(desk.root1);
            fs::remove_all(desk.root2);
            run_all(desk, desk.root1, &desk.seconds1);
        } catch (const std::exception& e) {
            desk.error = std::string("desk run failed: ") + e.what();
        }
    }

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"DPO identity", dpo_identity},
        {"DPO gradient check", dpo_gradient},
        {"Mix loss oracle", mix_oracle},
        {"Metric oracles", metric_oracles},
        {"C.score brute-force equivalence", cscore_bruteforce},
        {"Prompt byte-exactness", prompt_exactness},
        {"End-to-end desk-scale run", [&] { return desk_end_to_end(desk); }},
        {"Strategy ablation harness", [&] { return strategy_harness(desk); }},
        {"Data fidelity", [&] { return data_fidelity(data_config, work); }},
        {"Determinism", [&] { return determinism(desk); }},
    };

    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int n = static_cast<int>(i + 1);
        if (!wanted(n)) continue;
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        if (!o.pass) ++failures;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << n << ". " << criteria[i].first << ": " << o.detail
                  << std::endl;
    }

    if (temporary && !keep) {
        std::error_code ec;
        fs::remove_all(work, ec);
    } else {
        std::cout << "outputs kept under " << work.string() << "\n";
    }
    return failures == 0 ? 0 : 1;
}
