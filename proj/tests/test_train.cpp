#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "pal/align_trainer.h"
#include "pal/mix_trainer.h"
#include "pal/pipeline/synthetic.h"
#include "pal/prompt.h"
#include "support.h"

using namespace pal;
using corpus::PersonaChoice;

namespace {

std::unique_ptr<lm::TinyLm> byte_model(std::uint64_t seed, lm::InitMode init = lm::InitMode::random,
                                       std::size_t context = 1024) {
    lm::TinyLmConfig cfg;
    cfg.d_model = 16;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.context = context;
    cfg.seed = seed;
    cfg.init = init;
    return std::make_unique<lm::TinyLm>(lm::Tokenizer::byte_level(), cfg);
}

std::vector<corpus::DialogueSample> labelled_synthetic(std::size_t n) {
    auto v = pipeline::synthetic_corpus(n, 3);
    corpus::label_samples(v, corpus::LexicalOverlapScorer(), 0.15);
    return v;
}

align::AlignmentPair random_pair(std::mt19937_64& rng, int i) {
    align::AlignmentPair p;
    p.sample_id = "p#" + std::to_string(i);
    p.conditioning_prompt = testutil::random_word(rng, 2, 5, "abcd ");
    p.chosen = testutil::random_word(rng, 1, 4, "abcd ");
    p.rejected = testutil::random_word(rng, 1, 4, "abcd ");
    return p;
}

class ScriptedProbe final : public align::CScoreProbe {
public:
    explicit ScriptedProbe(std::vector<double> values) : values_(std::move(values)) {}
    double evaluate(const lm::Backend& snapshot) override {
        CHECK(snapshot.frozen());
        ids.push_back(snapshot.checkpoint_id());
        const double v = calls < values_.size() ? values_[calls] : values_.back();
        ++calls;
        return v;
    }
    std::size_t calls = 0;
    std::vector<std::string> ids;

private:
    std::vector<double> values_;
};

}  // namespace

// ---------------------------------------------------------------------------
// Stage 1

TEST_CASE("warm-up schedule") {
    for (std::size_t s = 1; s <= 100; ++s)
        CHECK(std::abs(mix::scheduled_lr(2e-5, 100, s) - 2e-5 * double(s) / 100.0) < 1e-12);
    CHECK(mix::scheduled_lr(2e-5, 100, 101) == 2e-5);
    CHECK(mix::scheduled_lr(2e-5, 100, 5000) == 2e-5);
    CHECK(mix::scheduled_lr(1e-3, 0, 1) == 1e-3);
    mix::TrainSchedule bad;
    bad.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad.lr = 1e-3;
    bad.warmup_steps = -1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("mix loss on a uniform model is T ln V") {
    auto m = byte_model(1, lm::InitMode::uniform);
    const double lnV = std::log(static_cast<double>(m->vocab_size()));
    mix::MixBatch b;
    b.instances.push_back({prompt::TaskKind::generation, "prompt text", "hello", "s#0"});
    const auto loss = mix::mix_loss(*m, b);
    CHECK(loss.tokens == 6);  // five bytes plus end-of-text
    CHECK(std::abs(loss.sum - 6 * lnV) < 1e-6);
    CHECK(std::abs(loss.mean_per_token - lnV) < 1e-9);
}

TEST_CASE("mix loss equals negated score totals and is additive") {
    auto m = byte_model(2);
    mix::MixBatch one, two, mixed;
    const prompt::PromptInstance a{prompt::TaskKind::selection, "abc", "def", "s#0"};
    const prompt::PromptInstance b{prompt::TaskKind::generation, "xy", "zzz top", "s#1"};
    one.instances = {a};
    two.instances = {a, a};
    mixed.instances = {a, b};
    CHECK(std::abs(mix::mix_loss(*m, two).sum - 2 * mix::mix_loss(*m, one).sum) < 1e-9);
    const double expect = -(m->score("abc", "def", true).total + m->score("xy", "zzz top", true).total);
    CHECK(std::abs(mix::mix_loss(*m, mixed).sum - expect) < 1e-9);
    CHECK_THROWS_AS(mix::mix_loss(*m, mix::MixBatch{}), UsageError);
}

TEST_CASE("loss positions cover exactly the target") {
    auto m = testutil::micro_model(3);
    const auto& tok = m->tokenizer();
    std::mt19937_64 rng(3);
    for (int i = 0; i < 100; ++i) {
        const std::string p = testutil::random_word(rng, 0, 6, "abcd ");
        const std::string t = testutil::random_word(rng, 1, 5, "abcd ");
        const auto s = m->score(p, t, true);
        auto ids = tok.encode(t);
        ids.push_back(tok.eot());
        REQUIRE(s.logprobs.size() == ids.size());
        // Oracle: one term per target position, read off the full next-token distribution.
        auto prefix = tok.encode(p);
        double sum = 0.0;
        for (std::size_t j = 0; j < ids.size(); ++j) {
            const auto dist = m->next_token_logprobs(prefix);
            CHECK(std::abs(dist[static_cast<std::size_t>(ids[j])] - s.logprobs[j]) < 1e-9);
            sum += dist[static_cast<std::size_t>(ids[j])];
            prefix.push_back(ids[j]);
        }
        CHECK(std::abs(sum - s.total) < 1e-9);
        const std::string p2 = testutil::random_word(rng, 0, 6, "abcd ");
        CHECK(m->score(p2, t, true).logprobs.size() == ids.size());
    }
}

TEST_CASE("mix stream composition") {
    auto m = byte_model(4);
    const auto v = labelled_synthetic(20);
    const auto half = mix::build_mix_stream(*m, v, 0.5, 1);
    std::size_t sel = 0;
    for (const auto& p : half.instances) sel += p.task == prompt::TaskKind::selection;
    CHECK(half.dropped_overlength == 0);
    CHECK(half.instances.size() == 40);
    CHECK(sel * 2 == half.instances.size());
    // Strict alternation keeps every prefix balanced.
    for (std::size_t i = 0; i < half.instances.size(); ++i)
        CHECK((half.instances[i].task == prompt::TaskKind::selection) == (i % 2 == 1));
    for (const auto& p : mix::build_mix_stream(*m, v, 0.0, 1).instances) CHECK(p.task == prompt::TaskKind::generation);
    for (const auto& p : mix::build_mix_stream(*m, v, 1.0, 1).instances) CHECK(p.task == prompt::TaskKind::selection);
    const auto q = mix::build_mix_stream(*m, v, 0.25, 1);
    std::size_t qs = 0;
    for (const auto& p : q.instances) qs += p.task == prompt::TaskKind::selection;
    CHECK(q.instances.size() == 27);  // all 20 generation instances plus round(20 / 3) selection instances
    CHECK(qs == 7);

    const auto small = byte_model(4, lm::InitMode::random, 64);
    const auto dropped = mix::build_mix_stream(*small, v, 0.5, 1);
    CHECK(dropped.dropped_overlength == 40);
    CHECK(dropped.instances.empty());
}

TEST_CASE("stage-1 training lowers the per-token loss and writes checkpoints") {
    lm::TinyLmConfig cfg;
    cfg.d_model = 32;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 64;
    cfg.context = 1024;
    cfg.seed = 5;
    const auto corpus = labelled_synthetic(64);
    std::vector<std::string> texts;
    for (const auto& s : corpus) texts.push_back(prompt::render_generation(s, true).prompt_text + s.gold_response);
    const auto tok = lm::Tokenizer::byte_level(lm::Tokenizer::learn_pieces(texts, 256));

    testutil::TempDir dir;
    mix::Stage1Options opt;
    opt.schedule.lr = 3e-3;
    opt.schedule.warmup_steps = 5;
    opt.schedule.epochs = 10;
    opt.schedule.batch_size = 16;
    opt.schedule.seed = 2;
    opt.checkpoint_dir = dir / "ckpt";

    lm::TinyLm model(tok, cfg);
    const auto log = mix::train_stage1(model, corpus, opt);
    CHECK(log.steps == 10 * ((mix::build_mix_stream(model, corpus, 0.5, 2).instances.size() + 15) / 16));
    CHECK(log.final_loss <= 0.7 * log.initial_loss);
    for (int e = 1; e <= 10; ++e) {
        const auto ep = dir / "ckpt" / ("epoch-" + std::to_string(e));
        REQUIRE(std::filesystem::exists(ep / "manifest.json"));
        std::ifstream in(ep / "manifest.json");
        const auto j = nlohmann::json::parse(in);
        for (const char* k : {"step", "epoch", "loss", "seed", "template_version"}) CHECK(j.contains(k));
        CHECK(j["epoch"] == e);
    }
    log.write_csv(dir / "log.csv");
    std::ifstream csv(dir / "log.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "step,lr,loss,grad_norm");
    CHECK(log.rows[0].lr == doctest::Approx(3e-3 / 5));

    // Same seed and corpus: identical initial and first-step losses.
    lm::TinyLm again(tok, cfg);
    opt.schedule.epochs = 1;
    opt.checkpoint_dir.reset();
    const auto log2 = mix::train_stage1(again, corpus, opt);
    CHECK(log2.initial_loss == log.initial_loss);
    CHECK(log2.rows[0].loss == log.rows[0].loss);
}

// ---------------------------------------------------------------------------
// Stage 2

TEST_CASE("DPO loss values") {
    CHECK(std::abs(align::dpo_loss_from_margin(0.1, 0.0) - std::log(2.0)) < 1e-12);
    CHECK(std::abs(align::dpo_loss_from_margin(0.1, 10.0) - 0.313261687518) < 1e-9);
    CHECK(std::abs(align::dpo_loss_from_margin(0.1, 10.0) - std::log1p(std::exp(-1.0))) < 1e-12);
    for (double m : {-50.0, -1.0, 0.0, 3.0, 1e4}) CHECK(std::abs(align::dpo_loss_from_margin(0.0, m) - std::log(2.0)) < 1e-12);
    CHECK(std::abs(align::dpo_loss_from_margin(0.1, -1e4) - 1000.0) < 1e-9);
    CHECK(align::dpo_loss_from_margin(0.1, 1e4) >= 0.0);
    CHECK(std::isfinite(align::dpo_loss_from_margin(1.0, -1e6)));

    const align::DpoConfig d;
    CHECK(d.beta == 0.1);
    CHECK(d.lr == 1e-6);
    CHECK(d.warmup_steps == 100);
    CHECK(d.max_steps == 30000);
}

TEST_CASE("DPO at initialization and antisymmetry") {
    auto policy = testutil::micro_model(6);
    auto ref = policy->clone_frozen();
    std::mt19937_64 rng(6);
    for (int i = 0; i < 20; ++i) {
        const auto pair = random_pair(rng, i);
        const auto st = align::dpo_loss(*policy, *ref, pair, 0.1);
        CHECK(st.margin == 0.0);
        CHECK(std::abs(st.loss - std::log(2.0)) < 1e-9);
    }
    // Move the policy away from the reference.
    for (int i = 0; i < 5; ++i) {
        const auto pair = random_pair(rng, 100 + i);
        policy->accumulate_gradient(pair.conditioning_prompt, pair.chosen, -1.0, true);
        policy->apply_gradients(0.2);
    }
    for (int i = 0; i < 20; ++i) {
        auto pair = random_pair(rng, i);
        const auto st = align::dpo_loss(*policy, *ref, pair, 0.1);
        CHECK(std::abs(st.margin - (st.delta_gold - st.delta_gen)) < 1e-12);
        CHECK(std::abs(st.loss - align::dpo_loss_from_margin(0.1, st.margin)) < 1e-9);
        std::swap(pair.chosen, pair.rejected);
        const auto sw = align::dpo_loss(*policy, *ref, pair, 0.1);
        CHECK(std::abs(sw.margin + st.margin) < 1e-9);
        CHECK(std::abs(sw.loss - align::dpo_loss_from_margin(0.1, -st.margin)) < 1e-9);
    }
}

TEST_CASE("DPO gradient matches central finite differences") {
    auto policy = testutil::micro_model(7);
    auto ref = policy->clone_frozen();
    std::mt19937_64 rng(7);
    auto p = policy->mutable_parameters();
    std::normal_distribution<double> noise(0.0, 0.3);
    for (auto& v : p) v += noise(rng);
    const double beta = 0.5, h = 1e-5;
    for (int i = 0; i < 20; ++i) {
        const auto pair = random_pair(rng, i);
        policy->zero_gradients();
        align::accumulate_dpo_gradient(*policy, *ref, {&pair}, beta);
        const std::vector<double> g(policy->gradients().begin(), policy->gradients().end());
        policy->zero_gradients();
        for (std::size_t k = 0; k < p.size(); ++k) {
            const double orig = p[k];
            p[k] = orig + h;
            const double up = align::dpo_loss(*policy, *ref, pair, beta).loss;
            p[k] = orig - h;
            const double down = align::dpo_loss(*policy, *ref, pair, beta).loss;
            p[k] = orig;
            const double fd = (up - down) / (2 * h);
            const double tol = 1e-3 * std::max(std::abs(fd), std::abs(g[k])) + 1e-8;
            if (std::abs(fd - g[k]) > tol) {
                INFO("pair " << i << " param " << k << " analytic " << g[k] << " fd " << fd);
                CHECK(std::abs(fd - g[k]) <= tol);
            }
        }
    }
}

TEST_CASE("one small SGD step does not decrease the pair's margin") {
    std::mt19937_64 rng(8);
    for (int i = 0; i < 10; ++i) {
        auto policy = testutil::micro_model(100 + i);
        auto ref = policy->clone_frozen();
        const auto pair = random_pair(rng, i);
        const double before = align::dpo_loss(*policy, *ref, pair, 0.1).margin;
        align::accumulate_dpo_gradient(*policy, *ref, {&pair}, 0.1);
        policy->apply_gradients(1e-3);
        CHECK(align::dpo_loss(*policy, *ref, pair, 0.1).margin >= before);
    }
}

TEST_CASE("pair construction") {
    const auto samples = labelled_synthetic(12);
    int attempts = 0;
    testutil::ScriptedBackend gen([&](std::string_view prompt) -> std::string {
        ++attempts;
        if (prompt.find("Person 1: hello there !.") != std::string_view::npos) return "   ";
        return "i am fine .";
    });
    const auto r = align::build_pairs(gen, samples, 16);
    CHECK(r.pairs.size() + r.dropped_empty == samples.size());
    CHECK(r.backend_failures == 0);
    for (const auto& p : r.pairs) {
        const corpus::DialogueSample* s = nullptr;
        for (const auto& c : samples)
            if (c.sample_id == p.sample_id) s = &c;
        REQUIRE(s);
        CHECK(p.chosen == s->gold_response);
        CHECK(p.rejected == "i am fine .");
        CHECK(p.conditioning_prompt == prompt::render_generation(*s, true).prompt_text);
        const std::string blind = p.gen_meta.at("blind_prompt");
        CHECK(blind == prompt::render_generation(*s, false).prompt_text);
        CHECK(blind.find("persona is described with") == std::string::npos);
        for (const auto& persona : s->profile.personas) CHECK(blind.find(persona) == std::string::npos);
        CHECK(p.gen_meta.at("checkpoint_id") == "scripted");
        CHECK(p.gen_meta.at("decode") == "greedy");
    }
    for (const auto& prompt : gen.prompts) CHECK(prompt.rfind("Please generate a response to the dialogue.", 0) == 0);

    // Deterministic backend: identical pairs across runs.
    const auto again = align::build_pairs(gen, samples, 16);
    REQUIRE(again.pairs.size() == r.pairs.size());
    for (std::size_t i = 0; i < r.pairs.size(); ++i) CHECK(again.pairs[i].to_json() == r.pairs[i].to_json());

    // First attempt fails everywhere; the retry fails for every other sample, which is then skipped.
    std::size_t sample_no = 0, calls = 0;
    bool last_failed = false;
    testutil::ScriptedBackend flaky([&](std::string_view) -> std::string {
        ++calls;
        if (!last_failed) {
            ++sample_no;
            last_failed = true;
            throw BackendError("down");
        }
        if (sample_no % 2 == 0) {
            last_failed = false;
            throw BackendError("still down");
        }
        last_failed = false;
        return "ok .";
    });
    const auto f = align::build_pairs(flaky, samples, 16);
    CHECK(calls == 2 * samples.size());
    CHECK(f.retries == samples.size());
    CHECK(f.backend_failures == samples.size() / 2);
    CHECK(f.pairs.size() == samples.size() / 2);

    testutil::TempDir dir;
    align::write_pairs(r.pairs, (dir / "pairs.jsonl").string());
    const auto back = align::read_pairs((dir / "pairs.jsonl").string());
    REQUIRE(back.size() == r.pairs.size());
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i].to_json() == r.pairs[i].to_json());
}

TEST_CASE("stage 2: zero learning rate keeps the initial policy") {
    auto policy = testutil::micro_model(9);
    std::mt19937_64 rng(9);
    std::vector<align::AlignmentPair> pairs;
    for (int i = 0; i < 16; ++i) pairs.push_back(random_pair(rng, i));
    align::DpoConfig cfg;
    cfg.lr = 0.0;
    cfg.warmup_steps = 0;
    cfg.max_steps = 20;
    cfg.eval_every = 5;
    cfg.batch_size = 4;
    ScriptedProbe probe({0.25});
    const std::string initial = policy->checkpoint_id();
    const auto res = align::train_stage2(*policy, pairs, cfg, probe);
    CHECK(res.best->checkpoint_id() == initial);
    CHECK(res.best_cscore == res.initial_cscore);
    CHECK(std::abs(*res.best_margin_mean) < 1e-12);
    CHECK(res.steps == 20);
    CHECK(probe.calls == 5);
}

TEST_CASE("stage 2: early stopping keeps the best evaluation") {
    auto policy = testutil::micro_model(10);
    std::mt19937_64 rng(10);
    std::vector<align::AlignmentPair> pairs;
    for (int i = 0; i < 16; ++i) pairs.push_back(random_pair(rng, i));
    align::DpoConfig cfg;
    cfg.lr = 0.05;
    cfg.warmup_steps = 0;
    cfg.max_steps = 1000;
    cfg.eval_every = 2;
    cfg.patience = 3;
    cfg.batch_size = 4;
    ScriptedProbe probe({0.1, 0.5, 0.3, 0.2, 0.4, 0.9});
    const auto res = align::train_stage2(*policy, pairs, cfg, probe);
    CHECK(res.early_stopped);
    CHECK(probe.calls == 5);
    CHECK(res.best_step == 2);
    CHECK(res.best_cscore == 0.5);
    CHECK(res.best->checkpoint_id() == probe.ids[1]);
    CHECK(res.steps == 8);
    CHECK(res.best_cscore >= res.initial_cscore);
}

TEST_CASE("stage 2: margins grow on synthetic pairs and the reference stays fixed") {
    auto policy = testutil::micro_model(11);
    auto before = policy->clone_frozen();
    std::mt19937_64 rng(11);
    std::vector<align::AlignmentPair> pairs;
    for (int i = 0; i < 64; ++i) pairs.push_back(random_pair(rng, i));
    align::DpoConfig cfg;
    cfg.lr = 0.01;
    cfg.warmup_steps = 10;
    cfg.max_steps = 200;
    cfg.eval_every = 50;
    cfg.batch_size = 8;
    ScriptedProbe probe({0.0});
    const auto res = align::train_stage2(*policy, pairs, cfg, probe);
    CHECK(res.steps == 200);
    CHECK(res.best_step == 200);
    REQUIRE(res.best_margin_mean.has_value());
    CHECK(*res.best_margin_mean > 0.0);
    // The reference is the step-0 snapshot, untouched by training.
    double margin = 0.0;
    for (const auto& p : pairs) margin += align::dpo_loss(*res.best, *before, p, cfg.beta).margin;
    CHECK(std::abs(margin / pairs.size() - *res.best_margin_mean) < 1e-9);

    testutil::TempDir dir;
    res.write_csv(dir / "log.csv");
    std::ifstream csv(dir / "log.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "step,lr,loss,grad_norm,margin_mean,val_cscore");
}

TEST_CASE("stage 2 with next-token loss logs no margins") {
    auto policy = byte_model(12);
    const auto samples = labelled_synthetic(8);
    align::DpoConfig cfg;
    cfg.lr = 1e-2;
    cfg.warmup_steps = 0;
    cfg.max_steps = 6;
    cfg.eval_every = 3;
    cfg.batch_size = 4;
    ScriptedProbe probe({0.0});
    const auto res = align::train_stage2_ntp(*policy, samples, cfg, probe);
    CHECK_FALSE(res.best_margin_mean.has_value());
    REQUIRE(res.rows.size() == 7);
    for (const auto& r : res.rows) CHECK_FALSE(r.margin_mean.has_value());
    CHECK(res.rows.back().loss < res.rows[1].loss);
}

TEST_CASE("stage 2 rejects frozen policies and empty pair sets") {
    auto policy = testutil::micro_model(13);
    ScriptedProbe probe({0.0});
    align::DpoConfig cfg;
    CHECK_THROWS_AS(align::train_stage2(*policy, {}, cfg, probe), UsageError);
    auto frozen = policy->clone_frozen();
    std::mt19937_64 rng(13);
    CHECK_THROWS_AS(align::train_stage2(*frozen, {random_pair(rng, 0)}, cfg, probe), UsageError);
    cfg.beta = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
