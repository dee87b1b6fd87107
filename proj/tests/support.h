#pragma once

#include <unistd.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "pal/corpus.h"
#include "pal/errors.h"
#include "pal/lm/backend.h"
#include "pal/lm/tiny_lm.h"

namespace testutil {

using pal::corpus::DialogueSample;
using pal::corpus::DialogueTurn;
using pal::corpus::Speaker;

inline DialogueSample make_sample(std::string id, std::vector<std::string> personas,
                                  std::vector<std::string> turns, std::string gold) {
    DialogueSample s;
    s.sample_id = std::move(id);
    s.profile.user_id = "u";
    s.profile.personas = std::move(personas);
    for (std::size_t i = 0; i < turns.size(); ++i)
        s.context.push_back({i % 2 == 0 ? Speaker::partner : Speaker::self, turns[i]});
    s.gold_response = std::move(gold);
    return s;
}

// Scripted backend: generation is a pure function of the prompt; every call is counted.
class ScriptedBackend final : public pal::lm::Backend {
public:
    using GenerateFn = std::function<std::string(std::string_view prompt)>;

    explicit ScriptedBackend(GenerateFn fn, std::shared_ptr<std::atomic<int>> calls = nullptr)
        : fn_(std::move(fn)), calls_(calls ? std::move(calls) : std::make_shared<std::atomic<int>>(0)) {}

    pal::lm::BackendKind kind() const override { return pal::lm::BackendKind::external_adapter; }
    bool frozen() const override { return true; }
    std::string checkpoint_id() const override { return "scripted"; }
    pal::lm::ScoredContinuation score(std::string_view, std::string_view target, bool terminate) const override {
        pal::lm::ScoredContinuation s;
        for (std::size_t i = 0; i < target.size() + (terminate ? 1 : 0); ++i) {
            s.logprobs.push_back(-1.0);
            s.total -= 1.0;
        }
        return s;
    }
    std::string generate(std::string_view prompt, int) const override {
        ++*calls_;
        prompts.push_back(std::string(prompt));
        return fn_(prompt);
    }
    std::unique_ptr<pal::lm::Backend> clone_frozen() const override {
        return std::make_unique<ScriptedBackend>(fn_, calls_);
    }

    int calls() const { return calls_->load(); }
    mutable std::vector<std::string> prompts;

private:
    GenerateFn fn_;
    std::shared_ptr<std::atomic<int>> calls_;
};

// A tiny transformer with well under 1k parameters over a small alphabet.
inline std::unique_ptr<pal::lm::TinyLm> micro_model(std::uint64_t seed = 1, double init_std = 0.5,
                                                   pal::lm::PositionMode positions = pal::lm::PositionMode::learned) {
    pal::lm::TinyLmConfig cfg;
    cfg.d_model = 4;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 8;
    cfg.context = 16;
    cfg.seed = seed;
    cfg.init_std = init_std;
    cfg.positions = positions;
    cfg.optimizer.kind = pal::lm::OptimizerKind::sgd;
    return std::make_unique<pal::lm::TinyLm>(pal::lm::Tokenizer::alphabet("abcd "), cfg);
}

inline std::string random_word(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len,
                               const std::string& alphabet = "abcd") {
    const std::size_t n = min_len + rng() % (max_len - min_len + 1);
    std::string s;
    for (std::size_t i = 0; i < n; ++i) s += alphabet[rng() % alphabet.size()];
    return s;
}

class TempDir {
public:
    TempDir() {
        std::string tmpl = (std::filesystem::temp_directory_path() / "pal-test-XXXXXX").string();
        if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
        path_ = tmpl;
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

}  // namespace testutil
