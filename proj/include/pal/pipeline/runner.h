#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "pal/lm/backend.h"
#include "pal/nli.h"
#include "pal/pipeline/config.h"

namespace pal::pipeline {

enum class Stage { prepare, train_mix, build_pairs, train_align, generate, evaluate };

std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);

struct RunOptions {
    std::string tag;  // empty: UTC timestamp
    bool force = false;
    std::ostream* log = nullptr;
};

// <config output.root>, else $PAL_HOME, else ./pal_runs.
std::filesystem::path default_root(const RunConfig& cfg);

// Fresh model for stage 1: tokenizer pieces learned from the rendered training prompts.
std::unique_ptr<lm::Backend> make_base_backend(const RunConfig& cfg, const std::vector<corpus::DialogueSample>& train);
std::unique_ptr<nli::NliScorer> make_nli(const RunConfig& cfg);

// Exclusive writer lock on a run root, released on destruction. A lock left behind by a
// dead process is taken over.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& root);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
};

class Pipeline {
public:
    Pipeline(RunConfig cfg, RunOptions opts);

    // A stage name or "all".
    void run(std::string_view command);
    void run_stage(Stage s);
    // Stages `all` executes under the configured ablations.
    std::vector<Stage> plan_all() const;

    const std::filesystem::path& root() const { return root_; }
    const std::string& tag() const { return tag_; }
    std::filesystem::path stage_dir(Stage s) const;
    std::filesystem::path latest_dir(Stage s) const;

private:
    struct Input {
        Stage stage;
        std::filesystem::path dir;
        nlohmann::json manifest;
    };

    void execute(Stage s);
    Input require(Stage upstream, Stage consumer);
    Stage model_source() const;
    std::unique_ptr<lm::Backend> load_model(const Input& in) const;
    std::vector<corpus::DialogueSample> load_split(const Input& prepared, corpus::Split split,
                                                   std::size_t max_samples) const;

    void prepare(const std::filesystem::path& out, nlohmann::json& counters);
    void train_mix(const std::filesystem::path& out, nlohmann::json& counters);
    void build_pairs(const std::filesystem::path& out, nlohmann::json& counters);
    void train_align(const std::filesystem::path& out, nlohmann::json& counters);
    void generate(const std::filesystem::path& out, nlohmann::json& counters);
    void evaluate(const std::filesystem::path& out, nlohmann::json& counters);

    void say(const std::string& line) const;

    RunConfig cfg_;
    RunOptions opts_;
    std::filesystem::path root_;
    std::string tag_;
    std::vector<nlohmann::json> inputs_;
};

}  // namespace pal::pipeline
