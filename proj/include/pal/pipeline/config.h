#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "pal/align_trainer.h"
#include "pal/corpus.h"
#include "pal/eval.h"
#include "pal/inference.h"
#include "pal/lm/tiny_lm.h"
#include "pal/mix_trainer.h"

namespace pal::pipeline {

enum class Ablation { no_mix, no_pa, only_dg, only_ps, no_pc, infer_random, infer_notselect };

std::string_view to_string(Ablation a);
// Accepts "no-mix", "no-pa", "only-dg", "only-ps", "no-pc", "infer=random", "infer=notselect".
Ablation parse_ablation(std::string_view s);

struct DataConfig {
    std::string source = "synthetic";  // "synthetic" or "files"
    std::size_t synthetic_samples = 200;
    std::uint64_t synthetic_seed = 7;
    std::map<std::string, std::string> files;  // part name -> path
    corpus::Dialect dialect = corpus::Dialect::original;
};

struct BackendConfig {
    std::string kind = "tiny";  // "tiny" or "external"
    std::string endpoint;
    int timeout_s = 30;
    std::size_t vocab_pieces = 512;
    lm::TinyLmConfig tiny;
};

struct ValidationConfig {
    corpus::Split split = corpus::Split::valid2;
    std::size_t max_samples = 0;  // 0 keeps the whole split
};

struct InferenceConfig {
    inference::StrategyKind strategy = inference::StrategyKind::select_then_generate;
    std::uint64_t seed = 0;
    int max_new = lm::kDefaultMaxNew;
    corpus::Split split = corpus::Split::test;
    std::size_t max_samples = 0;
};

struct NliConfig {
    std::string scorer = "stub";  // "stub" or "external"
    std::string endpoint;
    int timeout_s = 30;
};

struct RunConfig {
    DataConfig data;
    corpus::SplitConfig split;
    std::uint64_t split_seed = 42;
    std::string relevance_scorer = "lexical";  // "lexical" or "nli"
    double relevance_threshold = corpus::kDefaultRelevanceThreshold;
    BackendConfig backend;
    mix::Stage1Options stage1;
    align::DpoConfig dpo;
    corpus::Split pairs_split = corpus::Split::valid1;  // stage-2 training data
    ValidationConfig validation;
    InferenceConfig inference;
    NliConfig nli;
    eval::RougeVariant rouge = eval::RougeVariant::f1;
    std::set<Ablation> ablations;
    std::string output_root;

    // Fully resolved configuration; ablations already applied to the fields they touch.
    nlohmann::json resolved;

    bool has(Ablation a) const { return ablations.count(a) != 0; }
    // sha256 of the canonical resolved form, excluding the output section.
    std::string digest() const;
};

nlohmann::json default_config_json();

// Defaults <- file <- dotted overrides ("dpo.beta=0.1") <- ablation flags. All field-level
// problems are collected into one ConfigError, one per line. Conflicting ablations raise
// UsageError.
RunConfig resolve_config(const nlohmann::json& file, const std::vector<std::string>& overrides = {},
                         const std::vector<std::string>& ablations = {});

nlohmann::json load_config_file(const std::string& path);

}  // namespace pal::pipeline
