#pragma once

#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pal/corpus.h"
#include "pal/inference.h"
#include "pal/nli.h"

namespace pal::eval {

// English: lowercase, whitespace-split. Chinese: one token per code point.
enum class TokenMode { words, characters };

TokenMode token_mode_for(corpus::Dialect d);
std::vector<std::string> metric_tokens(std::string_view s, TokenMode mode);

// Corpus-level modified n-gram precision for order exactly n (1 or 2), times the brevity
// penalty. This is the individual order-n score, not the cumulative geometric mean.
double bleu_n(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references, int n,
              TokenMode mode = TokenMode::words);

enum class RougeVariant { f1, recall_weighted };

// Mean per-sample LCS F-measure. The recall-weighted variant uses beta = 1.2.
double rouge_l(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references,
               TokenMode mode = TokenMode::words, RougeVariant variant = RougeVariant::f1);

// Shannon entropy (nats) of the corpus unigram distribution. Returns 0 and sets
// *all_empty when no hypothesis has any token.
double entropy(const std::vector<std::string>& hypotheses, TokenMode mode = TokenMode::words,
               bool* all_empty = nullptr);

struct CScoreResult {
    double mean = 0.0;
    std::vector<int> per_sample;
    std::size_t degraded_calls = 0;
};

// Per sample, the sum over personas of NLI(persona, response) in {-1, 0, +1}; records are
// matched to samples by sample_id.
CScoreResult cscore(const std::vector<inference::GenerationRecord>& records,
                    const std::vector<corpus::DialogueSample>& samples, const nli::NliScorer& nli);

struct PerSample {
    std::string sample_id;
    double bleu1 = 0.0;
    double bleu2 = 0.0;
    double rougeL = 0.0;
    int cscore = 0;
};

struct MetricReport {
    double bleu1 = 0.0;
    double bleu2 = 0.0;
    double rougeL = 0.0;
    double entropy = 0.0;
    double cscore = 0.0;
    std::size_t n_samples = 0;
    std::vector<PerSample> per_sample;
    nlohmann::json counters = nlohmann::json::object();
    std::string config_digest;

    nlohmann::json to_json() const;
    // Columns: BLEU-1, BLEU-2, ROUGE-L (x100), Entropy, C.score.
    std::string table(std::string_view label) const;
};

struct EvalOptions {
    TokenMode mode = TokenMode::words;
    RougeVariant rouge = RougeVariant::f1;
    std::string config_digest;
};

MetricReport evaluate_run(const std::vector<inference::GenerationRecord>& records,
                          const std::vector<corpus::DialogueSample>& samples, const nli::NliScorer& nli,
                          const EvalOptions& options = {});

}  // namespace pal::eval
