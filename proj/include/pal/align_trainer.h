#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pal/corpus.h"
#include "pal/lm/backend.h"
#include "pal/nli.h"

namespace pal::align {

struct AlignmentPair {
    std::string sample_id;
    std::string conditioning_prompt;  // persona-inclusive generation prompt
    std::string chosen;               // gold response
    std::string rejected;             // generated from the persona-blind prompt
    nlohmann::json gen_meta = nlohmann::json::object();

    nlohmann::json to_json() const;
    static AlignmentPair from_json(const nlohmann::json& j);
};

void write_pairs(const std::vector<AlignmentPair>& pairs, const std::string& path);
std::vector<AlignmentPair> read_pairs(const std::string& path);

struct BuildPairsResult {
    std::vector<AlignmentPair> pairs;
    std::size_t dropped_empty = 0;
    std::size_t backend_failures = 0;
    std::size_t retries = 0;
};

// Generates the rejected response for every sample from a frozen clone of `stage1`.
BuildPairsResult build_pairs(const lm::Backend& stage1, const std::vector<corpus::DialogueSample>& samples,
                             int max_new = lm::kDefaultMaxNew);

struct DpoConfig {
    double beta = 0.1;
    double lr = 1e-6;
    int warmup_steps = 100;
    int max_steps = 30000;
    int eval_every = 500;
    int patience = 5;
    int batch_size = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

struct DpoStepStats {
    double delta_gold = 0.0;
    double delta_gen = 0.0;
    double margin = 0.0;
    double loss = 0.0;
};

// -ln sigmoid(beta * margin), evaluated without overflow.
double dpo_loss_from_margin(double beta, double margin);

// Raw summed log-ratios (no length normalization); responses are scored with end-of-text.
DpoStepStats dpo_loss(const lm::Backend& policy, const lm::Backend& reference, const AlignmentPair& pair, double beta);

// Adds d(mean DPO loss over `pairs`)/d(theta) to the policy's gradient buffer. Reference
// totals may be supplied to skip re-scoring. Returns per-pair statistics.
std::vector<DpoStepStats> accumulate_dpo_gradient(lm::Backend& policy, const lm::Backend& reference,
                                                  const std::vector<const AlignmentPair*>& pairs, double beta,
                                                  const std::vector<std::pair<double, double>>* reference_totals = nullptr);

// Validation hook: C.score of a frozen snapshot on the held-out split.
class CScoreProbe {
public:
    virtual ~CScoreProbe() = default;
    virtual double evaluate(const lm::Backend& snapshot) = 0;
};

// Select-then-Generate on the validation samples, scored with the given NLI backend.
class SelectThenGenerateProbe final : public CScoreProbe {
public:
    SelectThenGenerateProbe(std::vector<corpus::DialogueSample> samples, const nli::NliScorer& nli, int max_new);
    double evaluate(const lm::Backend& snapshot) override;

private:
    std::vector<corpus::DialogueSample> samples_;
    const nli::NliScorer& nli_;
    int max_new_;
};

struct Stage2LogRow {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
    std::optional<double> margin_mean;  // absent for NTP training
    std::optional<double> val_cscore;   // present on evaluation steps
};

struct Stage2Result {
    std::unique_ptr<lm::Backend> best;  // frozen snapshot with the best validation C.score
    std::vector<Stage2LogRow> rows;
    std::size_t best_step = 0;
    double initial_cscore = 0.0;
    double best_cscore = 0.0;
    std::optional<double> best_margin_mean;  // mean margin over all training pairs at `best`
    std::size_t steps = 0;
    std::size_t skipped_overlength = 0;
    bool early_stopped = false;
    bool aborted = false;

    void write_csv(const std::filesystem::path& path) const;
};

// DPO against a frozen clone of the incoming policy. Evaluates at step 0 and every
// eval_every steps; stops at max_steps or after `patience` evaluations without a strictly
// better C.score. Among equally good evaluations the latest is kept.
Stage2Result train_stage2(lm::Backend& policy, const std::vector<AlignmentPair>& pairs, const DpoConfig& cfg,
                          CScoreProbe& validator);

// Ablation: same schedule and early stopping, but next-token loss on the gold responses
// given the persona-inclusive prompt instead of preference pairs.
Stage2Result train_stage2_ntp(lm::Backend& policy, const std::vector<corpus::DialogueSample>& samples,
                              const DpoConfig& cfg, CScoreProbe& validator);

}  // namespace pal::align
