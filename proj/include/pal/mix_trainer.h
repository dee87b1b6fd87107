#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pal/corpus.h"
#include "pal/lm/backend.h"
#include "pal/prompt.h"

namespace pal::mix {

struct TrainSchedule {
    double lr = 2e-5;
    int warmup_steps = 100;
    int epochs = 10;
    int batch_size = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

// Linear warm-up to `lr` over the first warmup_steps (1-based step), constant afterwards.
double scheduled_lr(double lr, int warmup_steps, std::size_t step);

struct MixBatch {
    std::vector<prompt::PromptInstance> instances;
    double mix_ratio = 0.5;
};

struct MixLoss {
    double sum = 0.0;             // -sum_k sum_t log P(s^k_t | m_k, s^k_<t)
    double mean_per_token = 0.0;  // sum / tokens
    std::size_t tokens = 0;
};

// Target sequences include the end-of-text token. Throws UsageError on an empty batch.
MixLoss mix_loss(const lm::Backend& backend, const MixBatch& batch);

struct MixStream {
    std::vector<prompt::PromptInstance> instances;
    std::size_t dropped_overlength = 0;
};

// One epoch of interleaved SELECTION/GENERATION instances in which a fraction `mix_ratio`
// are SELECTION. At 0.5 every sample contributes both instances; at 0 or 1 only one kind.
MixStream build_mix_stream(const lm::Backend& backend, const std::vector<corpus::DialogueSample>& samples,
                           double mix_ratio, std::uint64_t seed);

struct TrainLogRow {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;  // per-target-token mean over the batch
    double loss_sum = 0.0;
    double grad_norm = 0.0;
};

struct Stage1Log {
    std::vector<TrainLogRow> rows;
    double initial_loss = 0.0;  // per-token mean over the first epoch's stream before any update
    double final_loss = 0.0;    // same stream after training
    std::size_t dropped_overlength = 0;
    std::size_t steps = 0;

    void write_csv(const std::filesystem::path& path) const;
};

struct Stage1Options {
    TrainSchedule schedule;
    double mix_ratio = 0.5;
    // When set, each epoch's parameters are saved to <dir>/epoch-<n>/ with a manifest.
    std::optional<std::filesystem::path> checkpoint_dir;
};

// Throws TrainingAborted on a non-finite loss; checkpoints already written are kept.
Stage1Log train_stage1(lm::Backend& model, const std::vector<corpus::DialogueSample>& train,
                       const Stage1Options& options);

}  // namespace pal::mix
