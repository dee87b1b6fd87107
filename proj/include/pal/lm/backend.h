#pragma once

#include <cstddef>
#include <filesystem>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace pal::lm {

enum class BackendKind { tiny_builtin, external_adapter };

// Per-token natural-log probabilities of a target continuation.
struct ScoredContinuation {
    std::vector<double> logprobs;
    double total = 0.0;
};

struct StepStats {
    double grad_norm = 0.0;
    std::size_t step = 0;
};

inline constexpr int kDefaultMaxNew = 64;

// The contract every training stage and inference strategy runs against.
//
// Scoring and generation are const and safe to call concurrently on a frozen
// handle. Training methods accumulate d(sum_i weight_i * total_i)/d(theta) and
// apply it as a descent step; they throw UsageError on frozen handles.
class Backend {
public:
    virtual ~Backend() = default;

    virtual BackendKind kind() const = 0;
    virtual bool frozen() const = 0;
    // Content-derived identifier of the current parameters.
    virtual std::string checkpoint_id() const = 0;

    // logprobs[t] = log p(target_t | prompt, target_<t). With `terminate`, the
    // end-of-text token is scored as one extra final entry.
    virtual ScoredContinuation score(std::string_view prompt, std::string_view target,
                                     bool terminate = false) const = 0;

    // Greedy decoding, stopping at end-of-text or after max_new tokens.
    virtual std::string generate(std::string_view prompt, int max_new = kDefaultMaxNew) const = 0;

    virtual std::unique_ptr<Backend> clone_frozen() const = 0;

    virtual ScoredContinuation accumulate_gradient(std::string_view prompt, std::string_view target, double weight,
                                                   bool terminate = false);
    virtual StepStats apply_gradients(double lr);
    virtual void zero_gradients();

    // True when prompt + target (+ end-of-text) can be scored without exceeding the context.
    virtual bool fits(std::string_view prompt, std::string_view target, bool terminate = false) const;
    // Number of scored positions for `target` (plus one with `terminate`).
    virtual std::size_t target_length(std::string_view target, bool terminate = false) const;

    virtual void save(const std::filesystem::path& dir) const;

    // Prompts left-truncated during generation so far.
    virtual std::size_t truncations() const { return 0; }
};

}  // namespace pal::lm
