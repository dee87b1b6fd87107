#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pal/lm/backend.h"
#include "pal/lm/tokenizer.h"

namespace pal::lm {

enum class InitMode { random, uniform };
// learned: absolute position embeddings. alibi: no position table; each head adds a fixed
// linear distance penalty to its attention scores.
enum class PositionMode { learned, alibi };
enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double max_grad_norm = 0.0;  // 0 disables clipping
};

struct TinyLmConfig {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 256;
    int context = 256;
    std::uint64_t seed = 0;
    InitMode init = InitMode::random;
    PositionMode positions = PositionMode::learned;
    double init_std = 0.02;
    OptimizerConfig optimizer;

    nlohmann::json to_json() const;
    static TinyLmConfig from_json(const nlohmann::json& j);
};

// Pre-LayerNorm decoder-only transformer with learned positions and an untied output head,
// trained by hand-written backprop in double precision. Every sequence is prefixed with the
// end-of-text token acting as BOS, so the first target token is always conditioned on something.
class TinyLm final : public Backend {
public:
    TinyLm(Tokenizer tokenizer, TinyLmConfig config);

    BackendKind kind() const override { return BackendKind::tiny_builtin; }
    bool frozen() const override { return frozen_; }
    std::string checkpoint_id() const override;

    ScoredContinuation score(std::string_view prompt, std::string_view target, bool terminate = false) const override;
    std::string generate(std::string_view prompt, int max_new = kDefaultMaxNew) const override;
    std::unique_ptr<Backend> clone_frozen() const override;

    ScoredContinuation accumulate_gradient(std::string_view prompt, std::string_view target, double weight,
                                           bool terminate = false) override;
    StepStats apply_gradients(double lr) override;
    void zero_gradients() override;
    std::size_t truncations() const override { return truncations_.load(); }
    bool fits(std::string_view prompt, std::string_view target, bool terminate = false) const override;
    std::size_t target_length(std::string_view target, bool terminate = false) const override;

    // Token-level surface.
    ScoredContinuation score_tokens(const TokenSequence& prompt, const TokenSequence& target) const;
    ScoredContinuation accumulate_gradient_tokens(const TokenSequence& prompt, const TokenSequence& target,
                                                  double weight);
    TokenSequence generate_tokens(const TokenSequence& prompt, int max_new, bool stop_at_eot = true) const;
    // Log-probabilities of the next token after BOS + prefix.
    std::vector<double> next_token_logprobs(const TokenSequence& prefix) const;

    const Tokenizer& tokenizer() const { return tokenizer_; }
    const TinyLmConfig& config() const { return config_; }
    std::size_t vocab_size() const { return tokenizer_.vocab_size(); }
    std::size_t parameter_count() const { return params_.size(); }

    std::span<const double> parameters() const { return params_; }
    // Throws UsageError on a frozen handle.
    std::span<double> mutable_parameters();
    std::span<const double> gradients() const { return grads_; }
    std::size_t steps_taken() const { return step_; }

    void save(const std::filesystem::path& dir) const override;
    static std::unique_ptr<TinyLm> load(const std::filesystem::path& dir);

    TinyLm(const TinyLm& other);
    TinyLm& operator=(const TinyLm&) = delete;

private:
    struct LayerOffsets {
        std::size_t ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2;
    };
    struct Offsets {
        std::size_t tok_emb = 0, pos_emb = 0;
        std::vector<LayerOffsets> layers;
        std::size_t lnf_g = 0, lnf_b = 0, w_out = 0, b_out = 0;
        std::size_t total = 0;
    };
    struct ForwardCache;

    void layout();
    void initialize();
    void require_trainable(const char* what) const;
    TokenSequence with_bos(const TokenSequence& prompt, const TokenSequence& target) const;
    void forward(const TokenSequence& input, ForwardCache& cache) const;
    // Fills one log-softmax row per requested position.
    void output_logprobs(const ForwardCache& cache, std::span<const std::size_t> positions,
                                        std::vector<double>& logprob_rows) const;
    void backward(const TokenSequence& input, const ForwardCache& cache, std::span<const std::size_t> positions,
                  const std::vector<double>& dlogits);
    TokenSequence encode_target(std::string_view target, bool terminate) const;

    Tokenizer tokenizer_;
    TinyLmConfig config_;
    Offsets off_;
    std::vector<double> params_;
    std::vector<double> grads_;
    std::vector<double> adam_m_;
    std::vector<double> adam_v_;
    std::size_t step_ = 0;
    bool frozen_ = false;
    mutable std::atomic<std::size_t> truncations_{0};
};

}  // namespace pal::lm
