#pragma once

#include <atomic>
#include <memory>
#include <set>
#include <string>
#include <string_view>

namespace pal::rpc {
class LineRpcClient;
}

namespace pal::nli {

enum class NliLabel : int { contradict = -1, neutral = 0, entail = 1 };

std::string_view to_string(NliLabel label);
NliLabel parse_label(std::string_view s);

// Three-way classifier over (premise = persona sentence, hypothesis = response).
class NliScorer {
public:
    virtual ~NliScorer() = default;
    virtual NliLabel classify(std::string_view persona, std::string_view response) const = 0;
    virtual std::string name() const = 0;
    // Calls that could not be answered and were scored NEUTRAL instead.
    virtual std::size_t degraded_calls() const { return 0; }
};

// Deterministic rule-based stand-in for a trained NLI model.
//   CONTRADICT if a negation marker sits next to one of the persona's content words,
//   ENTAIL if every persona content word occurs in the response,
//   NEUTRAL otherwise.
// Contradiction is checked first. Punctuation tokens break adjacency.
class StubNliScorer final : public NliScorer {
public:
    StubNliScorer();
    explicit StubNliScorer(std::set<std::string> negation_markers);

    NliLabel classify(std::string_view persona, std::string_view response) const override;
    std::string name() const override { return "stub_rules"; }
    const std::set<std::string>& negation_markers() const { return negations_; }

    static std::set<std::string> default_negation_markers();

private:
    std::set<std::string> negations_;
};

// Speaks {"op":"nli","premise":...,"hypothesis":...} -> {"label":"entail"|"neutral"|"contradict"}.
// A failed call is retried once, then scored NEUTRAL and counted.
class ExternalNliClient final : public NliScorer {
public:
    explicit ExternalNliClient(std::shared_ptr<rpc::LineRpcClient> client);

    NliLabel classify(std::string_view persona, std::string_view response) const override;
    std::string name() const override { return "external_client"; }
    std::size_t degraded_calls() const override { return degraded_.load(); }

private:
    std::shared_ptr<rpc::LineRpcClient> client_;
    mutable std::atomic<std::size_t> degraded_{0};
};

}  // namespace pal::nli
