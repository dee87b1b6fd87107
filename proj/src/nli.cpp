#include "pal/nli.h"

#include <algorithm>

#include "pal/errors.h"
#include "pal/lm/line_rpc.h"
#include "pal/text.h"

namespace pal::nli {

std::string_view to_string(NliLabel label) {
    switch (label) {
        case NliLabel::entail: return "entail";
        case NliLabel::neutral: return "neutral";
        case NliLabel::contradict: return "contradict";
    }
    return "?";
}

NliLabel parse_label(std::string_view s) {
    if (s == "entail" || s == "entailment") return NliLabel::entail;
    if (s == "neutral") return NliLabel::neutral;
    if (s == "contradict" || s == "contradiction") return NliLabel::contradict;
    throw BackendError("unknown NLI label '" + std::string(s) + "'");
}

std::set<std::string> StubNliScorer::default_negation_markers() {
    return {"not", "no", "never", "don't", "dont", "doesn't", "didn't", "isn't", "aren't", "can't", "cannot", "won't"};
}

StubNliScorer::StubNliScorer() : negations_(default_negation_markers()) {}

StubNliScorer::StubNliScorer(std::set<std::string> negation_markers) : negations_(std::move(negation_markers)) {}

NliLabel StubNliScorer::classify(std::string_view persona, std::string_view response) const {
    std::vector<std::string> persona_words;
    for (auto& w : text::content_words(persona)) {
        if (!negations_.count(w)) persona_words.push_back(std::move(w));
    }
    if (persona_words.empty()) return NliLabel::neutral;
    const std::set<std::string> persona_set(persona_words.begin(), persona_words.end());

    const auto tokens = text::word_tokens(response);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!negations_.count(tokens[i])) continue;
        if ((i > 0 && persona_set.count(tokens[i - 1])) || (i + 1 < tokens.size() && persona_set.count(tokens[i + 1]))) {
            return NliLabel::contradict;
        }
    }
    const std::set<std::string> response_set(tokens.begin(), tokens.end());
    const bool covered = std::all_of(persona_set.begin(), persona_set.end(),
                                     [&](const std::string& w) { return response_set.count(w) > 0; });
    return covered ? NliLabel::entail : NliLabel::neutral;
}

ExternalNliClient::ExternalNliClient(std::shared_ptr<rpc::LineRpcClient> client) : client_(std::move(client)) {
    if (!client_) throw UsageError("external NLI scorer needs an RPC client");
}

NliLabel ExternalNliClient::classify(std::string_view persona, std::string_view response) const {
    const nlohmann::json req{{"op", "nli"}, {"premise", persona}, {"hypothesis", response}};
    for (int attempt = 0; attempt < 2; ++attempt) {
        try {
            const auto reply = client_->call(req);
            if (reply.contains("label") && reply.at("label").is_string()) {
                return parse_label(reply.at("label").get<std::string>());
            }
        } catch (const BackendError&) {
        }
    }
    ++degraded_;
    return NliLabel::neutral;
}

}  // namespace pal::nli
