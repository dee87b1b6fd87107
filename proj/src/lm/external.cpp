#include "pal/lm/external.h"

#include "pal/errors.h"
#include "pal/lm/line_rpc.h"

namespace pal::lm {

ExternalBackend::ExternalBackend(std::shared_ptr<rpc::LineRpcClient> client, bool frozen)
    : client_(std::move(client)), frozen_(frozen) {
    if (!client_) throw UsageError("external backend needs an RPC client");
}

std::string ExternalBackend::checkpoint_id() const { return "external:" + client_->endpoint(); }

ScoredContinuation ExternalBackend::score(std::string_view prompt, std::string_view target, bool terminate) const {
    nlohmann::json req{{"op", "score"}, {"prompt", prompt}, {"target", target}, {"max_new", 0}};
    if (terminate) req["terminate"] = true;
    const auto reply = client_->call(req);
    if (!reply.contains("logprobs") || !reply.at("logprobs").is_array()) {
        throw BackendError("external score reply has no \"logprobs\" list");
    }
    ScoredContinuation out;
    for (const auto& v : reply.at("logprobs")) {
        if (!v.is_number()) throw BackendError("external score reply has a non-numeric logprob");
        const double lp = v.get<double>();
        if (lp > 0.0) throw BackendError("external score reply has a positive logprob");
        out.logprobs.push_back(lp);
        out.total += lp;
    }
    return out;
}

std::string ExternalBackend::generate(std::string_view prompt, int max_new) const {
    if (max_new < 1) throw UsageError("generate: max_new must be at least 1");
    const auto reply = client_->call({{"op", "generate"}, {"prompt", prompt}, {"target", ""}, {"max_new", max_new}});
    if (!reply.contains("text") || !reply.at("text").is_string()) {
        throw BackendError("external generate reply has no \"text\" string");
    }
    return reply.at("text").get<std::string>();
}

std::unique_ptr<Backend> ExternalBackend::clone_frozen() const {
    return std::make_unique<ExternalBackend>(client_, true);
}

}  // namespace pal::lm
