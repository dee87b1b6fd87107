#pragma once

#include <memory>
#include <string>

#include "pal/lm/backend.h"

namespace pal::rpc {
class LineRpcClient;
}

namespace pal::lm {

// Forwards score/generate to an out-of-process model over the line-JSON protocol:
//   {"op":"score","prompt":..,"target":..,"max_new":0}    -> {"logprobs":[...]}
//   {"op":"generate","prompt":..,"target":"","max_new":n} -> {"text":"..."}
// Training is not exposed through this adapter; external models are fine-tuned by their host.
class ExternalBackend final : public Backend {
public:
    explicit ExternalBackend(std::shared_ptr<rpc::LineRpcClient> client, bool frozen = false);

    BackendKind kind() const override { return BackendKind::external_adapter; }
    bool frozen() const override { return frozen_; }
    std::string checkpoint_id() const override;

    ScoredContinuation score(std::string_view prompt, std::string_view target, bool terminate = false) const override;
    std::string generate(std::string_view prompt, int max_new = kDefaultMaxNew) const override;
    std::unique_ptr<Backend> clone_frozen() const override;

private:
    std::shared_ptr<rpc::LineRpcClient> client_;
    bool frozen_;
};

}  // namespace pal::lm
