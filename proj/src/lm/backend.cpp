#include "pal/lm/backend.h"

#include "pal/errors.h"

namespace pal::lm {

ScoredContinuation Backend::accumulate_gradient(std::string_view, std::string_view, double, bool) {
    throw UsageError("this backend does not support training");
}

StepStats Backend::apply_gradients(double) { throw UsageError("this backend does not support training"); }

void Backend::zero_gradients() {}

bool Backend::fits(std::string_view, std::string_view, bool) const { return true; }

std::size_t Backend::target_length(std::string_view, bool) const {
    throw UsageError("this backend does not expose token counts");
}

void Backend::save(const std::filesystem::path&) const {
    throw UsageError("this backend cannot be saved locally");
}

}  // namespace pal::lm
