#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pal/corpus.h"
#include "pal/lm/backend.h"

namespace pal::inference {

enum class StrategyKind { select_then_generate, random_select, not_select };

std::string_view to_string(StrategyKind k);
StrategyKind parse_strategy(std::string_view s);

struct InferenceStrategy {
    StrategyKind kind = StrategyKind::select_then_generate;
    std::uint64_t seed = 0;  // RANDOM_SELECT only
};

struct GenerationRecord {
    std::string sample_id;
    StrategyKind strategy = StrategyKind::select_then_generate;
    std::optional<std::string> selected_persona;
    std::string response;
    std::string prompt_used;
    bool failed = false;

    // Wire form: {sample_id, strategy, selected_persona, response}.
    nlohmann::json to_json() const;
    static GenerationRecord from_json(const nlohmann::json& j);
};

struct InferenceCounters {
    std::size_t records = 0;
    std::size_t no_persona_fallbacks = 0;
    std::size_t errors = 0;
    std::size_t truncations = 0;

    nlohmann::json to_json() const;
};

// One response under the given strategy. Backend failures produce a record with an
// empty response and failed=true instead of throwing.
GenerationRecord respond(const lm::Backend& backend, const corpus::DialogueSample& sample,
                         const InferenceStrategy& strategy, int max_new = lm::kDefaultMaxNew,
                         InferenceCounters* counters = nullptr);

struct BatchResult {
    std::vector<GenerationRecord> records;
    InferenceCounters counters;
};

// Order-preserving map of respond over samples; never aborts on per-sample errors.
BatchResult batch_respond(const lm::Backend& backend, const std::vector<corpus::DialogueSample>& samples,
                          const InferenceStrategy& strategy, int max_new = lm::kDefaultMaxNew);

void write_records(const std::vector<GenerationRecord>& records, const std::string& path);
std::vector<GenerationRecord> read_records(const std::string& path);

}  // namespace pal::inference
