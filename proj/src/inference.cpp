#include "pal/inference.h"

#include <fstream>
#include <random>

#include "pal/errors.h"
#include "pal/prompt.h"
#include "pal/text.h"

namespace pal::inference {

std::string_view to_string(StrategyKind k) {
    switch (k) {
        case StrategyKind::select_then_generate: return "select_then_generate";
        case StrategyKind::random_select: return "random";
        case StrategyKind::not_select: return "not_select";
    }
    return "?";
}

StrategyKind parse_strategy(std::string_view s) {
    if (s == "select_then_generate" || s == "select") return StrategyKind::select_then_generate;
    if (s == "random" || s == "random_select") return StrategyKind::random_select;
    if (s == "not_select" || s == "notselect") return StrategyKind::not_select;
    throw ConfigError("unknown inference strategy '" + std::string(s) +
                      "' (expected select_then_generate, random, not_select)");
}

nlohmann::json GenerationRecord::to_json() const {
    return {{"sample_id", sample_id},
            {"strategy", to_string(strategy)},
            {"selected_persona", selected_persona ? nlohmann::json(*selected_persona) : nlohmann::json()},
            {"response", response}};
}

GenerationRecord GenerationRecord::from_json(const nlohmann::json& j) {
    GenerationRecord r;
    try {
        r.sample_id = j.at("sample_id").get<std::string>();
        r.strategy = parse_strategy(j.at("strategy").get<std::string>());
        if (!j.at("selected_persona").is_null()) r.selected_persona = j.at("selected_persona").get<std::string>();
        r.response = j.at("response").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("malformed generation record: ") + e.what());
    }
    return r;
}

nlohmann::json InferenceCounters::to_json() const {
    return {{"records", records},
            {"no_persona_fallbacks", no_persona_fallbacks},
            {"errors", errors},
            {"truncations", truncations}};
}

namespace {

std::size_t random_persona(const corpus::DialogueSample& sample, std::uint64_t seed) {
    std::mt19937_64 rng(text::fnv1a64(sample.sample_id, 0xcbf29ce484222325ULL ^ (seed * 0x9E3779B97F4A7C15ULL)));
    std::uniform_int_distribution<std::size_t> pick(0, sample.profile.personas.size() - 1);
    return pick(rng);
}

}  // namespace

GenerationRecord respond(const lm::Backend& backend, const corpus::DialogueSample& sample,
                         const InferenceStrategy& strategy, int max_new, InferenceCounters* counters) {
    GenerationRecord rec;
    rec.sample_id = sample.sample_id;
    rec.strategy = strategy.kind;
    const std::size_t truncations_before = backend.truncations();
    try {
        if (strategy.kind == StrategyKind::not_select) {
            rec.prompt_used = prompt::render_generation(sample, true).prompt_text;
        } else {
            const auto select_prompt = prompt::render_infer_select(sample).prompt_text;
            const auto choice = prompt::parse_selection_output(backend.generate(select_prompt, max_new), sample.profile);
            if (choice.is_none()) {
                rec.prompt_used = prompt::render_generation(sample, true).prompt_text;
                if (counters) ++counters->no_persona_fallbacks;
            } else {
                std::size_t index = choice.index();
                if (strategy.kind == StrategyKind::random_select) index = random_persona(sample, strategy.seed);
                rec.selected_persona = sample.profile.personas.at(index);
                rec.prompt_used = prompt::render_generation(sample, true, rec.selected_persona).prompt_text;
            }
        }
        rec.response = text::trim(backend.generate(rec.prompt_used, max_new));
    } catch (const PalError&) {
        rec.response.clear();
        rec.failed = true;
        if (counters) ++counters->errors;
    }
    if (counters) {
        ++counters->records;
        counters->truncations += backend.truncations() - truncations_before;
    }
    return rec;
}

BatchResult batch_respond(const lm::Backend& backend, const std::vector<corpus::DialogueSample>& samples,
                          const InferenceStrategy& strategy, int max_new) {
    BatchResult out;
    out.records.reserve(samples.size());
    for (const auto& s : samples) out.records.push_back(respond(backend, s, strategy, max_new, &out.counters));
    return out;
}

void write_records(const std::vector<GenerationRecord>& records, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PalError("cannot write " + path);
    for (const auto& r : records) out << r.to_json().dump() << '\n';
}

std::vector<GenerationRecord> read_records(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DependencyError("cannot open generation records " + path);
    std::vector<GenerationRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (text::trim(line).empty()) continue;
        try {
            out.push_back(GenerationRecord::from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace pal::inference
