#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pal/corpus.h"

namespace pal::prompt {

enum class TaskKind { selection, generation, pair_construction, infer_select, infer_generate };

std::string_view to_string(TaskKind k);

inline constexpr std::string_view kTemplateVersion = "pal-templates/1";
inline constexpr std::string_view kNoPersonaNeeded = "No persona data needed";

// Raw template text with {personas}, {dialogue_context}, {related_persona}, {response}
// placeholders. The final placeholder of each template is the answer slot; a rendered
// prompt stops right before it.
std::string_view template_text(TaskKind k);

struct PromptInstance {
    TaskKind task = TaskKind::generation;
    std::string prompt_text;
    std::string target_text;
    std::string sample_id;
};

// Personas one per line, in profile order.
std::string render_personas(const corpus::PersonaProfile& profile);
// "Person 1: ..." for the partner, "Person 2: ..." for the replying user, one turn per line.
std::string render_context(const std::vector<corpus::DialogueTurn>& context);

// Requires sample.relevant_persona; throws UsageError otherwise.
PromptInstance render_selection(const corpus::DialogueSample& sample);

// Persona-selection prompt used at inference time. Target left empty.
PromptInstance render_infer_select(const corpus::DialogueSample& sample);

// include_personas=false gives the persona-blind pair-construction prompt; a highlighted
// persona gives the Select-then-Generate prompt. Target is the gold response.
PromptInstance render_generation(const corpus::DialogueSample& sample, bool include_personas,
                                 const std::optional<std::string>& highlighted = std::nullopt);

// Maps generated selection text back to a persona: exact match, then the no-persona
// phrase, then nearest persona by content-word overlap F1 (ties to lowest index).
corpus::PersonaChoice parse_selection_output(std::string_view generated, const corpus::PersonaProfile& profile);

}  // namespace pal::prompt
