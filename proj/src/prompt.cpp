#include "pal/prompt.h"

#include <array>

#include "pal/errors.h"
#include "pal/text.h"

namespace pal::prompt {

namespace {

constexpr std::string_view kSelectionTemplate =
    "The user's persona is described with: {personas}.\n"
    "If a persona description is required to generate a response, select the most appropriate one. "
    "If no persona is needed, respond with 'No persona data needed'.\n"
    "Dialogue context: {dialogue_context}.\n"
    "The preferred persona is: {related_persona}.";

constexpr std::string_view kGenerationTemplate =
    "The user's persona is described with: {personas}.\n"
    "Please generate a response to the dialogue.\n"
    "Dialogue context: {dialogue_context}.\n"
    "Response: {response}";

constexpr std::string_view kPairConstructionTemplate =
    "Please generate a response to the dialogue.\n"
    "Dialogue context: {dialogue_context}.\n"
    "Response: {response}";

constexpr std::string_view kInferGenerateTemplate =
    "The user's persona is described with: {personas}.\n"
    "The most related persona is {related_persona}. Please generate a response to the dialogue.\n"
    "Dialogue context: {dialogue_context}.\n"
    "Response: {response}";

struct Slots {
    std::string personas;
    std::string dialogue_context;
    std::string related_persona;
};

// Substitutes placeholders up to (not including) `answer_slot`.
std::string render(std::string_view tmpl, const Slots& slots, std::string_view answer_slot) {
    auto cut = tmpl.find(answer_slot);
    std::string_view head = tmpl.substr(0, cut);
    std::string out;
    out.reserve(head.size() + slots.personas.size() + slots.dialogue_context.size() + 64);
    std::size_t i = 0;
    while (i < head.size()) {
        if (head[i] == '{') {
            auto close = head.find('}', i);
            std::string_view name = head.substr(i + 1, close - i - 1);
            if (name == "personas") out += slots.personas;
            else if (name == "dialogue_context") out += slots.dialogue_context;
            else if (name == "related_persona") out += slots.related_persona;
            else throw PalError("unknown template placeholder {" + std::string(name) + "}");
            i = close + 1;
        } else {
            out.push_back(head[i++]);
        }
    }
    return out;
}

Slots slots_for(const corpus::DialogueSample& s) {
    return Slots{render_personas(s.profile), render_context(s.context), {}};
}

}  // namespace

std::string_view to_string(TaskKind k) {
    switch (k) {
        case TaskKind::selection: return "SELECTION";
        case TaskKind::generation: return "GENERATION";
        case TaskKind::pair_construction: return "PAIR_CONSTRUCTION";
        case TaskKind::infer_select: return "INFER_SELECT";
        case TaskKind::infer_generate: return "INFER_GENERATE";
    }
    return "?";
}

std::string_view template_text(TaskKind k) {
    switch (k) {
        case TaskKind::selection:
        case TaskKind::infer_select: return kSelectionTemplate;
        case TaskKind::generation: return kGenerationTemplate;
        case TaskKind::pair_construction: return kPairConstructionTemplate;
        case TaskKind::infer_generate: return kInferGenerateTemplate;
    }
    return {};
}

std::string render_personas(const corpus::PersonaProfile& profile) {
    std::string out;
    for (std::size_t i = 0; i < profile.personas.size(); ++i) {
        if (i) out += '\n';
        out += profile.personas[i];
    }
    return out;
}

std::string render_context(const std::vector<corpus::DialogueTurn>& context) {
    std::string out;
    for (std::size_t i = 0; i < context.size(); ++i) {
        if (i) out += '\n';
        out += context[i].speaker == corpus::Speaker::partner ? "Person 1: " : "Person 2: ";
        out += context[i].text;
    }
    return out;
}

PromptInstance render_selection(const corpus::DialogueSample& sample) {
    if (!sample.relevant_persona) {
        throw UsageError("render_selection: sample " + sample.sample_id + " has no relevant-persona label");
    }
    PromptInstance p;
    p.task = TaskKind::selection;
    p.sample_id = sample.sample_id;
    p.prompt_text = render(kSelectionTemplate, slots_for(sample), "{related_persona}");
    p.target_text = sample.relevant_persona->is_none() ? std::string(kNoPersonaNeeded)
                                                       : sample.profile.personas.at(sample.relevant_persona->index());
    return p;
}

PromptInstance render_infer_select(const corpus::DialogueSample& sample) {
    PromptInstance p;
    p.task = TaskKind::infer_select;
    p.sample_id = sample.sample_id;
    p.prompt_text = render(kSelectionTemplate, slots_for(sample), "{related_persona}");
    return p;
}

PromptInstance render_generation(const corpus::DialogueSample& sample, bool include_personas,
                                 const std::optional<std::string>& highlighted) {
    if (highlighted && !include_personas) {
        throw UsageError("render_generation: a highlighted persona requires include_personas");
    }
    PromptInstance p;
    p.sample_id = sample.sample_id;
    p.target_text = sample.gold_response;
    Slots slots = slots_for(sample);
    if (!include_personas) {
        p.task = TaskKind::pair_construction;
        p.prompt_text = render(kPairConstructionTemplate, slots, "{response}");
    } else if (highlighted) {
        p.task = TaskKind::infer_generate;
        slots.related_persona = *highlighted;
        p.prompt_text = render(kInferGenerateTemplate, slots, "{response}");
    } else {
        p.task = TaskKind::generation;
        p.prompt_text = render(kGenerationTemplate, slots, "{response}");
    }
    return p;
}

corpus::PersonaChoice parse_selection_output(std::string_view generated, const corpus::PersonaProfile& profile) {
    const std::string g = text::trim(generated);
    for (std::size_t i = 0; i < profile.personas.size(); ++i) {
        if (text::trim(profile.personas[i]) == g) return corpus::PersonaChoice::at(i);
    }
    if (g == kNoPersonaNeeded || g == std::string(kNoPersonaNeeded) + ".") return corpus::PersonaChoice::none();

    const auto gen_words = text::content_words(g);
    double best = 0.0;
    std::optional<std::size_t> best_index;
    for (std::size_t i = 0; i < profile.personas.size(); ++i) {
        double f = text::overlap_f1(gen_words, text::content_words(profile.personas[i]));
        if (f > best) {
            best = f;
            best_index = i;
        }
    }
    return best_index ? corpus::PersonaChoice::at(*best_index) : corpus::PersonaChoice::none();
}

}  // namespace pal::prompt
