#include "pal/corpus.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <unordered_map>

#include "pal/errors.h"
#include "pal/nli.h"
#include "pal/text.h"

namespace pal::corpus {

using nlohmann::json;

std::string_view to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::valid1: return "valid1";
        case Split::valid2: return "valid2";
        case Split::test: return "test";
    }
    return "?";
}

std::string_view to_string(Dialect d) {
    switch (d) {
        case Dialect::original: return "original";
        case Dialect::revised: return "revised";
        case Dialect::baidu: return "baidu";
    }
    return "?";
}

std::string_view to_string(Speaker s) { return s == Speaker::partner ? "partner" : "self"; }

Split parse_split(std::string_view s) {
    for (Split sp : kAllSplits) {
        if (to_string(sp) == s) return sp;
    }
    throw ConfigError("unknown split '" + std::string(s) + "' (expected train, valid1, valid2, test)");
}

Dialect parse_dialect(std::string_view s) {
    if (s == "original") return Dialect::original;
    if (s == "revised") return Dialect::revised;
    if (s == "baidu") return Dialect::baidu;
    throw ConfigError("unknown dialect '" + std::string(s) + "' (expected original, revised, baidu)");
}

std::size_t PersonaChoice::index() const {
    if (is_none()) throw UsageError("PersonaChoice::index() on NO_PERSONA");
    return static_cast<std::size_t>(value_);
}

std::string to_string(const PersonaChoice& c) { return c.is_none() ? "NO_PERSONA" : std::to_string(c.index()); }

std::string DialogueSample::dialogue_id() const {
    auto pos = sample_id.rfind('#');
    return pos == std::string::npos ? sample_id : sample_id.substr(0, pos);
}

// ---------------------------------------------------------------------------
// Loading

namespace {

struct DialogueBuilder {
    std::string dialogue_id;
    std::string source_part;
    std::vector<std::string> personas;
    std::vector<DialogueTurn> history;
    std::vector<DialogueSample> samples;

    void add_reply(std::string reply) {
        DialogueSample s;
        s.sample_id = dialogue_id + "#" + std::to_string(samples.size());
        s.profile.user_id = dialogue_id + ":self";
        s.profile.personas = personas;
        s.context = history;
        s.gold_response = std::move(reply);
        s.source_part = source_part;
        samples.push_back(std::move(s));
    }
};

std::string stem_of(std::string_view source_name) {
    return std::filesystem::path(std::string(source_name)).stem().string();
}

void flush_dialogue(DialogueBuilder& d, LoadResult& out) {
    if (d.samples.empty() && d.personas.empty() && d.history.empty()) return;
    ++out.stats.dialogues;
    if (d.personas.empty()) {
        ++out.stats.skipped_empty_persona;
        return;
    }
    for (auto& s : d.samples) out.samples.push_back(std::move(s));
}

std::vector<std::string> read_personas(const json& dialogue, const std::string& where) {
    std::vector<std::string> personas;
    auto it = dialogue.find("personality");
    if (it == dialogue.end()) return personas;
    if (!it->is_array()) throw ParseError(where + ": \"personality\" must be a list of strings");
    for (const auto& p : *it) {
        if (!p.is_string()) throw ParseError(where + ": persona entries must be strings");
        std::string t = text::canonical(p.get<std::string>());
        if (!t.empty()) personas.push_back(std::move(t));
    }
    return personas;
}

void load_dialogue_array(const json& arr, const std::string& source, const std::string& part, LoadResult& out) {
    if (!arr.is_array()) throw ParseError(source + ": expected a list of dialogues" + (part.empty() ? "" : " under \"" + part + "\""));
    const std::string prefix = part.empty() ? source : source + "/" + part;
    for (std::size_t di = 0; di < arr.size(); ++di) {
        const json& dialogue = arr[di];
        const std::string where = prefix + " dialogue #" + std::to_string(di);
        if (!dialogue.is_object()) throw ParseError(where + ": expected an object");
        DialogueBuilder b;
        b.dialogue_id = prefix + "/d" + std::to_string(di);
        b.source_part = part;
        b.personas = read_personas(dialogue, where);

        auto utt = dialogue.find("utterances");
        if (utt == dialogue.end() || !utt->is_array()) throw ParseError(where + ": missing \"utterances\" list");
        for (std::size_t ui = 0; ui < utt->size(); ++ui) {
            const json& u = (*utt)[ui];
            const std::string uwhere = where + " utterance #" + std::to_string(ui);
            if (!u.is_object()) throw ParseError(uwhere + ": expected an object");
            auto hist = u.find("history");
            auto cands = u.find("candidates");
            if (hist == u.end() || !hist->is_array()) throw ParseError(uwhere + ": missing \"history\" list");
            if (cands == u.end() || !cands->is_array() || cands->empty() || !cands->back().is_string()) {
                throw ParseError(uwhere + ": missing \"candidates\" list with gold reply last");
            }
            if (hist->size() % 2 == 0) {
                throw ParseError(uwhere + ": history must alternate partner/self and end with a partner turn");
            }
            b.history.clear();
            for (std::size_t k = 0; k < hist->size(); ++k) {
                if (!(*hist)[k].is_string()) throw ParseError(uwhere + ": history entries must be strings");
                std::string t = text::canonical((*hist)[k].get<std::string>());
                if (t.empty()) throw ParseError(uwhere + ": empty history turn #" + std::to_string(k));
                b.history.push_back({k % 2 == 0 ? Speaker::partner : Speaker::self, std::move(t)});
            }
            std::string gold = text::canonical(cands->back().get<std::string>());
            if (gold.empty()) throw ParseError(uwhere + ": empty gold reply");
            b.add_reply(std::move(gold));
        }
        flush_dialogue(b, out);
    }
}

bool starts_with(std::string_view s, std::string_view p) { return s.substr(0, p.size()) == p; }

}  // namespace

LoadResult load_personachat_json(std::string_view content, Dialect /*dialect*/, std::string_view source_name) {
    json root;
    try {
        root = json::parse(content);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string(source_name) + ": invalid JSON at byte " + std::to_string(e.byte) + ": " + e.what());
    }
    LoadResult out;
    const std::string source = stem_of(source_name);
    if (root.is_array()) {
        load_dialogue_array(root, source, "", out);
    } else if (root.is_object()) {
        for (const auto& [part, arr] : root.items()) load_dialogue_array(arr, source, part, out);
    } else {
        throw ParseError(std::string(source_name) + ": top level must be a list or an object of lists");
    }
    out.stats.samples = out.samples.size();
    return out;
}

LoadResult load_personachat_lines(std::istream& in, Dialect /*dialect*/, std::string_view source_name) {
    LoadResult out;
    const std::string source = stem_of(source_name);
    DialogueBuilder b;
    std::size_t dialogue_index = 0;
    long last_number = 0;
    bool in_dialogue = false;
    bool saw_turn = false;

    auto start_dialogue = [&] {
        if (in_dialogue) flush_dialogue(b, out);
        b = DialogueBuilder{};
        b.dialogue_id = source + "/d" + std::to_string(dialogue_index++);
        in_dialogue = true;
        saw_turn = false;
    };

    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        const std::string where = std::string(source_name) + ":" + std::to_string(lineno);
        if (text::trim(line).empty()) {
            if (in_dialogue) {
                flush_dialogue(b, out);
                in_dialogue = false;
            }
            continue;
        }

        std::string_view body = line;
        std::size_t digits = 0;
        while (digits < body.size() && std::isdigit(static_cast<unsigned char>(body[digits]))) ++digits;
        if (digits > 0 && digits < body.size() && body[digits] == ' ') {
            long number = std::stol(std::string(body.substr(0, digits)));
            if (!in_dialogue || number <= last_number) start_dialogue();
            last_number = number;
            body = body.substr(digits + 1);
        } else if (!in_dialogue) {
            start_dialogue();
        }

        if (starts_with(body, "your persona:")) {
            if (saw_turn) throw ParseError(where + ": persona line after dialogue turns");
            std::string p = text::canonical(body.substr(std::string_view("your persona:").size()));
            if (!p.empty()) b.personas.push_back(std::move(p));
            continue;
        }
        if (starts_with(body, "partner's persona:")) continue;

        auto tab = body.find('\t');
        if (tab == std::string_view::npos) throw ParseError(where + ": expected tab-separated partner and self turns");
        std::string partner = text::canonical(body.substr(0, tab));
        std::string_view rest = body.substr(tab + 1);
        std::string self = text::canonical(rest.substr(0, rest.find('\t')));
        if (partner.empty() || self.empty()) throw ParseError(where + ": empty partner or self turn");
        saw_turn = true;
        b.history.push_back({Speaker::partner, partner});
        b.add_reply(self);
        b.history.push_back({Speaker::self, std::move(self)});
    }
    if (in_dialogue) flush_dialogue(b, out);
    out.stats.samples = out.samples.size();
    return out;
}

LoadResult load_personachat(const std::string& path, Dialect dialect) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open dataset file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string content = ss.str();
    auto first = content.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && (content[first] == '[' || content[first] == '{')) {
        return load_personachat_json(content, dialect, path);
    }
    std::istringstream lines(content);
    return load_personachat_lines(lines, dialect, path);
}

// ---------------------------------------------------------------------------
// Canonical JSONL

json to_json(const DialogueSample& s) {
    json ctx = json::array();
    for (const auto& t : s.context) ctx.push_back({{"speaker", to_string(t.speaker)}, {"text", t.text}});
    json rel;
    if (s.relevant_persona) {
        if (s.relevant_persona->is_none()) rel = "NO_PERSONA";
        else rel = s.relevant_persona->index();
    }
    return json{{"sample_id", s.sample_id},
                {"split", s.split ? json(to_string(*s.split)) : json()},
                {"personas", s.profile.personas},
                {"context", ctx},
                {"gold_response", s.gold_response},
                {"relevant_persona", rel}};
}

DialogueSample sample_from_json(const json& j) {
    DialogueSample s;
    try {
        s.sample_id = j.at("sample_id").get<std::string>();
        if (!j.at("split").is_null()) s.split = parse_split(j.at("split").get<std::string>());
        s.profile.personas = j.at("personas").get<std::vector<std::string>>();
        s.profile.user_id = s.dialogue_id() + ":self";
        for (const auto& t : j.at("context")) {
            const auto sp = t.at("speaker").get<std::string>();
            if (sp != "partner" && sp != "self") throw ParseError("bad speaker '" + sp + "'");
            s.context.push_back({sp == "partner" ? Speaker::partner : Speaker::self, t.at("text").get<std::string>()});
        }
        s.gold_response = j.at("gold_response").get<std::string>();
        const json& rel = j.at("relevant_persona");
        if (rel.is_string()) {
            if (rel.get<std::string>() != "NO_PERSONA") throw ParseError("bad relevant_persona");
            s.relevant_persona = PersonaChoice::none();
        } else if (rel.is_number_unsigned()) {
            auto idx = rel.get<std::size_t>();
            if (idx >= s.profile.personas.size()) throw ParseError("relevant_persona out of range");
            s.relevant_persona = PersonaChoice::at(idx);
        } else if (!rel.is_null()) {
            throw ParseError("bad relevant_persona");
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed sample record: ") + e.what());
    }
    return s;
}

void write_jsonl(const std::vector<DialogueSample>& samples, std::ostream& out) {
    for (const auto& s : samples) out << to_json(s).dump() << '\n';
}

void write_jsonl(const std::vector<DialogueSample>& samples, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PalError("cannot write " + path);
    write_jsonl(samples, out);
}

std::vector<DialogueSample> read_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open " + path);
    std::vector<DialogueSample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (text::trim(line).empty()) continue;
        try {
            out.push_back(sample_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const ParseError& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Splitting

nlohmann::json SplitManifest::to_json() const {
    json c = json::object();
    for (Split s : kAllSplits) c[std::string(to_string(s))] = counts.count(s) ? counts.at(s) : 0;
    return json{{"counts", c}, {"seed", seed}, {"source_digest", source_digest}};
}

namespace {

struct DialogueGroup {
    std::string id;
    std::vector<std::size_t> members;
};

// Picks a subset of `sizes` (indices into `order`) summing exactly to `target`, preferring
// dialogues early in `order`. Falls back to the largest reachable total below target.
std::vector<std::size_t> pick_subset(const std::vector<std::size_t>& order, const std::vector<std::size_t>& sizes,
                                     std::size_t target) {
    std::vector<std::size_t> picked;
    std::size_t sum = 0;
    for (std::size_t k : order) {
        if (sum + sizes[k] <= target) {
            picked.push_back(k);
            sum += sizes[k];
        }
        if (sum == target) return picked;
    }
    // reach[s] = position in `order` of the item that first reached total s.
    constexpr std::size_t kUnset = static_cast<std::size_t>(-1);
    std::vector<std::size_t> reach(target + 1, kUnset);
    reach[0] = order.size();
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        const std::size_t w = sizes[order[pos]];
        if (w == 0 || w > target) continue;
        for (std::size_t s = target; s >= w; --s) {
            if (reach[s] == kUnset && reach[s - w] != kUnset) reach[s] = pos;
        }
    }
    std::size_t s = target;
    while (reach[s] == kUnset) --s;
    if (s <= sum) return picked;
    picked.clear();
    while (s > 0) {
        std::size_t pos = reach[s];
        picked.push_back(order[pos]);
        s -= sizes[order[pos]];
    }
    return picked;
}

}  // namespace

SplitManifest make_splits(std::vector<DialogueSample>& samples, const SplitConfig& config, std::uint64_t seed) {
    double fraction_sum = 0.0;
    for (const auto& [split, t] : config.targets) {
        if (t.fraction.has_value() == t.count.has_value()) {
            throw ConfigError("split target for " + std::string(to_string(split)) + " needs exactly one of fraction/count");
        }
        if (t.fraction) {
            if (!(*t.fraction > 0.0) || *t.fraction > 1.0) {
                throw ConfigError("split fraction for " + std::string(to_string(split)) + " must be in (0, 1]");
            }
            if (split != config.remainder) fraction_sum += *t.fraction;
        }
    }
    if (fraction_sum > 1.0 + 1e-9) throw ConfigError("held-out split fractions sum to more than 1");

    std::vector<DialogueGroup> groups;
    std::unordered_map<std::string, std::size_t> group_of;
    std::string digest_input;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::string did = samples[i].dialogue_id();
        auto [it, inserted] = group_of.emplace(did, groups.size());
        if (inserted) groups.push_back({did, {}});
        groups[it->second].members.push_back(i);
        digest_input += samples[i].sample_id;
        digest_input += '\n';
    }

    std::vector<std::size_t> pool;
    std::vector<std::optional<Split>> assigned(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& part = samples[groups[g].members.front()].source_part;
        auto pin = config.pinned_parts.find(part);
        if (pin != config.pinned_parts.end()) assigned[g] = pin->second;
        else pool.push_back(g);
    }

    std::mt19937_64 rng(seed);
    for (std::size_t i = pool.size(); i > 1; --i) {
        std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(pool[i - 1], pool[j]);
    }

    std::vector<std::size_t> sizes(groups.size());
    std::size_t pool_samples = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) sizes[g] = groups[g].members.size();
    for (std::size_t g : pool) pool_samples += sizes[g];

    std::vector<std::size_t> remaining = pool;
    for (Split split : kAllSplits) {
        if (split == config.remainder) continue;
        auto it = config.targets.find(split);
        if (it == config.targets.end()) continue;
        std::size_t target = it->second.count
                                 ? *it->second.count
                                 : static_cast<std::size_t>(std::llround(*it->second.fraction * static_cast<double>(pool_samples)));
        auto picked = pick_subset(remaining, sizes, target);
        std::vector<bool> taken(groups.size(), false);
        for (std::size_t g : picked) {
            assigned[g] = split;
            taken[g] = true;
        }
        std::vector<std::size_t> next;
        for (std::size_t g : remaining) {
            if (!taken[g]) next.push_back(g);
        }
        remaining = std::move(next);
    }
    for (std::size_t g : remaining) assigned[g] = config.remainder;

    SplitManifest m;
    m.seed = seed;
    m.source_digest = text::sha256_hex(digest_input);
    for (Split s : kAllSplits) m.counts[s] = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        for (std::size_t i : groups[g].members) samples[i].split = *assigned[g];
        m.counts[*assigned[g]] += groups[g].members.size();
    }
    return m;
}

SplitManifest make_splits(std::vector<DialogueSample>& samples, const std::map<Split, double>& fractions,
                          std::uint64_t seed) {
    SplitConfig cfg;
    for (const auto& [split, f] : fractions) {
        if (split == Split::train) {
            if (!(f > 0.0) || f > 1.0) throw ConfigError("split fraction for train must be in (0, 1]");
            continue;
        }
        cfg.targets[split] = SplitTarget{f, std::nullopt};
    }
    return make_splits(samples, cfg, seed);
}

std::vector<DialogueSample> select_split(const std::vector<DialogueSample>& samples, Split split) {
    std::vector<DialogueSample> out;
    for (const auto& s : samples) {
        if (s.split == split) out.push_back(s);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Relevance

namespace {

std::vector<std::string> relevance_tokens(std::string_view s, Dialect dialect) {
    if (dialect != Dialect::baidu) return text::content_words(s);
    std::vector<std::string> out;
    for (auto& cp : text::split_codepoints(s)) {
        if (!text::is_punctuation_token(cp)) out.push_back(std::move(cp));
    }
    return out;
}

}  // namespace

double LexicalOverlapScorer::score(std::string_view persona, std::string_view response) const {
    return text::overlap_f1(relevance_tokens(response, dialect_), relevance_tokens(persona, dialect_));
}

double NliEntailmentScorer::score(std::string_view persona, std::string_view response) const {
    return static_cast<double>(static_cast<int>(nli_.classify(persona, response)));
}

PersonaChoice derive_relevant_persona(const DialogueSample& sample, const RelevanceScorer& scorer, double threshold) {
    const auto& personas = sample.profile.personas;
    if (personas.empty()) return PersonaChoice::none();
    std::size_t best = 0;
    double best_score = scorer.score(personas[0], sample.gold_response);
    for (std::size_t i = 1; i < personas.size(); ++i) {
        double s = scorer.score(personas[i], sample.gold_response);
        if (s > best_score) {
            best_score = s;
            best = i;
        }
    }
    if (best_score < threshold) return PersonaChoice::none();
    return PersonaChoice::at(best);
}

std::size_t label_samples(std::vector<DialogueSample>& samples, const RelevanceScorer& scorer, double threshold) {
    std::size_t none = 0;
    for (auto& s : samples) {
        s.relevant_persona = derive_relevant_persona(s, scorer, threshold);
        if (s.relevant_persona->is_none()) ++none;
    }
    return none;
}

}  // namespace pal::corpus
