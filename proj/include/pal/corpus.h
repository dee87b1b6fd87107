#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace pal::nli {
class NliScorer;
}

namespace pal::corpus {

enum class Speaker { partner, self };
enum class Split { train, valid1, valid2, test };
enum class Dialect { original, revised, baidu };

std::string_view to_string(Split s);
std::string_view to_string(Dialect d);
std::string_view to_string(Speaker s);
Split parse_split(std::string_view s);
Dialect parse_dialect(std::string_view s);

inline constexpr Split kAllSplits[] = {Split::train, Split::valid1, Split::valid2, Split::test};

struct PersonaProfile {
    std::string user_id;
    std::vector<std::string> personas;

    bool operator==(const PersonaProfile&) const = default;
};

struct DialogueTurn {
    Speaker speaker = Speaker::partner;
    std::string text;

    bool operator==(const DialogueTurn&) const = default;
};

// The relevant-persona label: either an index into the profile or "no persona needed".
class PersonaChoice {
public:
    static PersonaChoice none() { return PersonaChoice(kNone); }
    static PersonaChoice at(std::size_t index) { return PersonaChoice(static_cast<std::int64_t>(index)); }

    bool is_none() const { return value_ == kNone; }
    std::size_t index() const;

    bool operator==(const PersonaChoice&) const = default;

private:
    static constexpr std::int64_t kNone = -1;
    explicit PersonaChoice(std::int64_t v) : value_(v) {}
    std::int64_t value_;
};

std::string to_string(const PersonaChoice& c);

struct DialogueSample {
    std::string sample_id;  // "<dialogue_id>#<reply index>"
    std::optional<Split> split;
    PersonaProfile profile;
    std::vector<DialogueTurn> context;
    std::string gold_response;
    std::optional<PersonaChoice> relevant_persona;
    // Top-level key of the source file ("train", "valid", ...) when the file carries one.
    // Not serialized; only consulted by make_splits.
    std::string source_part;

    std::string dialogue_id() const;
    bool operator==(const DialogueSample& o) const {
        return sample_id == o.sample_id && split == o.split && profile.personas == o.profile.personas &&
               context == o.context && gold_response == o.gold_response && relevant_persona == o.relevant_persona;
    }
};

struct LoadStats {
    std::size_t dialogues = 0;
    std::size_t samples = 0;
    std::size_t skipped_empty_persona = 0;
};

struct LoadResult {
    std::vector<DialogueSample> samples;
    LoadStats stats;
};

// Reads ConvAI2-style JSON (top-level array of dialogues, or an object keyed by part name)
// or the line-oriented "your persona:" format. The format is sniffed from the first
// non-blank character. Throws ParseError naming the record on malformed input.
LoadResult load_personachat(const std::string& path, Dialect dialect);
LoadResult load_personachat_json(std::string_view content, Dialect dialect, std::string_view source_name);
LoadResult load_personachat_lines(std::istream& in, Dialect dialect, std::string_view source_name);

// Canonical JSONL.
nlohmann::json to_json(const DialogueSample& s);
DialogueSample sample_from_json(const nlohmann::json& j);
void write_jsonl(const std::vector<DialogueSample>& samples, std::ostream& out);
void write_jsonl(const std::vector<DialogueSample>& samples, const std::string& path);
std::vector<DialogueSample> read_jsonl(const std::string& path);

// ---------------------------------------------------------------------------
// Splitting

// Target size of one held-out split, either as a fraction of the pool or an exact sample count.
struct SplitTarget {
    std::optional<double> fraction;
    std::optional<std::size_t> count;
};

struct SplitConfig {
    // Held-out targets drawn from the pool, realized in valid1, valid2, test order.
    std::map<Split, SplitTarget> targets;
    // Where the rest of the pool goes.
    Split remainder = Split::train;
    // Pins every dialogue whose source_part matches a key to a split. Unlisted parts form the pool.
    std::map<std::string, Split> pinned_parts;
};

struct SplitManifest {
    std::map<Split, std::size_t> counts;
    std::uint64_t seed = 0;
    std::string source_digest;

    nlohmann::json to_json() const;
    bool operator==(const SplitManifest&) const = default;
};

// Assigns every sample a split, whole dialogues at a time. Held-out targets are hit exactly
// whenever some subset of pool dialogues sums to them; otherwise the closest smaller total.
SplitManifest make_splits(std::vector<DialogueSample>& samples, const SplitConfig& config, std::uint64_t seed);
SplitManifest make_splits(std::vector<DialogueSample>& samples, const std::map<Split, double>& fractions,
                          std::uint64_t seed);

std::vector<DialogueSample> select_split(const std::vector<DialogueSample>& samples, Split split);

// ---------------------------------------------------------------------------
// Relevant-persona labels

class RelevanceScorer {
public:
    virtual ~RelevanceScorer() = default;
    virtual double score(std::string_view persona, std::string_view response) const = 0;
    virtual std::string name() const = 0;
};

// Unigram-overlap F1 on content words; Chinese text falls back to code points.
class LexicalOverlapScorer final : public RelevanceScorer {
public:
    explicit LexicalOverlapScorer(Dialect dialect = Dialect::original) : dialect_(dialect) {}
    double score(std::string_view persona, std::string_view response) const override;
    std::string name() const override { return "lexical-overlap"; }

private:
    Dialect dialect_;
};

// Scores a persona by its NLI label against the response (+1 entail, 0 neutral, -1 contradict).
class NliEntailmentScorer final : public RelevanceScorer {
public:
    explicit NliEntailmentScorer(const nli::NliScorer& nli) : nli_(nli) {}
    double score(std::string_view persona, std::string_view response) const override;
    std::string name() const override { return "nli-entailment"; }

private:
    const nli::NliScorer& nli_;
};

inline constexpr double kDefaultRelevanceThreshold = 0.15;

PersonaChoice derive_relevant_persona(const DialogueSample& sample, const RelevanceScorer& scorer,
                                      double threshold = kDefaultRelevanceThreshold);

// Labels every sample in place; returns the number labelled NO_PERSONA.
std::size_t label_samples(std::vector<DialogueSample>& samples, const RelevanceScorer& scorer, double threshold);

}  // namespace pal::corpus
