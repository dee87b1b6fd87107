#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "pal/corpus.h"
#include "pal/text.h"
#include "support.h"

using namespace pal;
using namespace pal::corpus;
using testutil::make_sample;

TEST_CASE("text helpers") {
    CHECK(text::trim("  a b \n") == "a b");
    CHECK(text::nfc("e\xCC\x81") == "\xC3\xA9");
    CHECK(text::canonical("  caf\x65\xCC\x81 ") == "caf\xC3\xA9");
    CHECK(text::word_tokens("I'm here, OK!") == std::vector<std::string>{"i'm", "here", ",", "ok", "!"});
    CHECK(text::content_words("i am an attorney .") == std::vector<std::string>{"attorney"});
    CHECK(text::split_codepoints("\xE4\xBD\xA0\xE5\xA5\xBD" "a").size() == 3);
    CHECK(text::sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(text::sanitize_utf8("ok") == "ok");
    CHECK(text::sanitize_utf8("a\xFF" "b") == "a\xEF\xBF\xBD" "b");
    CHECK(text::sanitize_utf8("\xE4\xBD") == "\xEF\xBF\xBD\xEF\xBF\xBD");
    CHECK(text::overlap_f1({}, {"a"}) == 0.0);
    CHECK(text::overlap_f1({"a", "b"}, {"a", "c"}) == doctest::Approx(0.5));
}

namespace {

std::string json_dialogue(const std::vector<std::string>& personas, const std::vector<std::string>& turns) {
    nlohmann::json d;
    d["personality"] = personas;
    d["utterances"] = nlohmann::json::array();
    std::vector<std::string> history;
    for (std::size_t i = 0; i < turns.size(); ++i) {
        if (i % 2 == 1) {
            d["utterances"].push_back({{"history", history}, {"candidates", {"distractor", turns[i]}}});
        }
        history.push_back(turns[i]);
    }
    return d.dump();
}

}  // namespace

TEST_CASE("load: one 2-turn dialogue gives one sample") {
    const auto r = load_personachat_json("[" + json_dialogue({"i like cats ."}, {"hi", "hello"}) + "]",
                                         Dialect::original, "mini.json");
    REQUIRE(r.samples.size() == 1);
    CHECK(r.samples[0].gold_response == "hello");
    CHECK(r.samples[0].context.size() == 1);
    CHECK(r.samples[0].context[0].speaker == Speaker::partner);
    CHECK(r.samples[0].profile.personas == std::vector<std::string>{"i like cats ."});
}

TEST_CASE("load: 4-turn dialogue gives two samples; the second has 3 context turns") {
    const auto r = load_personachat_json(
        "[" + json_dialogue({"p2 .", "p1 ."}, {"hi", "hello", "how are you", "fine"}) + "]", Dialect::original,
        "mini.json");
    REQUIRE(r.samples.size() == 2);
    CHECK(r.samples[1].context.size() == 3);
    CHECK(r.samples[1].gold_response == "fine");
    // Persona order is kept as read.
    CHECK(r.samples[1].profile.personas == std::vector<std::string>{"p2 .", "p1 ."});
    for (const auto& s : r.samples) {
        CHECK(s.context.back().speaker == Speaker::partner);
        for (std::size_t i = 0; i < s.context.size(); ++i)
            CHECK(s.context[i].speaker == (i % 2 == 0 ? Speaker::partner : Speaker::self));
    }
    CHECK(r.samples[0].dialogue_id() == r.samples[1].dialogue_id());
}

TEST_CASE("load: JSON object keyed by part records the part") {
    const std::string content = "{\"train\": [" + json_dialogue({"a ."}, {"x", "y"}) + "], \"valid\": [" +
                                json_dialogue({"b ."}, {"x", "y", "z", "w"}) + "]}";
    const auto r = load_personachat_json(content, Dialect::original, "both.json");
    REQUIRE(r.samples.size() == 3);
    CHECK(r.samples[0].source_part == "train");
    CHECK(r.samples[2].source_part == "valid");
    CHECK(r.samples[0].sample_id != r.samples[1].sample_id);
}

TEST_CASE("load: empty persona list is skipped and counted") {
    const std::string content =
        "[" + json_dialogue({}, {"hi", "hello"}) + "," + json_dialogue({"p ."}, {"hi", "hello"}) + "]";
    const auto r = load_personachat_json(content, Dialect::original, "mini.json");
    CHECK(r.samples.size() == 1);
    CHECK(r.stats.skipped_empty_persona == 1);
    CHECK(r.stats.dialogues == 2);
}

TEST_CASE("load: malformed records name the record") {
    try {
        load_personachat_json("[{\"personality\": [\"a\"], \"utterances\": [{\"history\": 3}]}]", Dialect::original,
                              "bad.json");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("dialogue #0 utterance #0") != std::string::npos);
    }
    CHECK_THROWS_AS(load_personachat_json("[1", Dialect::original, "bad.json"), ParseError);
}

TEST_CASE("load: line-oriented format") {
    std::istringstream in(
        "1 your persona: i love film.\n"
        "2 your persona: i have a dog.\n"
        "3 hi there\thello !\t\tcand a|cand b\n"
        "4 do you like movies ?\tyes , i love film .\n"
        "1 your persona: i am tall.\n"
        "2 what is up ?\tnot much .\n");
    const auto r = load_personachat_lines(in, Dialect::original, "train_self_original.txt");
    REQUIRE(r.samples.size() == 3);
    CHECK(r.samples[0].profile.personas == std::vector<std::string>{"i love film.", "i have a dog."});
    CHECK(r.samples[1].context.size() == 3);
    CHECK(r.samples[1].gold_response == "yes , i love film .");
    CHECK(r.samples[2].profile.personas == std::vector<std::string>{"i am tall."});
    CHECK(r.stats.dialogues == 2);

    std::istringstream bad("1 your persona: x\n2 no tab here\n");
    try {
        load_personachat_lines(bad, Dialect::original, "f.txt");
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("f.txt:2") != std::string::npos);
    }
}

TEST_CASE("load_personachat sniffs the format from disk") {
    testutil::TempDir dir;
    {
        std::ofstream(dir / "a.json") << "[" << json_dialogue({"p ."}, {"a", "b"}) << "]";
        std::ofstream(dir / "a.txt") << "1 your persona: p .\n2 a\tb\n";
    }
    const auto j = load_personachat((dir / "a.json").string(), Dialect::original);
    const auto t = load_personachat((dir / "a.txt").string(), Dialect::original);
    REQUIRE(j.samples.size() == 1);
    REQUIRE(t.samples.size() == 1);
    CHECK(j.samples[0].gold_response == t.samples[0].gold_response);
    CHECK(j.samples[0].profile == t.samples[0].profile);
    CHECK_THROWS_AS(load_personachat((dir / "missing.json").string(), Dialect::original), ParseError);
}

TEST_CASE("canonical JSONL round-trip") {
    std::vector<DialogueSample> v;
    v.push_back(make_sample("d/0#0", {"i like tea .", "caf\xC3\xA9 owner ."}, {"hi"}, "hello"));
    v.push_back(make_sample("d/0#1", {"i like tea .", "caf\xC3\xA9 owner ."}, {"hi", "hello", "tea?"}, "yes"));
    v.push_back(make_sample("d/1#0", {"x ."}, {"a"}, "b"));
    v[0].relevant_persona = PersonaChoice::none();
    v[1].relevant_persona = PersonaChoice::at(1);
    v[1].split = Split::valid2;
    testutil::TempDir dir;
    const auto path = (dir / "s.jsonl").string();
    write_jsonl(v, path);
    const auto back = read_jsonl(path);
    CHECK(back == v);

    const auto j = to_json(v[1]);
    for (const char* k : {"sample_id", "split", "personas", "context", "gold_response", "relevant_persona"})
        CHECK(j.contains(k));
    CHECK(j["relevant_persona"] == 1);
    CHECK(to_json(v[0])["relevant_persona"] == "NO_PERSONA");
    CHECK(to_json(v[2])["relevant_persona"].is_null());
}

namespace {

std::vector<DialogueSample> dialogues(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<DialogueSample> out;
    for (std::size_t d = 0; d < n; ++d) {
        const std::size_t turns = 1 + rng() % 4;
        for (std::size_t t = 0; t < turns; ++t)
            out.push_back(make_sample("src/d" + std::to_string(d) + "#" + std::to_string(t), {"p ."}, {"a"}, "b"));
    }
    return out;
}

}  // namespace

TEST_CASE("splits: degenerate all-train and determinism") {
    auto a = dialogues(10, 1);
    const auto m = make_splits(a, std::map<Split, double>{}, 5);
    CHECK(m.counts.at(Split::train) == a.size());
    for (Split s : {Split::valid1, Split::valid2, Split::test}) CHECK(m.counts.at(s) == 0);

    auto b = dialogues(40, 2), c = dialogues(40, 2);
    const std::map<Split, double> f = {{Split::valid1, 0.2}, {Split::test, 0.25}};
    const auto mb = make_splits(b, f, 9);
    const auto mc = make_splits(c, f, 9);
    CHECK(mb == mc);
    CHECK(b == c);
}

TEST_CASE("splits: whole dialogues, counts sum, exact count targets") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto v = dialogues(60, seed);
        SplitConfig cfg;
        cfg.targets[Split::valid1].count = 17;
        cfg.targets[Split::test].fraction = 0.2;
        const auto m = make_splits(v, cfg, seed);
        std::size_t sum = 0;
        for (const auto& [s, n] : m.counts) sum += n;
        CHECK(sum == v.size());
        CHECK(m.counts.at(Split::valid1) == 17);
        std::map<std::string, Split> owner;
        for (const auto& s : v) {
            REQUIRE(s.split.has_value());
            auto [it, fresh] = owner.emplace(s.dialogue_id(), *s.split);
            if (!fresh) CHECK(it->second == *s.split);
        }
    }
}

TEST_CASE("splits: membership depends only on seed and dialogue ids") {
    auto a = dialogues(30, 3);
    auto b = a;
    for (auto& s : b) s.gold_response = "changed";
    make_splits(a, {{Split::test, 0.3}}, 11);
    make_splits(b, {{Split::test, 0.3}}, 11);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].split == b[i].split);
}

TEST_CASE("splits: pinned parts and invalid fractions") {
    auto v = dialogues(20, 4);
    auto early = [](const DialogueSample& s) { return std::stoi(s.dialogue_id().substr(5)) < 10; };
    for (auto& s : v) s.source_part = early(s) ? "train" : "valid";
    SplitConfig cfg;
    cfg.pinned_parts["train"] = Split::train;
    cfg.targets[Split::valid1].count = 0;
    cfg.remainder = Split::valid2;
    make_splits(v, cfg, 1);
    for (const auto& s : v) CHECK(*s.split == (early(s) ? Split::train : Split::valid2));

    auto w = dialogues(5, 5);
    CHECK_THROWS_AS(make_splits(w, {{Split::test, 0.0}}, 1), ConfigError);
    CHECK_THROWS_AS(make_splits(w, {{Split::test, 0.7}, {Split::valid1, 0.5}}, 1), ConfigError);
}

namespace {

// Independent oracle: multiset unigram F1 over hand-listed content words.
double f1_oracle(const std::multiset<std::string>& a, const std::multiset<std::string>& b) {
    std::size_t common = 0;
    auto bb = b;
    for (const auto& w : a) {
        auto it = bb.find(w);
        if (it != bb.end()) {
            ++common;
            bb.erase(it);
        }
    }
    if (common == 0) return 0.0;
    const double p = double(common) / a.size(), r = double(common) / b.size();
    return 2 * p * r / (p + r);
}

}  // namespace

TEST_CASE("relevant persona: attorney example") {
    auto s = make_sample("d#0", {"i like to ski .", "i am an attorney", "my dog is brown ."}, {"what do you do ?"},
                         "i work a lot, i am an attorney");
    // Content words by hand: response {work, lot, attorney}; personas {like, ski}, {attorney}, {dog, brown}.
    const std::multiset<std::string> resp = {"work", "lot", "attorney"};
    CHECK(f1_oracle({"like", "ski"}, resp) == 0.0);
    CHECK(f1_oracle({"attorney"}, resp) == doctest::Approx(0.5));
    LexicalOverlapScorer scorer;
    CHECK(scorer.score("i am an attorney", s.gold_response) == doctest::Approx(0.5));
    CHECK(derive_relevant_persona(s, scorer, 0.15) == PersonaChoice::at(1));
}

TEST_CASE("relevant persona: no overlap and ties") {
    LexicalOverlapScorer scorer;
    auto none = make_sample("d#0", {"i like cats .", "i swim ."}, {"hi"}, "hello there friend");
    CHECK(derive_relevant_persona(none, scorer, 0.15).is_none());
    auto tie = make_sample("d#1", {"unrelated words .", "i love film .", "i love film ."}, {"hi"}, "i love film");
    CHECK(derive_relevant_persona(tie, scorer, 0.15) == PersonaChoice::at(1));
    for (int i = 0; i < 3; ++i) CHECK(derive_relevant_persona(tie, scorer, 0.15) == PersonaChoice::at(1));

    std::vector<DialogueSample> v = {none, tie};
    CHECK(label_samples(v, scorer, 0.15) == 1);
    CHECK(v[1].relevant_persona == PersonaChoice::at(1));
}
