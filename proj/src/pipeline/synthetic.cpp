#include "pal/pipeline/synthetic.h"

#include <algorithm>
#include <random>
#include <string>

namespace pal::pipeline {

namespace {

struct Topic {
    const char* persona;  // "{}" is replaced by the slot value
    std::vector<const char*> questions;
    std::vector<const char*> values;
};

const std::vector<Topic>& topics() {
    static const std::vector<Topic> t = {
        {"i have a {} .", {"do you have any pets ?", "any animals at home ?"}, {"dog", "cat", "parrot", "rabbit", "horse", "turtle"}},
        {"i work as a {} .", {"what do you do for a living ?", "what is your job ?"}, {"nurse", "teacher", "chef", "pilot", "farmer", "lawyer"}},
        {"my favorite food is {} .", {"what do you like to eat ?", "what is your favorite food ?"}, {"pizza", "sushi", "tacos", "pasta", "steak", "curry"}},
        {"i live in {} .", {"where are you from ?", "where do you live ?"}, {"texas", "paris", "boston", "london", "ohio", "tokyo"}},
        {"i like to {} on weekends .", {"what do you do for fun ?", "any hobbies ?"}, {"hike", "swim", "paint", "read", "dance", "fish"}},
        {"my favorite color is {} .", {"what is your favorite color ?", "which color do you like ?"}, {"blue", "green", "red", "purple", "yellow", "orange"}},
        {"i play {} every week .", {"do you play any sports ?", "what sport do you play ?"}, {"soccer", "tennis", "golf", "hockey", "baseball", "chess"}},
        {"i listen to {} music .", {"what music do you like ?", "what do you listen to ?"}, {"jazz", "rock", "country", "classical", "pop", "blues"}},
    };
    return t;
}

struct SmallTalk {
    const char* partner;
    const char* reply;
};

const std::vector<SmallTalk>& openers() {
    static const std::vector<SmallTalk> s = {
        {"hi , how are you today ?", "i am doing well , thank you ."},
        {"hello there !", "hello , nice to meet you ."},
        {"hey , how is it going ?", "it is going great , thanks for asking ."},
        {"good morning !", "good morning to you too ."},
    };
    return s;
}

const std::vector<SmallTalk>& closers() {
    static const std::vector<SmallTalk> s = {
        {"well , it was nice talking to you .", "same here , have a good day ."},
        {"i have to go now , bye .", "okay , bye for now ."},
        {"thanks for the chat .", "you are welcome , take care ."},
    };
    return s;
}

const std::vector<std::string>& follow_ups() {
    static const std::vector<std::string> s = {" , what about you ?", " , and you ?", " , how about you ?"};
    return s;
}

std::string fill(const char* pattern, const char* value) {
    std::string s(pattern);
    const auto pos = s.find("{}");
    if (pos != std::string::npos) s.replace(pos, 2, value);
    return s;
}

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
    return v[static_cast<std::size_t>(rng() % v.size())];
}

}  // namespace

std::vector<corpus::DialogueSample> synthetic_corpus(std::size_t n_samples, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<corpus::DialogueSample> out;
    out.reserve(n_samples);
    const auto& all = topics();

    for (std::size_t d = 0; out.size() < n_samples; ++d) {
        std::vector<std::size_t> order(all.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

        const std::size_t n_personas = 4;
        corpus::PersonaProfile profile;
        profile.user_id = "synthetic/u" + std::to_string(d);
        for (std::size_t k = 0; k < n_personas; ++k) {
            const Topic& t = all[order[k]];
            const std::string sentence = fill(t.persona, pick(t.values, rng));
            profile.personas.push_back(sentence);
        }

        // Exchanges: opener, two or three persona questions, sometimes a closer.
        std::vector<std::pair<std::string, std::string>> exchanges;
        const auto& op = pick(openers(), rng);
        exchanges.emplace_back(op.partner, op.reply);
        const std::size_t n_questions = 2 + rng() % 2;
        std::vector<std::size_t> asked(n_personas);
        for (std::size_t i = 0; i < n_personas; ++i) asked[i] = i;
        for (std::size_t i = asked.size(); i > 1; --i) std::swap(asked[i - 1], asked[rng() % i]);
        for (std::size_t q = 0; q < n_questions; ++q) {
            const Topic& t = all[order[asked[q]]];
            // The reply restates the persona fact without quoting the sentence verbatim.
            std::string reply = profile.personas[asked[q]];
            reply.resize(reply.size() - 2);
            reply += pick(follow_ups(), rng);
            exchanges.emplace_back(pick(t.questions, rng), reply);
        }
        if (rng() % 2 == 0) {
            const auto& cl = pick(closers(), rng);
            exchanges.emplace_back(cl.partner, cl.reply);
        }

        std::vector<corpus::DialogueTurn> history;
        for (std::size_t r = 0; r < exchanges.size() && out.size() < n_samples; ++r) {
            history.push_back({corpus::Speaker::partner, exchanges[r].first});
            corpus::DialogueSample s;
            s.sample_id = "synthetic/d" + std::to_string(d) + "#" + std::to_string(r);
            s.profile = profile;
            s.context = history;
            s.gold_response = exchanges[r].second;
            out.push_back(std::move(s));
            history.push_back({corpus::Speaker::self, exchanges[r].second});
        }
    }
    return out;
}

}  // namespace pal::pipeline
