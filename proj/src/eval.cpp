#include "pal/eval.h"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <unordered_map>

#include "pal/errors.h"
#include "pal/text.h"

namespace pal::eval {

TokenMode token_mode_for(corpus::Dialect d) {
    return d == corpus::Dialect::baidu ? TokenMode::characters : TokenMode::words;
}

std::vector<std::string> metric_tokens(std::string_view s, TokenMode mode) {
    return mode == TokenMode::characters ? text::split_codepoints(s) : text::split_whitespace(text::to_lower_ascii(s));
}

namespace {

void check_corpus(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
    if (hyps.empty()) throw UsageError("metric over an empty corpus");
    if (hyps.size() != refs.size()) throw UsageError("hypothesis and reference counts differ");
}

std::map<std::vector<std::string>, int> ngram_counts(const std::vector<std::string>& toks, int n) {
    std::map<std::vector<std::string>, int> out;
    const auto N = static_cast<std::size_t>(n);
    for (std::size_t i = 0; i + N <= toks.size(); ++i) {
        ++out[std::vector<std::string>(toks.begin() + static_cast<long>(i), toks.begin() + static_cast<long>(i + N))];
    }
    return out;
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double rouge_pair(const std::vector<std::string>& h, const std::vector<std::string>& r, RougeVariant variant) {
    if (h.empty() || r.empty()) return 0.0;
    const std::size_t lcs = lcs_length(h, r);
    if (lcs == 0) return 0.0;
    const double p = static_cast<double>(lcs) / static_cast<double>(h.size());
    const double rc = static_cast<double>(lcs) / static_cast<double>(r.size());
    if (variant == RougeVariant::f1) return 2.0 * p * rc / (p + rc);
    constexpr double beta = 1.2;
    return (1.0 + beta * beta) * p * rc / (rc + beta * beta * p);
}

}  // namespace

double bleu_n(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references, int n,
              TokenMode mode) {
    check_corpus(hypotheses, references);
    if (n != 1 && n != 2) throw UsageError("bleu_n supports n = 1 or 2");
    std::size_t matches = 0, total = 0, hyp_len = 0, ref_len = 0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        const auto h = metric_tokens(hypotheses[i], mode);
        const auto r = metric_tokens(references[i], mode);
        hyp_len += h.size();
        ref_len += r.size();
        const auto hc = ngram_counts(h, n);
        const auto rc = ngram_counts(r, n);
        for (const auto& [g, c] : hc) {
            total += static_cast<std::size_t>(c);
            auto it = rc.find(g);
            if (it != rc.end()) matches += static_cast<std::size_t>(std::min(c, it->second));
        }
    }
    if (total == 0 || hyp_len == 0) return 0.0;
    const double precision = static_cast<double>(matches) / static_cast<double>(total);
    const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return precision * bp;
}

double rouge_l(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references, TokenMode mode,
               RougeVariant variant) {
    check_corpus(hypotheses, references);
    double sum = 0.0;
    for (std::size_t i = 0; i < hypotheses.size(); ++i) {
        sum += rouge_pair(metric_tokens(hypotheses[i], mode), metric_tokens(references[i], mode), variant);
    }
    return sum / static_cast<double>(hypotheses.size());
}

double entropy(const std::vector<std::string>& hypotheses, TokenMode mode, bool* all_empty) {
    if (hypotheses.empty()) throw UsageError("entropy over an empty corpus");
    std::unordered_map<std::string, std::size_t> counts;
    std::size_t total = 0;
    for (const auto& h : hypotheses) {
        for (auto& t : metric_tokens(h, mode)) {
            ++counts[std::move(t)];
            ++total;
        }
    }
    if (all_empty) *all_empty = total == 0;
    if (total == 0) return 0.0;
    // Summation order must not depend on hash iteration order.
    std::map<std::string, std::size_t> ordered(counts.begin(), counts.end());
    double h = 0.0;
    for (const auto& [w, c] : ordered) {
        const double p = static_cast<double>(c) / static_cast<double>(total);
        h -= p * std::log(p);
    }
    return h;
}

CScoreResult cscore(const std::vector<inference::GenerationRecord>& records,
                    const std::vector<corpus::DialogueSample>& samples, const nli::NliScorer& nli) {
    std::unordered_map<std::string, const corpus::DialogueSample*> by_id;
    for (const auto& s : samples) by_id.emplace(s.sample_id, &s);
    const std::size_t degraded_before = nli.degraded_calls();
    CScoreResult out;
    long long sum = 0;
    for (const auto& r : records) {
        auto it = by_id.find(r.sample_id);
        if (it == by_id.end()) throw UsageError("record " + r.sample_id + " has no matching sample");
        int s = 0;
        for (const auto& p : it->second->profile.personas) s += static_cast<int>(nli.classify(p, r.response));
        out.per_sample.push_back(s);
        sum += s;
    }
    out.mean = records.empty() ? 0.0 : static_cast<double>(sum) / static_cast<double>(records.size());
    out.degraded_calls = nli.degraded_calls() - degraded_before;
    return out;
}

nlohmann::json MetricReport::to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& p : per_sample) {
        per.push_back({{"sample_id", p.sample_id},
                       {"bleu1", p.bleu1},
                       {"bleu2", p.bleu2},
                       {"rougeL", p.rougeL},
                       {"cscore", p.cscore}});
    }
    return {{"metrics",
             {{"bleu1", bleu1},
              {"bleu2", bleu2},
              {"rougeL", rougeL},
              {"entropy", entropy},
              {"cscore", cscore},
              {"n_samples", n_samples}}},
            {"counters", counters},
            {"config_digest", config_digest},
            {"metadata",
             {{"bleu", "order-n modified precision with brevity penalty (individual, not cumulative)"},
              {"rougeL", "mean per-sample LCS F-measure"},
              {"entropy", "corpus-level unigram Shannon entropy, natural log"},
              {"cscore", "mean over samples of sum over personas of NLI label (+1/0/-1)"}}},
            {"per_sample", per}};
}

std::string MetricReport::table(std::string_view label) const {
    char row[256];
    std::ostringstream out;
    std::snprintf(row, sizeof(row), "%-24s %8s %8s %8s %8s %8s\n", "Model", "BLEU-1", "BLEU-2", "ROUGE-L", "Entropy",
                  "C.score");
    out << row;
    std::snprintf(row, sizeof(row), "%-24.24s %8.2f %8.2f %8.2f %8.2f %8.3f\n", std::string(label).c_str(),
                  bleu1 * 100.0, bleu2 * 100.0, rougeL * 100.0, entropy, cscore);
    out << row;
    return out.str();
}

MetricReport evaluate_run(const std::vector<inference::GenerationRecord>& records,
                          const std::vector<corpus::DialogueSample>& samples, const nli::NliScorer& nli,
                          const EvalOptions& options) {
    if (records.empty()) throw UsageError("evaluate_run: no generation records");
    std::unordered_map<std::string, const corpus::DialogueSample*> by_id;
    for (const auto& s : samples) by_id.emplace(s.sample_id, &s);

    std::vector<std::string> hyps, refs;
    std::size_t empty = 0, failed = 0;
    for (const auto& r : records) {
        auto it = by_id.find(r.sample_id);
        if (it == by_id.end()) throw UsageError("record " + r.sample_id + " has no matching sample");
        hyps.push_back(r.response);
        refs.push_back(it->second->gold_response);
        if (text::trim(r.response).empty()) ++empty;
        if (r.failed) ++failed;
    }

    MetricReport rep;
    rep.n_samples = records.size();
    rep.config_digest = options.config_digest;
    rep.bleu1 = bleu_n(hyps, refs, 1, options.mode);
    rep.bleu2 = bleu_n(hyps, refs, 2, options.mode);
    rep.rougeL = rouge_l(hyps, refs, options.mode, options.rouge);
    bool all_empty = false;
    rep.entropy = entropy(hyps, options.mode, &all_empty);
    const auto cs = cscore(records, samples, nli);
    rep.cscore = cs.mean;

    for (std::size_t i = 0; i < records.size(); ++i) {
        PerSample p;
        p.sample_id = records[i].sample_id;
        p.bleu1 = bleu_n({hyps[i]}, {refs[i]}, 1, options.mode);
        p.bleu2 = bleu_n({hyps[i]}, {refs[i]}, 2, options.mode);
        p.rougeL = rouge_l({hyps[i]}, {refs[i]}, options.mode, options.rouge);
        p.cscore = cs.per_sample[i];
        rep.per_sample.push_back(std::move(p));
    }
    rep.counters = {{"empty_responses", empty},
                    {"failed_generations", failed},
                    {"entropy_all_empty_warning", all_empty},
                    {"nli_degraded_calls", cs.degraded_calls}};
    return rep;
}

}  // namespace pal::eval
