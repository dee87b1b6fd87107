#include "pal/align_trainer.h"

#include <cmath>
#include <fstream>
#include <random>

#include "pal/errors.h"
#include "pal/eval.h"
#include "pal/inference.h"
#include "pal/mix_trainer.h"
#include "pal/prompt.h"
#include "pal/text.h"

namespace pal::align {

using nlohmann::json;

json AlignmentPair::to_json() const {
    return {{"sample_id", sample_id},
            {"conditioning_prompt", conditioning_prompt},
            {"chosen", chosen},
            {"rejected", rejected},
            {"gen_meta", gen_meta}};
}

AlignmentPair AlignmentPair::from_json(const json& j) {
    AlignmentPair p;
    try {
        p.sample_id = j.at("sample_id").get<std::string>();
        p.conditioning_prompt = j.at("conditioning_prompt").get<std::string>();
        p.chosen = j.at("chosen").get<std::string>();
        p.rejected = j.at("rejected").get<std::string>();
        p.gen_meta = j.value("gen_meta", json::object());
    } catch (const json::exception& e) {
        throw ParseError(std::string("malformed alignment pair: ") + e.what());
    }
    return p;
}

void write_pairs(const std::vector<AlignmentPair>& pairs, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PalError("cannot write " + path);
    for (const auto& p : pairs) out << p.to_json().dump() << '\n';
}

std::vector<AlignmentPair> read_pairs(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DependencyError("cannot open alignment pairs " + path);
    std::vector<AlignmentPair> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (text::trim(line).empty()) continue;
        try {
            out.push_back(AlignmentPair::from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

BuildPairsResult build_pairs(const lm::Backend& stage1, const std::vector<corpus::DialogueSample>& samples,
                             int max_new) {
    const auto generator = stage1.clone_frozen();
    const std::string checkpoint = generator->checkpoint_id();
    BuildPairsResult out;
    for (const auto& s : samples) {
        if (s.gold_response.empty()) continue;
        const std::string blind = prompt::render_generation(s, false).prompt_text;
        std::optional<std::string> generated;
        for (int attempt = 0; attempt < 2 && !generated; ++attempt) {
            try {
                generated = generator->generate(blind, max_new);
            } catch (const PalError&) {
                if (attempt == 0) ++out.retries;
            }
        }
        if (!generated) {
            ++out.backend_failures;
            continue;
        }
        std::string rejected = text::trim(*generated);
        if (rejected.empty()) {
            ++out.dropped_empty;
            continue;
        }
        AlignmentPair p;
        p.sample_id = s.sample_id;
        p.conditioning_prompt = prompt::render_generation(s, true).prompt_text;
        p.chosen = s.gold_response;
        p.rejected = std::move(rejected);
        p.gen_meta = {{"checkpoint_id", checkpoint},
                      {"decode", "greedy"},
                      {"max_new", max_new},
                      {"blind_prompt", blind}};
        out.pairs.push_back(std::move(p));
    }
    return out;
}

void DpoConfig::validate() const {
    if (!(beta >= 0.0)) throw ConfigError("dpo.beta must be >= 0");
    if (!(lr >= 0.0)) throw ConfigError("dpo.lr must be >= 0");
    if (warmup_steps < 0) throw ConfigError("dpo.warmup_steps must be >= 0");
    if (max_steps < 1) throw ConfigError("dpo.max_steps must be >= 1");
    if (eval_every < 1) throw ConfigError("dpo.eval_every must be >= 1");
    if (patience < 1) throw ConfigError("dpo.patience must be >= 1");
    if (batch_size < 1) throw ConfigError("dpo.batch_size must be >= 1");
}

double dpo_loss_from_margin(double beta, double margin) {
    const double x = beta * margin;
    return x >= 0.0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

namespace {

// sigma(-x)
double sigmoid_neg(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return e / (1.0 + e);
    }
    return 1.0 / (1.0 + std::exp(x));
}

DpoStepStats stats_from(double policy_chosen, double policy_rejected, double ref_chosen, double ref_rejected,
                        double beta) {
    DpoStepStats s;
    s.delta_gold = policy_chosen - ref_chosen;
    s.delta_gen = policy_rejected - ref_rejected;
    s.margin = s.delta_gold - s.delta_gen;
    s.loss = dpo_loss_from_margin(beta, s.margin);
    return s;
}

}  // namespace

DpoStepStats dpo_loss(const lm::Backend& policy, const lm::Backend& reference, const AlignmentPair& pair, double beta) {
    const double pc = policy.score(pair.conditioning_prompt, pair.chosen, true).total;
    const double pr = policy.score(pair.conditioning_prompt, pair.rejected, true).total;
    const double rc = reference.score(pair.conditioning_prompt, pair.chosen, true).total;
    const double rr = reference.score(pair.conditioning_prompt, pair.rejected, true).total;
    return stats_from(pc, pr, rc, rr, beta);
}

std::vector<DpoStepStats> accumulate_dpo_gradient(lm::Backend& policy, const lm::Backend& reference,
                                                  const std::vector<const AlignmentPair*>& pairs, double beta,
                                                  const std::vector<std::pair<double, double>>* reference_totals) {
    std::vector<DpoStepStats> out;
    out.reserve(pairs.size());
    const double inv_b = 1.0 / static_cast<double>(pairs.size());
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const AlignmentPair& p = *pairs[i];
        const double pc = policy.score(p.conditioning_prompt, p.chosen, true).total;
        const double pr = policy.score(p.conditioning_prompt, p.rejected, true).total;
        double rc = 0.0, rr = 0.0;
        if (reference_totals) {
            std::tie(rc, rr) = (*reference_totals)[i];
        } else {
            rc = reference.score(p.conditioning_prompt, p.chosen, true).total;
            rr = reference.score(p.conditioning_prompt, p.rejected, true).total;
        }
        const auto st = stats_from(pc, pr, rc, rr, beta);
        // dL/d(policy chosen total) = -beta * sigma(-beta m) / B; the rejected side is its negation.
        const double coef = beta * sigmoid_neg(beta * st.margin) * inv_b;
        policy.accumulate_gradient(p.conditioning_prompt, p.chosen, -coef, true);
        policy.accumulate_gradient(p.conditioning_prompt, p.rejected, coef, true);
        out.push_back(st);
    }
    return out;
}

SelectThenGenerateProbe::SelectThenGenerateProbe(std::vector<corpus::DialogueSample> samples,
                                                 const nli::NliScorer& nli, int max_new)
    : samples_(std::move(samples)), nli_(nli), max_new_(max_new) {}

double SelectThenGenerateProbe::evaluate(const lm::Backend& snapshot) {
    if (samples_.empty()) return 0.0;
    const auto batch = inference::batch_respond(snapshot, samples_,
                                                {inference::StrategyKind::select_then_generate, 0}, max_new_);
    return eval::cscore(batch.records, samples_, nli_).mean;
}

void Stage2Result::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw PalError("cannot write " + path.string());
    out.precision(10);
    out << "step,lr,loss,grad_norm,margin_mean,val_cscore\n";
    for (const auto& r : rows) {
        out << r.step << ',' << r.lr << ',' << r.loss << ',' << r.grad_norm << ',';
        if (r.margin_mean) out << *r.margin_mean;
        out << ',';
        if (r.val_cscore) out << *r.val_cscore;
        out << '\n';
    }
}

namespace {

struct StepOutcome {
    double loss = 0.0;
    std::optional<double> margin_mean;
};

using StepFn = std::function<StepOutcome(const std::vector<std::size_t>& batch)>;

Stage2Result run_stage2(lm::Backend& policy, std::size_t n_items, const DpoConfig& cfg, CScoreProbe& validator,
                        const StepFn& step_fn) {
    cfg.validate();
    if (policy.frozen()) throw UsageError("stage-2 training on a frozen model handle");
    if (n_items == 0) throw UsageError("stage-2 training has no usable examples");

    Stage2Result res;
    res.best = policy.clone_frozen();
    res.initial_cscore = validator.evaluate(*res.best);
    res.best_cscore = res.initial_cscore;
    res.rows.push_back({0, 0.0, 0.0, 0.0, std::nullopt, res.initial_cscore});

    int stale = 0;
    std::size_t step = 0;
    std::uint64_t epoch = 0;
    policy.zero_gradients();
    bool done = false;
    while (!done) {
        std::vector<std::size_t> order(n_items);
        for (std::size_t i = 0; i < n_items; ++i) order[i] = i;
        std::mt19937_64 rng(cfg.seed + epoch++);
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[static_cast<std::size_t>(rng() % i)]);

        for (std::size_t begin = 0; begin < n_items && !done; begin += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(n_items, begin + static_cast<std::size_t>(cfg.batch_size));
            const std::vector<std::size_t> batch(order.begin() + static_cast<long>(begin),
                                                 order.begin() + static_cast<long>(end));
            const StepOutcome outcome = step_fn(batch);
            if (!std::isfinite(outcome.loss)) {
                policy.zero_gradients();
                res.aborted = true;
                done = true;
                break;
            }
            ++step;
            const double lr = mix::scheduled_lr(cfg.lr, cfg.warmup_steps, step);
            lm::StepStats stats;
            try {
                stats = policy.apply_gradients(lr);
            } catch (const TrainingAborted&) {
                res.aborted = true;
                done = true;
                break;
            }
            Stage2LogRow row{step, lr, outcome.loss, stats.grad_norm, outcome.margin_mean, std::nullopt};

            const bool last = step >= static_cast<std::size_t>(cfg.max_steps);
            if (step % static_cast<std::size_t>(cfg.eval_every) == 0 || last) {
                auto snapshot = policy.clone_frozen();
                const double cs = validator.evaluate(*snapshot);
                row.val_cscore = cs;
                if (cs >= res.best_cscore) {
                    if (cs > res.best_cscore) stale = 0;
                    else ++stale;
                    res.best_cscore = cs;
                    res.best_step = step;
                    res.best = std::move(snapshot);
                } else {
                    ++stale;
                }
                if (stale >= cfg.patience) {
                    res.early_stopped = true;
                    done = true;
                }
            }
            res.rows.push_back(row);
            if (last) done = true;
        }
    }
    res.steps = step;
    return res;
}

}  // namespace

Stage2Result train_stage2(lm::Backend& policy, const std::vector<AlignmentPair>& pairs, const DpoConfig& cfg,
                          CScoreProbe& validator) {
    const auto reference = policy.clone_frozen();
    std::vector<const AlignmentPair*> usable;
    std::size_t skipped = 0;
    for (const auto& p : pairs) {
        if (policy.fits(p.conditioning_prompt, p.chosen, true) && policy.fits(p.conditioning_prompt, p.rejected, true)) {
            usable.push_back(&p);
        } else {
            ++skipped;
        }
    }
    std::vector<std::pair<double, double>> ref_totals;
    ref_totals.reserve(usable.size());
    for (const auto* p : usable) {
        ref_totals.emplace_back(reference->score(p->conditioning_prompt, p->chosen, true).total,
                                reference->score(p->conditioning_prompt, p->rejected, true).total);
    }

    StepFn step = [&](const std::vector<std::size_t>& batch) {
        std::vector<const AlignmentPair*> bp;
        std::vector<std::pair<double, double>> br;
        for (std::size_t i : batch) {
            bp.push_back(usable[i]);
            br.push_back(ref_totals[i]);
        }
        const auto stats = accumulate_dpo_gradient(policy, *reference, bp, cfg.beta, &br);
        StepOutcome o;
        double margin = 0.0;
        for (const auto& s : stats) {
            o.loss += s.loss;
            margin += s.margin;
        }
        o.loss /= static_cast<double>(stats.size());
        o.margin_mean = margin / static_cast<double>(stats.size());
        return o;
    };

    Stage2Result res = run_stage2(policy, usable.size(), cfg, validator, step);
    res.skipped_overlength = skipped;
    double margin = 0.0;
    for (std::size_t i = 0; i < usable.size(); ++i) {
        const double pc = res.best->score(usable[i]->conditioning_prompt, usable[i]->chosen, true).total;
        const double pr = res.best->score(usable[i]->conditioning_prompt, usable[i]->rejected, true).total;
        margin += (pc - ref_totals[i].first) - (pr - ref_totals[i].second);
    }
    res.best_margin_mean = margin / static_cast<double>(usable.size());
    return res;
}

Stage2Result train_stage2_ntp(lm::Backend& policy, const std::vector<corpus::DialogueSample>& samples,
                              const DpoConfig& cfg, CScoreProbe& validator) {
    std::vector<prompt::PromptInstance> usable;
    std::size_t skipped = 0;
    for (const auto& s : samples) {
        auto p = prompt::render_generation(s, true);
        if (policy.fits(p.prompt_text, p.target_text, true)) usable.push_back(std::move(p));
        else ++skipped;
    }
    StepFn step = [&](const std::vector<std::size_t>& batch) {
        std::size_t tokens = 0;
        for (std::size_t i : batch) tokens += policy.target_length(usable[i].target_text, true);
        const double weight = -1.0 / static_cast<double>(tokens);
        double sum = 0.0;
        for (std::size_t i : batch) {
            sum -= policy.accumulate_gradient(usable[i].prompt_text, usable[i].target_text, weight, true).total;
        }
        return StepOutcome{sum / static_cast<double>(tokens), std::nullopt};
    };
    Stage2Result res = run_stage2(policy, usable.size(), cfg, validator, step);
    res.skipped_overlength = skipped;
    return res;
}

}  // namespace pal::align
