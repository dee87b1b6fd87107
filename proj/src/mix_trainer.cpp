#include "pal/mix_trainer.h"

#include <cmath>
#include <fstream>
#include <random>

#include "pal/errors.h"

namespace pal::mix {

void TrainSchedule::validate() const {
    if (!(lr > 0.0)) throw ConfigError("stage1.lr must be > 0");
    if (warmup_steps < 0) throw ConfigError("stage1.warmup_steps must be >= 0");
    if (epochs < 1) throw ConfigError("stage1.epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("stage1.batch_size must be >= 1");
}

double scheduled_lr(double lr, int warmup_steps, std::size_t step) {
    if (warmup_steps <= 0 || step >= static_cast<std::size_t>(warmup_steps)) return lr;
    return lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

MixLoss mix_loss(const lm::Backend& backend, const MixBatch& batch) {
    if (batch.instances.empty()) throw UsageError("mix_loss: empty batch");
    MixLoss out;
    for (const auto& inst : batch.instances) {
        const auto sc = backend.score(inst.prompt_text, inst.target_text, true);
        out.sum -= sc.total;
        out.tokens += sc.logprobs.size();
    }
    out.mean_per_token = out.tokens ? out.sum / static_cast<double>(out.tokens) : 0.0;
    return out;
}

namespace {

template <typename T>
void shuffle(std::vector<T>& v, std::mt19937_64& rng) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng() % i)]);
}

}  // namespace

MixStream build_mix_stream(const lm::Backend& backend, const std::vector<corpus::DialogueSample>& samples,
                           double mix_ratio, std::uint64_t seed) {
    if (!(mix_ratio >= 0.0 && mix_ratio <= 1.0)) throw ConfigError("mix_ratio must be in [0, 1]");
    MixStream out;
    std::vector<prompt::PromptInstance> sel, gen;
    for (const auto& s : samples) {
        if (mix_ratio > 0.0) {
            auto p = prompt::render_selection(s);
            if (backend.fits(p.prompt_text, p.target_text, true)) sel.push_back(std::move(p));
            else ++out.dropped_overlength;
        }
        if (mix_ratio < 1.0) {
            auto p = prompt::render_generation(s, true);
            if (backend.fits(p.prompt_text, p.target_text, true)) gen.push_back(std::move(p));
            else ++out.dropped_overlength;
        }
    }

    std::mt19937_64 rng(seed);
    shuffle(sel, rng);
    shuffle(gen, rng);
    std::size_t n_sel = sel.size();
    std::size_t n_gen = gen.size();
    if (mix_ratio > 0.0 && mix_ratio < 1.0) {
        if (mix_ratio >= 0.5) {
            n_gen = std::min(gen.size(), static_cast<std::size_t>(std::llround(static_cast<double>(sel.size()) *
                                                                               (1.0 - mix_ratio) / mix_ratio)));
        } else {
            n_sel = std::min(sel.size(), static_cast<std::size_t>(std::llround(static_cast<double>(gen.size()) *
                                                                               mix_ratio / (1.0 - mix_ratio))));
        }
    }

    const std::size_t total = n_sel + n_gen;
    const double rho = total ? static_cast<double>(n_sel) / static_cast<double>(total) : 0.0;
    std::size_t taken_sel = 0, taken_gen = 0;
    out.instances.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        const auto want_sel = static_cast<std::size_t>(std::floor(static_cast<double>(i + 1) * rho + 1e-9));
        if ((want_sel > taken_sel && taken_sel < n_sel) || taken_gen == n_gen) {
            out.instances.push_back(sel[taken_sel++]);
        } else {
            out.instances.push_back(gen[taken_gen++]);
        }
    }
    return out;
}

void Stage1Log::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw PalError("cannot write " + path.string());
    out.precision(10);
    out << "step,lr,loss,grad_norm\n";
    for (const auto& r : rows) out << r.step << ',' << r.lr << ',' << r.loss << ',' << r.grad_norm << '\n';
}

namespace {

double stream_loss(const lm::Backend& model, const std::vector<prompt::PromptInstance>& stream) {
    if (stream.empty()) return 0.0;
    MixBatch all{stream, 0.0};
    return mix_loss(model, all).mean_per_token;
}

}  // namespace

Stage1Log train_stage1(lm::Backend& model, const std::vector<corpus::DialogueSample>& train,
                       const Stage1Options& options) {
    const auto& sched = options.schedule;
    sched.validate();
    if (model.frozen()) throw UsageError("train_stage1 on a frozen model handle");
    if (train.empty()) throw UsageError("train_stage1: empty training corpus");

    Stage1Log log;
    const MixStream first = build_mix_stream(model, train, options.mix_ratio, sched.seed);
    log.dropped_overlength = first.dropped_overlength;
    if (first.instances.empty()) throw UsageError("train_stage1: every instance exceeds the context limit");
    log.initial_loss = stream_loss(model, first.instances);

    std::size_t step = 0;
    model.zero_gradients();
    for (int epoch = 1; epoch <= sched.epochs; ++epoch) {
        const MixStream stream =
            epoch == 1 ? first : build_mix_stream(model, train, options.mix_ratio, sched.seed + static_cast<std::uint64_t>(epoch - 1));
        const auto& inst = stream.instances;
        double epoch_loss = 0.0;
        std::size_t epoch_tokens = 0;
        for (std::size_t begin = 0; begin < inst.size(); begin += static_cast<std::size_t>(sched.batch_size)) {
            const std::size_t end = std::min(inst.size(), begin + static_cast<std::size_t>(sched.batch_size));
            std::size_t tokens = 0;
            for (std::size_t i = begin; i < end; ++i) tokens += model.target_length(inst[i].target_text, true);
            const double weight = -1.0 / static_cast<double>(tokens);
            double loss_sum = 0.0;
            for (std::size_t i = begin; i < end; ++i) {
                loss_sum -= model.accumulate_gradient(inst[i].prompt_text, inst[i].target_text, weight, true).total;
            }
            const double loss = loss_sum / static_cast<double>(tokens);
            if (!std::isfinite(loss)) {
                model.zero_gradients();
                throw TrainingAborted("non-finite stage-1 loss at step " + std::to_string(step + 1));
            }
            ++step;
            const double lr = scheduled_lr(sched.lr, sched.warmup_steps, step);
            const auto stats = model.apply_gradients(lr);
            log.rows.push_back({step, lr, loss, loss_sum, stats.grad_norm});
            epoch_loss += loss_sum;
            epoch_tokens += tokens;
        }
        if (options.checkpoint_dir) {
            const auto dir = *options.checkpoint_dir / ("epoch-" + std::to_string(epoch));
            model.save(dir);
            nlohmann::json manifest{{"step", step},
                                    {"epoch", epoch},
                                    {"loss", epoch_tokens ? epoch_loss / static_cast<double>(epoch_tokens) : 0.0},
                                    {"seed", sched.seed},
                                    {"template_version", prompt::kTemplateVersion},
                                    {"checkpoint_id", model.checkpoint_id()}};
            std::ofstream(dir / "manifest.json", std::ios::trunc) << manifest.dump(2) << '\n';
        }
    }
    log.steps = step;
    log.final_loss = stream_loss(model, first.instances);
    return log;
}

}  // namespace pal::mix
