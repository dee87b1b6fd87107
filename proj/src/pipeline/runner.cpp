#include "pal/pipeline/runner.h"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "pal/align_trainer.h"
#include "pal/errors.h"
#include "pal/eval.h"
#include "pal/inference.h"
#include "pal/lm/external.h"
#include "pal/lm/line_rpc.h"
#include "pal/lm/tiny_lm.h"
#include "pal/mix_trainer.h"
#include "pal/pipeline/synthetic.h"
#include "pal/prompt.h"
#include "pal/text.h"

namespace pal::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const std::pair<Stage, std::string_view> kStageNames[] = {
    {Stage::prepare, "prepare"},         {Stage::train_mix, "train-mix"}, {Stage::build_pairs, "build-pairs"},
    {Stage::train_align, "train-align"}, {Stage::generate, "generate"},   {Stage::evaluate, "evaluate"},
};

std::string utc_stamp(const char* fmt) {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[64];
    std::strftime(buf, sizeof(buf), fmt, &tm);
    return buf;
}

void write_text(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PalError("cannot write " + path.string());
    out << content;
    if (!out) throw PalError("write failed for " + path.string());
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DependencyError("cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

json list_outputs(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
    }
    std::sort(files.begin(), files.end());
    json out = json::array();
    for (const auto& rel : files) {
        if (rel == "manifest.json") continue;
        const fs::path full = dir / rel;
        out.push_back({{"path", rel.generic_string()},
                       {"sha256", text::sha256_file(full.string())},
                       {"bytes", fs::file_size(full)}});
    }
    return out;
}

void point_latest(const fs::path& stage_root, const std::string& tag) {
    const fs::path link = stage_root / "latest";
    const fs::path tmp = stage_root / ".latest.tmp";
    std::error_code ec;
    fs::remove(tmp, ec);
    fs::create_directory_symlink(tag, tmp);
    fs::rename(tmp, link);
}

}  // namespace

std::string_view to_string(Stage s) {
    for (const auto& [k, name] : kStageNames)
        if (k == s) return name;
    return "?";
}

Stage parse_stage(std::string_view s) {
    for (const auto& [k, name] : kStageNames)
        if (name == s) return k;
    throw UsageError("unknown stage '" + std::string(s) + "'");
}

fs::path default_root(const RunConfig& cfg) {
    if (!cfg.output_root.empty()) return cfg.output_root;
    if (const char* home = std::getenv("PAL_HOME"); home && *home) return home;
    return "pal_runs";
}

std::unique_ptr<lm::Backend> make_base_backend(const RunConfig& cfg, const std::vector<corpus::DialogueSample>& train) {
    if (cfg.backend.kind == "external") {
        auto client = std::make_shared<rpc::LineRpcClient>(cfg.backend.endpoint,
                                                           std::chrono::seconds(cfg.backend.timeout_s));
        return std::make_unique<lm::ExternalBackend>(client);
    }
    std::vector<std::string> texts;
    for (const auto& s : train) {
        if (s.relevant_persona) {
            const auto sel = prompt::render_selection(s);
            texts.push_back(sel.prompt_text + sel.target_text);
        }
        const auto gen = prompt::render_generation(s, true);
        texts.push_back(gen.prompt_text + gen.target_text);
        texts.push_back(prompt::render_generation(s, false).prompt_text);
    }
    auto pieces = lm::Tokenizer::learn_pieces(texts, cfg.backend.vocab_pieces);
    return std::make_unique<lm::TinyLm>(lm::Tokenizer::byte_level(std::move(pieces)), cfg.backend.tiny);
}

std::unique_ptr<nli::NliScorer> make_nli(const RunConfig& cfg) {
    if (cfg.nli.scorer == "external") {
        auto client =
            std::make_shared<rpc::LineRpcClient>(cfg.nli.endpoint, std::chrono::seconds(cfg.nli.timeout_s));
        return std::make_unique<nli::ExternalNliClient>(client);
    }
    return std::make_unique<nli::StubNliScorer>();
}

RunLock::RunLock(const fs::path& root) : path_(root / ".lock") {
    fs::create_directories(root);
    for (int attempt = 0; attempt < 2; ++attempt) {
        const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd >= 0) {
            const std::string pid = std::to_string(::getpid()) + "\n";
            [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
            ::close(fd);
            return;
        }
        if (errno != EEXIST) throw PalError("cannot create lock file " + path_.string());
        long holder = 0;
        std::ifstream(path_) >> holder;
        if (holder > 0 && (::kill(static_cast<pid_t>(holder), 0) == 0 || errno == EPERM)) {
            throw PalError("run directory " + root.string() + " is locked by process " + std::to_string(holder));
        }
        std::error_code ec;
        fs::remove(path_, ec);
    }
    throw PalError("cannot acquire lock " + path_.string());
}

RunLock::~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
}

Pipeline::Pipeline(RunConfig cfg, RunOptions opts)
    : cfg_(std::move(cfg)), opts_(std::move(opts)), root_(default_root(cfg_)) {
    tag_ = opts_.tag.empty() ? utc_stamp("%Y%m%d-%H%M%S") : opts_.tag;
    if (tag_ == "latest" || tag_.find('/') != std::string::npos || tag_.front() == '.')
        throw UsageError("invalid tag '" + tag_ + "'");
}

fs::path Pipeline::stage_dir(Stage s) const { return root_ / std::string(to_string(s)) / tag_; }
fs::path Pipeline::latest_dir(Stage s) const { return root_ / std::string(to_string(s)) / "latest"; }

void Pipeline::say(const std::string& line) const {
    if (opts_.log) *opts_.log << line << std::endl;
}

std::vector<Stage> Pipeline::plan_all() const {
    std::vector<Stage> plan = {Stage::prepare, Stage::train_mix};
    if (!cfg_.has(Ablation::no_pa)) {
        if (!cfg_.has(Ablation::no_pc)) plan.push_back(Stage::build_pairs);
        plan.push_back(Stage::train_align);
    }
    plan.push_back(Stage::generate);
    plan.push_back(Stage::evaluate);
    return plan;
}

void Pipeline::run(std::string_view command) {
    RunLock lock(root_);
    if (command == "all") {
        for (Stage s : plan_all()) execute(s);
    } else {
        execute(parse_stage(command));
    }
}

void Pipeline::run_stage(Stage s) {
    RunLock lock(root_);
    execute(s);
}

void Pipeline::execute(Stage s) {
    const std::string name(to_string(s));
    const fs::path out = stage_dir(s);
    say("== " + name + " [" + tag_ + "]");
    inputs_.clear();
    if (fs::exists(out) || fs::is_symlink(out)) {
        if (!opts_.force) throw UsageError("output " + out.string() + " already exists (use --force or another --tag)");
        fs::remove_all(out);
    }
    fs::create_directories(out);

    const std::string started = utc_stamp("%Y-%m-%dT%H:%M:%SZ");
    const auto t0 = std::chrono::steady_clock::now();
    json counters = json::object();
    try {
        switch (s) {
            case Stage::prepare: prepare(out, counters); break;
            case Stage::train_mix: train_mix(out, counters); break;
            case Stage::build_pairs: build_pairs(out, counters); break;
            case Stage::train_align: train_align(out, counters); break;
            case Stage::generate: generate(out, counters); break;
            case Stage::evaluate: evaluate(out, counters); break;
        }
    } catch (const std::exception& e) {
        try {
            write_text(out / "FAILED", std::string(e.what()) + "\n");
        } catch (const std::exception&) {
        }
        throw;
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    json manifest = {
        {"stage", name},
        {"tag", tag_},
        {"config_digest", cfg_.digest()},
        {"config", cfg_.resolved},
        {"inputs", inputs_},
        {"outputs", list_outputs(out)},
        {"counters", counters},
        {"started_at", started},
        {"wall_clock_seconds", seconds},
    };
    write_text(out / "manifest.json", manifest.dump(2) + "\n");
    point_latest(out.parent_path(), tag_);
    say("   done in " + std::to_string(seconds) + " s");
}

Pipeline::Input Pipeline::require(Stage upstream, Stage consumer) {
    const std::string up(to_string(upstream));
    const fs::path dir = latest_dir(upstream);
    const fs::path manifest = dir / "manifest.json";
    const std::string hint = "stage '" + std::string(to_string(consumer)) + "' needs the output of stage '" + up + "'";
    Input in{upstream, dir, json::object()};
    if (fs::exists(manifest) && !fs::exists(dir / "FAILED")) {
        in.manifest = read_json(manifest);
    } else if (opts_.force && fs::is_directory(dir)) {
        say("   warning: using " + dir.string() + " without a valid manifest (--force)");
    } else if (fs::exists(dir / "FAILED")) {
        throw DependencyError(hint + ", but its latest run under " + dir.string() + " failed; rerun `" + up + "`");
    } else {
        throw DependencyError(hint + ", but no manifest exists under " + dir.string() + "; run `" + up + "` first");
    }
    inputs_.push_back({{"stage", up},
                       {"tag", fs::is_symlink(dir) ? fs::read_symlink(dir).string() : std::string("latest")},
                       {"manifest_sha256", fs::exists(manifest) ? text::sha256_file(manifest.string()) : ""},
                       {"checkpoint_id", in.manifest.value("counters", json::object()).value("checkpoint_id", "")}});
    return in;
}

Stage Pipeline::model_source() const {
    return cfg_.has(Ablation::no_pa) ? Stage::train_mix : Stage::train_align;
}

std::unique_ptr<lm::Backend> Pipeline::load_model(const Input& in) const {
    if (cfg_.backend.kind == "external") {
        auto client = std::make_shared<rpc::LineRpcClient>(cfg_.backend.endpoint,
                                                           std::chrono::seconds(cfg_.backend.timeout_s));
        return std::make_unique<lm::ExternalBackend>(client);
    }
    const fs::path dir = in.dir / "model";
    if (!fs::exists(dir / "model.json"))
        throw DependencyError("no model checkpoint under " + dir.string());
    return lm::TinyLm::load(dir);
}

std::vector<corpus::DialogueSample> Pipeline::load_split(const Input& prepared, corpus::Split split,
                                                         std::size_t max_samples) const {
    auto samples = corpus::read_jsonl((prepared.dir / (std::string(corpus::to_string(split)) + ".jsonl")).string());
    if (max_samples > 0 && samples.size() > max_samples) samples.resize(max_samples);
    return samples;
}

// ---------------------------------------------------------------------------
// Stages

void Pipeline::prepare(const fs::path& out, json& counters) {
    std::vector<corpus::DialogueSample> samples;
    json load = json::object();
    if (cfg_.data.source == "synthetic") {
        samples = synthetic_corpus(cfg_.data.synthetic_samples, cfg_.data.synthetic_seed);
        load = {{"source", "synthetic"}, {"samples", samples.size()}};
    } else {
        for (const auto& [part, path] : cfg_.data.files) {
            auto r = corpus::load_personachat(path, cfg_.data.dialect);
            for (auto& s : r.samples) {
                if (s.source_part.empty()) s.source_part = part;
                samples.push_back(std::move(s));
            }
            load[part] = {{"path_sha256", text::sha256_file(path)},
                          {"dialogues", r.stats.dialogues},
                          {"samples", r.stats.samples},
                          {"skipped_empty_persona", r.stats.skipped_empty_persona}};
        }
        std::set<std::string> ids;
        for (const auto& s : samples) {
            if (!ids.insert(s.sample_id).second) throw ParseError("duplicate sample id " + s.sample_id);
        }
    }
    counters["load"] = load;

    std::unique_ptr<nli::NliScorer> nli;
    std::unique_ptr<corpus::RelevanceScorer> scorer;
    if (cfg_.relevance_scorer == "nli") {
        nli = make_nli(cfg_);
        scorer = std::make_unique<corpus::NliEntailmentScorer>(*nli);
    } else {
        scorer = std::make_unique<corpus::LexicalOverlapScorer>(cfg_.data.dialect);
    }
    counters["no_persona_labels"] = corpus::label_samples(samples, *scorer, cfg_.relevance_threshold);
    counters["relevance_scorer"] = scorer->name();

    const auto manifest = corpus::make_splits(samples, cfg_.split, cfg_.split_seed);
    counters["splits"] = manifest.to_json();
    write_text(out / "split_manifest.json", manifest.to_json().dump(2) + "\n");
    corpus::write_jsonl(samples, (out / "data.jsonl").string());
    for (corpus::Split s : corpus::kAllSplits) {
        corpus::write_jsonl(corpus::select_split(samples, s),
                            (out / (std::string(corpus::to_string(s)) + ".jsonl")).string());
    }
    std::ostringstream line;
    line << "   " << samples.size() << " samples:";
    for (const auto& [s, n] : manifest.counts) line << ' ' << corpus::to_string(s) << '=' << n;
    say(line.str());
}

void Pipeline::train_mix(const fs::path& out, json& counters) {
    const Input prepared = require(Stage::prepare, Stage::train_mix);
    const auto train = load_split(prepared, corpus::Split::train, 0);
    auto model = make_base_backend(cfg_, train);
    if (model->kind() == lm::BackendKind::external_adapter)
        throw UsageError("the external backend cannot be trained here; use it for generate/evaluate only");

    if (cfg_.has(Ablation::no_mix)) {
        counters["skipped"] = true;
        say("   no-mix: keeping the untrained base model");
    } else {
        mix::Stage1Options opt;
        opt.schedule = cfg_.stage1.schedule;
        opt.mix_ratio = cfg_.stage1.mix_ratio;
        opt.checkpoint_dir = out / "checkpoints";
        const auto log = mix::train_stage1(*model, train, opt);
        log.write_csv(out / "log.csv");
        counters["initial_loss"] = log.initial_loss;
        counters["final_loss"] = log.final_loss;
        counters["relative_drop"] = log.initial_loss > 0 ? 1.0 - log.final_loss / log.initial_loss : 0.0;
        counters["steps"] = log.steps;
        counters["dropped_overlength"] = log.dropped_overlength;
        counters["mix_ratio"] = opt.mix_ratio;
        std::ostringstream line;
        line << "   per-token loss " << log.initial_loss << " -> " << log.final_loss << " over " << log.steps
             << " steps";
        say(line.str());
    }
    counters["checkpoint_id"] = model->checkpoint_id();
    model->save(out / "model");
}

void Pipeline::build_pairs(const fs::path& out, json& counters) {
    const Input prepared = require(Stage::prepare, Stage::build_pairs);
    const Input stage1 = require(Stage::train_mix, Stage::build_pairs);
    const auto source = load_split(prepared, cfg_.pairs_split, 0);
    const auto model = load_model(stage1);
    const auto res = align::build_pairs(*model, source, cfg_.inference.max_new);
    align::write_pairs(res.pairs, (out / "pairs.jsonl").string());
    counters["pairs"] = res.pairs.size();
    counters["split"] = std::string(corpus::to_string(cfg_.pairs_split));
    counters["dropped_empty"] = res.dropped_empty;
    counters["backend_failures"] = res.backend_failures;
    counters["retries"] = res.retries;
    counters["generator_checkpoint_id"] = model->checkpoint_id();
    say("   " + std::to_string(res.pairs.size()) + " pairs (" + std::to_string(res.dropped_empty) + " empty dropped)");
}

void Pipeline::train_align(const fs::path& out, json& counters) {
    const Input prepared = require(Stage::prepare, Stage::train_align);
    const Input stage1 = require(Stage::train_mix, Stage::train_align);
    auto policy = load_model(stage1);
    const auto valid = load_split(prepared, cfg_.validation.split, cfg_.validation.max_samples);
    const auto nli = make_nli(cfg_);
    align::SelectThenGenerateProbe probe(valid, *nli, cfg_.inference.max_new);

    align::Stage2Result res;
    if (cfg_.has(Ablation::no_pc)) {
        const auto gold = load_split(prepared, cfg_.pairs_split, 0);
        res = align::train_stage2_ntp(*policy, gold, cfg_.dpo, probe);
        counters["objective"] = "ntp";
    } else {
        const Input pairs_in = require(Stage::build_pairs, Stage::train_align);
        const auto pairs = align::read_pairs((pairs_in.dir / "pairs.jsonl").string());
        res = align::train_stage2(*policy, pairs, cfg_.dpo, probe);
        counters["objective"] = "dpo";
    }
    res.write_csv(out / "log.csv");
    counters["beta"] = cfg_.dpo.beta;
    counters["steps"] = res.steps;
    counters["best_step"] = res.best_step;
    counters["initial_cscore"] = res.initial_cscore;
    counters["best_cscore"] = res.best_cscore;
    counters["best_margin_mean"] = res.best_margin_mean ? json(*res.best_margin_mean) : json(nullptr);
    counters["early_stopped"] = res.early_stopped;
    counters["skipped_overlength"] = res.skipped_overlength;
    counters["validation_samples"] = valid.size();
    counters["nli_degraded_calls"] = nli->degraded_calls();
    if (res.aborted) throw TrainingAborted("stage-2 loss became non-finite at step " + std::to_string(res.steps));
    counters["checkpoint_id"] = res.best->checkpoint_id();
    res.best->save(out / "model");
    std::ostringstream line;
    line << "   best step " << res.best_step << ", validation C.score " << res.initial_cscore << " -> "
         << res.best_cscore;
    if (res.best_margin_mean) line << ", mean margin " << *res.best_margin_mean;
    say(line.str());
}

void Pipeline::generate(const fs::path& out, json& counters) {
    const Input prepared = require(Stage::prepare, Stage::generate);
    const Input source = require(model_source(), Stage::generate);
    const auto model = load_model(source);
    const auto samples = load_split(prepared, cfg_.inference.split, cfg_.inference.max_samples);
    const inference::InferenceStrategy strategy{cfg_.inference.strategy, cfg_.inference.seed};
    const auto batch = inference::batch_respond(*model, samples, strategy, cfg_.inference.max_new);
    inference::write_records(batch.records, (out / "generations.jsonl").string());
    counters["strategy"] = std::string(inference::to_string(strategy.kind));
    counters["seed"] = strategy.seed;
    counters["max_new"] = cfg_.inference.max_new;
    counters["split"] = std::string(corpus::to_string(cfg_.inference.split));
    counters["model_stage"] = std::string(to_string(model_source()));
    counters["checkpoint_id"] = model->checkpoint_id();
    counters["inference"] = batch.counters.to_json();
    say("   " + std::to_string(batch.records.size()) + " responses, " +
        std::to_string(batch.counters.errors) + " errors");
}

void Pipeline::evaluate(const fs::path& out, json& counters) {
    const Input gen = require(Stage::generate, Stage::evaluate);
    const Input prepared = require(Stage::prepare, Stage::evaluate);
    const auto records = inference::read_records((gen.dir / "generations.jsonl").string());
    const auto samples = load_split(prepared, cfg_.inference.split, cfg_.inference.max_samples);
    const auto nli = make_nli(cfg_);

    eval::EvalOptions opt;
    opt.mode = eval::token_mode_for(cfg_.data.dialect);
    opt.rouge = cfg_.rouge;
    opt.config_digest = cfg_.digest();
    auto report = eval::evaluate_run(records, samples, *nli, opt);
    const json gen_counters = gen.manifest.value("counters", json::object());
    report.counters["generation"] = gen_counters.value("inference", json::object());
    report.counters["nli_degraded_calls"] = nli->degraded_calls();

    json j = report.to_json();
    j["provenance"] = {{"checkpoint_id", gen_counters.value("checkpoint_id", "")},
                       {"strategy", gen_counters.value("strategy", "")},
                       {"seed", gen_counters.value("seed", 0)},
                       {"generations_sha256", text::sha256_file((gen.dir / "generations.jsonl").string())},
                       {"nli", nli->name()}};
    write_text(out / "report.json", j.dump(2) + "\n");
    std::string label = "PAL";
    for (Ablation a : cfg_.ablations) label += " " + std::string(to_string(a));
    write_text(out / "report.txt", report.table(label));
    counters["metrics"] = j["metrics"];
    if (opts_.log) *opts_.log << report.table(label);
}

}  // namespace pal::pipeline
