#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pal/errors.h"
#include "pal/pipeline/config.h"
#include "pal/pipeline/runner.h"
#include "pal/pipeline/synthetic.h"
#include "pal/prompt.h"

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kDependency = 3 };

int run_pipeline(const std::string& command, const std::string& config_path, const std::vector<std::string>& overrides,
                 const std::vector<std::string>& ablations, const std::string& tag, bool force) {
    using namespace pal::pipeline;
    nlohmann::json file = nlohmann::json::object();
    if (!config_path.empty()) file = load_config_file(config_path);
    RunConfig cfg = resolve_config(file, overrides, ablations);
    Pipeline p(std::move(cfg), {tag, force, &std::cerr});
    p.run(command);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Persona-aware dialogue training pipeline"};
    app.require_subcommand(1);

    std::string config_path, tag;
    std::vector<std::string> overrides, ablations;
    bool force = false;

    const std::vector<std::string> commands = {"prepare",     "train-mix", "build-pairs", "train-align",
                                               "generate",    "evaluate",  "all"};
    for (const auto& name : commands) {
        auto* sub = app.add_subcommand(name, name == "all" ? "run every stage in order" : "run the " + name + " stage");
        sub->add_option("--config", config_path, "JSON run configuration");
        sub->add_option("--overrides", overrides, "dotted key=value overrides, e.g. dpo.beta=0.1");
        sub->add_option("--ablation", ablations,
                        "no-mix | no-pa | only-dg | only-ps | no-pc | infer=random | infer=notselect");
        sub->add_option("--tag", tag, "output directory name under each stage (default: UTC timestamp)");
        sub->add_flag("--force", force, "overwrite an existing tag and accept inputs without a valid manifest");
    }

    auto* templates = app.add_subcommand("templates", "print the prompt templates");
    auto* config_cmd = app.add_subcommand("config", "print the resolved configuration");
    config_cmd->add_option("--config", config_path, "JSON run configuration");
    config_cmd->add_option("--overrides", overrides, "dotted key=value overrides");
    config_cmd->add_option("--ablation", ablations, "ablation flags");
    auto* synth = app.add_subcommand("synth", "write the synthetic corpus as JSONL to stdout");
    std::size_t synth_n = 200;
    std::uint64_t synth_seed = 7;
    synth->add_option("-n,--samples", synth_n, "number of samples");
    synth->add_option("--seed", synth_seed, "generator seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (templates->parsed()) {
            using pal::prompt::TaskKind;
            for (TaskKind k : {TaskKind::selection, TaskKind::generation, TaskKind::pair_construction,
                               TaskKind::infer_select, TaskKind::infer_generate}) {
                std::cout << "## " << pal::prompt::to_string(k) << "\n" << pal::prompt::template_text(k) << "\n\n";
            }
            return kOk;
        }
        if (config_cmd->parsed()) {
            nlohmann::json file = nlohmann::json::object();
            if (!config_path.empty()) file = pal::pipeline::load_config_file(config_path);
            const auto cfg = pal::pipeline::resolve_config(file, overrides, ablations);
            std::cout << cfg.resolved.dump(2) << "\ndigest " << cfg.digest() << "\n";
            return kOk;
        }
        if (synth->parsed()) {
            pal::corpus::write_jsonl(pal::pipeline::synthetic_corpus(synth_n, synth_seed), std::cout);
            return kOk;
        }
        for (auto* sub : app.get_subcommands()) {
            return run_pipeline(sub->get_name(), config_path, overrides, ablations, tag, force);
        }
    } catch (const pal::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const pal::UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kUsage;
    } catch (const pal::DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return kDependency;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}
