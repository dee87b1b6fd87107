#include "pal/pipeline/config.h"

#include <cmath>
#include <fstream>
#include <sstream>

#include "pal/errors.h"
#include "pal/text.h"

namespace pal::pipeline {

using nlohmann::json;

namespace {

const std::pair<Ablation, std::string_view> kAblationNames[] = {
    {Ablation::no_mix, "no-mix"},   {Ablation::no_pa, "no-pa"},
    {Ablation::only_dg, "only-dg"}, {Ablation::only_ps, "only-ps"},
    {Ablation::no_pc, "no-pc"},     {Ablation::infer_random, "infer=random"},
    {Ablation::infer_notselect, "infer=notselect"},
};

// Objects whose keys are user-chosen rather than fixed by the defaults.
const std::set<std::string> kOpenObjects = {"data.files", "split.targets", "split.pinned_parts"};

std::string join_path(const std::string& prefix, const std::string& key) {
    return prefix.empty() ? key : prefix + "." + key;
}

bool same_kind(const json& def, const json& v) {
    if (def.is_number_float()) return v.is_number();
    if (def.is_number_integer()) return v.is_number_integer();
    if (def.is_string()) return v.is_string();
    if (def.is_boolean()) return v.is_boolean();
    if (def.is_array()) return v.is_array();
    if (def.is_object()) return v.is_object();
    return true;
}

std::string kind_name(const json& def) {
    if (def.is_number_float()) return "a number";
    if (def.is_number_integer()) return "an integer";
    if (def.is_string()) return "a string";
    if (def.is_boolean()) return "a boolean";
    if (def.is_array()) return "a list";
    return "an object";
}

void merge_checked(json& base, const json& user, const std::string& prefix, std::vector<std::string>& errors) {
    if (!user.is_object()) {
        errors.push_back((prefix.empty() ? std::string("config") : prefix) + ": expected an object");
        return;
    }
    for (const auto& [key, value] : user.items()) {
        const std::string path = join_path(prefix, key);
        if (kOpenObjects.count(prefix)) {
            base[key] = value;
            continue;
        }
        if (!base.contains(key)) {
            errors.push_back(path + ": unknown field");
            continue;
        }
        json& slot = base[key];
        if (!same_kind(slot, value)) {
            errors.push_back(path + ": expected " + kind_name(slot));
            continue;
        }
        if (slot.is_object() && !kOpenObjects.count(path)) {
            merge_checked(slot, value, path, errors);
        } else {
            slot = value;
        }
    }
}

void apply_override(json& target, const std::string& spec, std::vector<std::string>& errors) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) {
        errors.push_back("override '" + spec + "': expected key=value");
        return;
    }
    const std::string key = text::trim(spec.substr(0, eq));
    const std::string raw = spec.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;
    }
    json* node = &target;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) {
            errors.push_back("override '" + spec + "': empty path component");
            return;
        }
        if (dot == std::string::npos) {
            (*node)[part] = value;
            return;
        }
        json& next = (*node)[part];
        if (!next.is_object()) next = json::object();
        node = &next;
        start = dot + 1;
    }
}

template <typename F>
void field(std::vector<std::string>& errors, const std::string& path, F&& f) {
    try {
        f();
    } catch (const PalError& e) {
        errors.push_back(path + ": " + e.what());
    } catch (const json::exception& e) {
        errors.push_back(path + ": " + e.what());
    }
}

corpus::Split split_field(const json& j) { return corpus::parse_split(j.get<std::string>()); }

}  // namespace

std::string_view to_string(Ablation a) {
    for (const auto& [k, name] : kAblationNames)
        if (k == a) return name;
    return "?";
}

Ablation parse_ablation(std::string_view s) {
    for (const auto& [k, name] : kAblationNames)
        if (name == s) return k;
    throw UsageError("unknown ablation '" + std::string(s) +
                     "' (expected no-mix, no-pa, only-dg, only-ps, no-pc, infer=random or infer=notselect)");
}

json default_config_json() {
    const mix::TrainSchedule s1;
    const align::DpoConfig dpo;
    return {
        {"data",
         {{"source", "synthetic"},
          {"synthetic_samples", 200},
          {"synthetic_seed", 7},
          {"files", json::object()},
          {"dialect", "original"}}},
        {"split",
         {{"seed", 42},
          {"targets",
           {{"valid1", {{"fraction", 0.1}}}, {"valid2", {{"fraction", 0.1}}}, {"test", {{"fraction", 0.1}}}}},
          {"remainder", "train"},
          {"pinned_parts", json::object()}}},
        {"relevance", {{"scorer", "lexical"}, {"threshold", corpus::kDefaultRelevanceThreshold}}},
        {"backend",
         {{"kind", "tiny"},
          {"endpoint", ""},
          {"timeout_s", 30},
          {"vocab_pieces", 512},
          {"tiny", lm::TinyLmConfig{}.to_json()}}},
        {"stage1",
         {{"lr", s1.lr},
          {"warmup_steps", s1.warmup_steps},
          {"epochs", s1.epochs},
          {"batch_size", s1.batch_size},
          {"seed", 0},
          {"mix_ratio", 0.5}}},
        {"dpo",
         {{"beta", dpo.beta},
          {"lr", dpo.lr},
          {"warmup_steps", dpo.warmup_steps},
          {"max_steps", dpo.max_steps},
          {"eval_every", dpo.eval_every},
          {"patience", dpo.patience},
          {"batch_size", dpo.batch_size},
          {"seed", 0}}},
        {"pairs", {{"split", "valid1"}}},
        {"validation", {{"split", "valid2"}, {"max_samples", 0}}},
        {"inference",
         {{"strategy", "select_then_generate"},
          {"seed", 0},
          {"max_new", lm::kDefaultMaxNew},
          {"split", "test"},
          {"max_samples", 0}}},
        {"nli", {{"scorer", "stub"}, {"endpoint", ""}, {"timeout_s", 30}}},
        {"eval", {{"rouge", "f1"}}},
        {"ablations", json::array()},
        {"output", {{"root", ""}}},
    };
}

json load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    try {
        return json::parse(in, nullptr, true, true);
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::string RunConfig::digest() const {
    json j = resolved;
    j.erase("output");
    return text::sha256_hex(j.dump());
}

RunConfig resolve_config(const json& file, const std::vector<std::string>& overrides,
                         const std::vector<std::string>& ablations) {
    std::vector<std::string> errors;
    json user = file.is_null() ? json::object() : file;
    for (const auto& o : overrides) apply_override(user, o, errors);

    json j = default_config_json();
    merge_checked(j, user, "", errors);
    for (const auto& a : ablations) j["ablations"].push_back(a);

    RunConfig c;
    const json& d = j["data"];
    field(errors, "data.source", [&] {
        c.data.source = d["source"].get<std::string>();
        if (c.data.source != "synthetic" && c.data.source != "files")
            throw ConfigError("must be 'synthetic' or 'files'");
    });
    field(errors, "data.synthetic_samples", [&] {
        const auto n = d["synthetic_samples"].get<long long>();
        if (n < 1) throw ConfigError("must be >= 1");
        c.data.synthetic_samples = static_cast<std::size_t>(n);
    });
    field(errors, "data.synthetic_seed", [&] { c.data.synthetic_seed = d["synthetic_seed"].get<std::uint64_t>(); });
    field(errors, "data.files", [&] {
        for (const auto& [part, path] : d["files"].items()) {
            if (!path.is_string()) throw ConfigError("part '" + part + "' must map to a path");
            c.data.files[part] = path.get<std::string>();
        }
        if (c.data.source == "files" && c.data.files.empty()) throw ConfigError("no files given for source 'files'");
    });
    field(errors, "data.dialect", [&] { c.data.dialect = corpus::parse_dialect(d["dialect"].get<std::string>()); });

    const json& sp = j["split"];
    field(errors, "split.seed", [&] { c.split_seed = sp["seed"].get<std::uint64_t>(); });
    for (const auto& [name, t] : sp["targets"].items()) {
        field(errors, "split.targets." + name, [&] {
            const corpus::Split s = corpus::parse_split(name);
            if (s == corpus::Split::train) throw ConfigError("train cannot be a held-out target");
            if (!t.is_object()) throw ConfigError("expected {\"fraction\": f} or {\"count\": n}");
            corpus::SplitTarget target;
            if (t.contains("fraction") == t.contains("count") || t.size() != 1)
                throw ConfigError("expected exactly one of fraction or count");
            if (t.contains("fraction")) {
                const double f = t["fraction"].get<double>();
                if (!(f > 0.0 && f <= 1.0)) throw ConfigError("fraction must be in (0, 1]");
                target.fraction = f;
            } else {
                if (!t["count"].is_number_integer() || t["count"].get<long long>() < 0)
                    throw ConfigError("count must be a non-negative integer");
                target.count = t["count"].get<std::size_t>();
            }
            c.split.targets[s] = target;
        });
    }
    field(errors, "split.remainder", [&] { c.split.remainder = split_field(sp["remainder"]); });
    for (const auto& [part, s] : sp["pinned_parts"].items()) {
        field(errors, "split.pinned_parts." + part, [&] { c.split.pinned_parts[part] = split_field(s); });
    }

    const json& rel = j["relevance"];
    field(errors, "relevance.scorer", [&] {
        c.relevance_scorer = rel["scorer"].get<std::string>();
        if (c.relevance_scorer != "lexical" && c.relevance_scorer != "nli")
            throw ConfigError("must be 'lexical' or 'nli'");
    });
    field(errors, "relevance.threshold", [&] {
        c.relevance_threshold = rel["threshold"].get<double>();
        if (!std::isfinite(c.relevance_threshold)) throw ConfigError("must be finite");
    });

    const json& b = j["backend"];
    field(errors, "backend.kind", [&] {
        c.backend.kind = b["kind"].get<std::string>();
        if (c.backend.kind != "tiny" && c.backend.kind != "external")
            throw ConfigError("must be 'tiny' or 'external'");
    });
    field(errors, "backend.endpoint", [&] {
        c.backend.endpoint = b["endpoint"].get<std::string>();
        if (c.backend.kind == "external" && c.backend.endpoint.empty())
            throw ConfigError("required for the external backend");
    });
    field(errors, "backend.timeout_s", [&] {
        c.backend.timeout_s = b["timeout_s"].get<int>();
        if (c.backend.timeout_s < 1) throw ConfigError("must be >= 1");
    });
    field(errors, "backend.vocab_pieces", [&] {
        const auto n = b["vocab_pieces"].get<long long>();
        if (n < 0) throw ConfigError("must be >= 0");
        c.backend.vocab_pieces = static_cast<std::size_t>(n);
    });
    field(errors, "backend.tiny", [&] {
        c.backend.tiny = lm::TinyLmConfig::from_json(b["tiny"]);
        const auto& t = c.backend.tiny;
        if (t.d_model < 1 || t.n_layers < 1 || t.n_heads < 1 || t.d_ff < 1 || t.context < 2)
            throw ConfigError("sizes must be positive and context >= 2");
        if (t.d_model % t.n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    });

    const json& s1 = j["stage1"];
    field(errors, "stage1", [&] {
        auto& s = c.stage1.schedule;
        s.lr = s1["lr"].get<double>();
        s.warmup_steps = s1["warmup_steps"].get<int>();
        s.epochs = s1["epochs"].get<int>();
        s.batch_size = s1["batch_size"].get<int>();
        s.seed = s1["seed"].get<std::uint64_t>();
        s.validate();
    });
    field(errors, "stage1.mix_ratio", [&] {
        c.stage1.mix_ratio = s1["mix_ratio"].get<double>();
        if (!(c.stage1.mix_ratio >= 0.0 && c.stage1.mix_ratio <= 1.0)) throw ConfigError("must be in [0, 1]");
    });

    const json& dp = j["dpo"];
    field(errors, "dpo", [&] {
        auto& p = c.dpo;
        p.beta = dp["beta"].get<double>();
        p.lr = dp["lr"].get<double>();
        p.warmup_steps = dp["warmup_steps"].get<int>();
        p.max_steps = dp["max_steps"].get<int>();
        p.eval_every = dp["eval_every"].get<int>();
        p.patience = dp["patience"].get<int>();
        p.batch_size = dp["batch_size"].get<int>();
        p.seed = dp["seed"].get<std::uint64_t>();
        p.validate();
    });

    field(errors, "pairs.split", [&] { c.pairs_split = split_field(j["pairs"]["split"]); });

    const json& v = j["validation"];
    field(errors, "validation.split", [&] { c.validation.split = split_field(v["split"]); });
    field(errors, "validation.max_samples", [&] { c.validation.max_samples = v["max_samples"].get<std::size_t>(); });

    const json& inf = j["inference"];
    field(errors, "inference.strategy",
          [&] { c.inference.strategy = inference::parse_strategy(inf["strategy"].get<std::string>()); });
    field(errors, "inference.seed", [&] { c.inference.seed = inf["seed"].get<std::uint64_t>(); });
    field(errors, "inference.max_new", [&] {
        c.inference.max_new = inf["max_new"].get<int>();
        if (c.inference.max_new < 1) throw ConfigError("must be >= 1");
    });
    field(errors, "inference.split", [&] { c.inference.split = split_field(inf["split"]); });
    field(errors, "inference.max_samples", [&] { c.inference.max_samples = inf["max_samples"].get<std::size_t>(); });

    const json& n = j["nli"];
    field(errors, "nli.scorer", [&] {
        c.nli.scorer = n["scorer"].get<std::string>();
        if (c.nli.scorer != "stub" && c.nli.scorer != "external") throw ConfigError("must be 'stub' or 'external'");
    });
    field(errors, "nli.endpoint", [&] {
        c.nli.endpoint = n["endpoint"].get<std::string>();
        if (c.nli.scorer == "external" && c.nli.endpoint.empty())
            throw ConfigError("required for the external scorer");
    });
    field(errors, "nli.timeout_s", [&] {
        c.nli.timeout_s = n["timeout_s"].get<int>();
        if (c.nli.timeout_s < 1) throw ConfigError("must be >= 1");
    });

    field(errors, "eval.rouge", [&] {
        const auto r = j["eval"]["rouge"].get<std::string>();
        if (r == "f1") c.rouge = eval::RougeVariant::f1;
        else if (r == "recall_weighted") c.rouge = eval::RougeVariant::recall_weighted;
        else throw ConfigError("must be 'f1' or 'recall_weighted'");
    });
    field(errors, "output.root", [&] { c.output_root = j["output"]["root"].get<std::string>(); });

    std::vector<std::string> ablation_names;
    for (const auto& a : j["ablations"]) {
        field(errors, "ablations", [&] {
            if (!a.is_string()) throw ConfigError("entries must be strings");
            c.ablations.insert(parse_ablation(a.get<std::string>()));
        });
    }

    if (!errors.empty()) {
        std::ostringstream msg;
        msg << "invalid configuration:";
        for (const auto& e : errors) msg << "\n  " << e;
        throw ConfigError(msg.str());
    }

    const std::pair<Ablation, Ablation> exclusive[] = {
        {Ablation::only_dg, Ablation::only_ps},      {Ablation::infer_random, Ablation::infer_notselect},
        {Ablation::no_pa, Ablation::no_pc},          {Ablation::no_mix, Ablation::only_dg},
        {Ablation::no_mix, Ablation::only_ps},
    };
    for (const auto& [a, b2] : exclusive) {
        if (c.has(a) && c.has(b2))
            throw UsageError("ablations " + std::string(to_string(a)) + " and " + std::string(to_string(b2)) +
                             " are mutually exclusive");
    }

    if (c.has(Ablation::only_dg)) c.stage1.mix_ratio = 0.0;
    if (c.has(Ablation::only_ps)) c.stage1.mix_ratio = 1.0;
    if (c.has(Ablation::infer_random)) c.inference.strategy = inference::StrategyKind::random_select;
    if (c.has(Ablation::infer_notselect)) c.inference.strategy = inference::StrategyKind::not_select;

    j["stage1"]["mix_ratio"] = c.stage1.mix_ratio;
    j["inference"]["strategy"] = std::string(inference::to_string(c.inference.strategy));
    j["backend"]["tiny"] = c.backend.tiny.to_json();
    json abl = json::array();
    for (Ablation a : c.ablations) abl.push_back(std::string(to_string(a)));
    j["ablations"] = abl;
    c.resolved = std::move(j);
    return c;
}

}  // namespace pal::pipeline
