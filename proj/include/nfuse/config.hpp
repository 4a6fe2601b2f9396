#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "nfuse/model.hpp"
#include "nfuse/train.hpp"

namespace nfuse {

struct ConfigError : std::runtime_error {
    std::string field;
    ConfigError(std::string f, const std::string& why)
        : std::runtime_error("config error at '" + f + "': " + why), field(std::move(f)) {}
};

struct ExperimentConfig {
    SyntheticTaskSpec task;
    TrainConfig train;
    TransformerConfig block;
    FuserKind fuser = FuserKind::tfusion;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool task_seed_given = false;

    // Desk-scale defaults (paper-scale depth=8 etc. remain configurable).
    ExperimentConfig() {
        block.depth = 2;
        train.seed = 0;
    }

    void finalize() {
        if (!task_seed_given) task.seed = substream(seed, "data");
        train.seed = seed;
        block.channels = task.channels;
    }
};

namespace cfgdetail {

using nlohmann::json;

inline void reject_unknown(const json& obj, const std::string& path,
                           const std::set<std::string>& allowed) {
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (!allowed.count(it.key()))
            throw ConfigError(path.empty() ? it.key() : path + "." + it.key(), "unknown key");
}

template <typename T>
T get_num(const json& obj, const std::string& path, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    const json& v = obj.at(key);
    if (!v.is_number()) throw ConfigError(path + "." + key, "expected number");
    return v.get<T>();
}

inline std::string get_str(const json& obj, const std::string& path, const std::string& key,
                           const std::string& fallback) {
    if (!obj.contains(key)) return fallback;
    const json& v = obj.at(key);
    if (!v.is_string()) throw ConfigError(path + "." + key, "expected string");
    return v.get<std::string>();
}

inline bool get_bool(const json& obj, const std::string& path, const std::string& key, bool fallback) {
    if (!obj.contains(key)) return fallback;
    const json& v = obj.at(key);
    if (!v.is_boolean()) throw ConfigError(path + "." + key, "expected boolean");
    return v.get<bool>();
}

}  // namespace cfgdetail

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
    using cfgdetail::get_bool;
    using cfgdetail::get_num;
    using cfgdetail::get_str;
    ExperimentConfig cfg;
    cfgdetail::reject_unknown(j, "", {"seed", "out", "fuser", "task", "train", "block"});
    cfg.seed = get_num<std::uint64_t>(j, "", "seed", 0);
    cfg.out_dir = get_str(j, "", "out", "out");
    std::string fuser = get_str(j, "", "fuser", "tfusion");
    auto kind = fuser_from_string(fuser);
    if (!kind)
        throw ConfigError("fuser", "must be one of tfusion, tfusion_no_ce, tfusion_no_ma, mean, "
                                   "max, conv_pad; got '" + fuser + "'");
    cfg.fuser = *kind;

    if (j.contains("task")) {
        const auto& t = j.at("task");
        if (!t.is_object()) throw ConfigError("task", "expected object");
        cfgdetail::reject_unknown(t, "task",
                                  {"modalities", "channels", "feature_shape", "num_classes",
                                   "train_samples", "val_samples", "test_samples", "noise_std",
                                   "correlation_mode", "seed"});
        cfg.task.modalities = get_num<int>(t, "task", "modalities", cfg.task.modalities);
        cfg.task.channels = get_num<std::size_t>(t, "task", "channels", cfg.task.channels);
        if (t.contains("feature_shape")) {
            const auto& fsj = t.at("feature_shape");
            if (!fsj.is_array() || fsj.empty())
                throw ConfigError("task.feature_shape", "expected non-empty array of extents");
            cfg.task.feature_shape.clear();
            for (const auto& e : fsj) {
                if (!e.is_number_integer() || e.get<std::int64_t>() <= 0)
                    throw ConfigError("task.feature_shape", "extents must be positive integers");
                cfg.task.feature_shape.push_back(e.get<std::size_t>());
            }
        }
        cfg.task.num_classes = get_num<std::size_t>(t, "task", "num_classes", cfg.task.num_classes);
        cfg.task.train_samples =
            get_num<std::size_t>(t, "task", "train_samples", cfg.task.train_samples);
        cfg.task.val_samples = get_num<std::size_t>(t, "task", "val_samples", cfg.task.val_samples);
        cfg.task.test_samples =
            get_num<std::size_t>(t, "task", "test_samples", cfg.task.test_samples);
        cfg.task.noise_std = get_num<double>(t, "task", "noise_std", cfg.task.noise_std);
        std::string mode = get_str(t, "task", "correlation_mode", to_string(cfg.task.mode));
        if (mode == "redundant")
            cfg.task.mode = CorrelationMode::redundant;
        else if (mode == "complementary")
            cfg.task.mode = CorrelationMode::complementary;
        else if (mode == "xor_pair")
            cfg.task.mode = CorrelationMode::xor_pair;
        else
            throw ConfigError("task.correlation_mode",
                              "must be redundant, complementary or xor_pair; got '" + mode + "'");
        if (t.contains("seed")) {
            cfg.task.seed = get_num<std::uint64_t>(t, "task", "seed", 0);
            cfg.task_seed_given = true;
        }
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        if (!t.is_object()) throw ConfigError("train", "expected object");
        cfgdetail::reject_unknown(t, "train",
                                  {"lr", "beta1", "beta2", "eps", "batch_size", "steps",
                                   "missing_protocol", "schedule", "halve_interval", "poly_power"});
        cfg.train.lr = get_num<double>(t, "train", "lr", cfg.train.lr);
        cfg.train.beta1 = get_num<double>(t, "train", "beta1", cfg.train.beta1);
        cfg.train.beta2 = get_num<double>(t, "train", "beta2", cfg.train.beta2);
        cfg.train.eps = get_num<double>(t, "train", "eps", cfg.train.eps);
        cfg.train.batch_size = get_num<std::size_t>(t, "train", "batch_size", cfg.train.batch_size);
        cfg.train.steps = get_num<std::size_t>(t, "train", "steps", cfg.train.steps);
        std::string proto = get_str(t, "train", "missing_protocol", "fixed_per_sample");
        if (proto == "fixed_per_sample")
            cfg.train.missing_protocol = MissingProtocol::fixed_per_sample;
        else if (proto == "resample_each_epoch")
            cfg.train.missing_protocol = MissingProtocol::resample_each_epoch;
        else
            throw ConfigError("train.missing_protocol",
                              "must be fixed_per_sample or resample_each_epoch; got '" + proto + "'");
        std::string sched = get_str(t, "train", "schedule", "constant");
        if (sched == "constant")
            cfg.train.schedule = LrSchedule::constant;
        else if (sched == "halve_every")
            cfg.train.schedule = LrSchedule::halve_every;
        else if (sched == "poly")
            cfg.train.schedule = LrSchedule::poly;
        else
            throw ConfigError("train.schedule",
                              "must be constant, halve_every or poly; got '" + sched + "'");
        cfg.train.halve_interval =
            get_num<std::size_t>(t, "train", "halve_interval", cfg.train.halve_interval);
        cfg.train.poly_power = get_num<double>(t, "train", "poly_power", cfg.train.poly_power);
    }

    if (j.contains("block")) {
        const auto& b = j.at("block");
        if (!b.is_object()) throw ConfigError("block", "expected object");
        cfgdetail::reject_unknown(b, "block",
                                  {"depth", "heads", "ffn_expansion", "activation",
                                   "modality_embeddings", "variant"});
        cfg.block.depth = get_num<std::size_t>(b, "block", "depth", cfg.block.depth);
        cfg.block.heads = get_num<std::size_t>(b, "block", "heads", cfg.block.heads);
        cfg.block.ffn_expansion =
            get_num<std::size_t>(b, "block", "ffn_expansion", cfg.block.ffn_expansion);
        std::string act = get_str(b, "block", "activation", "gelu");
        if (act == "gelu")
            cfg.block.activation = Activation::gelu;
        else if (act == "relu")
            cfg.block.activation = Activation::relu;
        else
            throw ConfigError("block.activation", "must be gelu or relu; got '" + act + "'");
        cfg.block.modality_embeddings =
            get_bool(b, "block", "modality_embeddings", cfg.block.modality_embeddings);
        std::string variant = get_str(b, "block", "variant", "full");
        if (variant == "full") {
            // fuser field decides
        } else if (variant == "no_ce") {
            if (cfg.fuser == FuserKind::tfusion) cfg.fuser = FuserKind::tfusion_no_ce;
        } else if (variant == "no_ma") {
            if (cfg.fuser == FuserKind::tfusion) cfg.fuser = FuserKind::tfusion_no_ma;
        } else {
            throw ConfigError("block.variant", "must be full, no_ce or no_ma; got '" + variant + "'");
        }
    }

    cfg.finalize();
    cfg.task.validate();
    cfg.train.validate();
    return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("<file>", "cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("<root>", "expected a JSON object");
    return parse_experiment_config(j);
}

// Full resolved config (all defaults filled in), echoed into every artifact.
inline nlohmann::json resolved_config_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    j["seed"] = cfg.seed;
    j["out"] = cfg.out_dir;
    j["fuser"] = to_string(cfg.fuser);
    j["task"] = {
        {"modalities", cfg.task.modalities},
        {"channels", cfg.task.channels},
        {"feature_shape", cfg.task.feature_shape},
        {"num_classes", cfg.task.num_classes},
        {"train_samples", cfg.task.train_samples},
        {"val_samples", cfg.task.val_samples},
        {"test_samples", cfg.task.test_samples},
        {"noise_std", cfg.task.noise_std},
        {"correlation_mode", to_string(cfg.task.mode)},
        {"seed", cfg.task.seed},
    };
    j["train"] = {
        {"lr", cfg.train.lr},
        {"beta1", cfg.train.beta1},
        {"beta2", cfg.train.beta2},
        {"eps", cfg.train.eps},
        {"batch_size", cfg.train.batch_size},
        {"steps", cfg.train.steps},
        {"missing_protocol", cfg.train.missing_protocol == MissingProtocol::fixed_per_sample
                                 ? "fixed_per_sample"
                                 : "resample_each_epoch"},
        {"schedule", cfg.train.schedule == LrSchedule::constant
                         ? "constant"
                         : (cfg.train.schedule == LrSchedule::halve_every ? "halve_every" : "poly")},
        {"halve_interval", cfg.train.halve_interval},
        {"poly_power", cfg.train.poly_power},
    };
    j["block"] = {
        {"channels", cfg.task.channels},
        {"depth", cfg.block.depth},
        {"heads", cfg.block.heads},
        {"ffn_expansion", cfg.block.ffn_expansion},
        {"activation", cfg.block.activation == Activation::gelu ? "gelu" : "relu"},
        {"modality_embeddings", cfg.block.modality_embeddings},
    };
    return j;
}

}  // namespace nfuse
