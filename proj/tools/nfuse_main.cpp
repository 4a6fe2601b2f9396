// nfuse: N-to-one multimodal fusion experiments.
//
// Commands: gradcheck, invariants, train, evaluate, compare.
// Exit codes: 0 success, 1 verification failure, 2 config error,
// 3 numerical abort.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nfuse/config.hpp"
#include "nfuse/gradcheck.hpp"
#include "nfuse/invariants.hpp"
#include "nfuse/stats.hpp"
#include "nfuse/train.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFail = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

int run_gradcheck(const std::string& scope, std::uint64_t seed, const std::string& corrupt) {
    std::vector<std::string> scopes;
    if (scope == "all")
        scopes = {"ops", "layer", "block", "end_to_end"};
    else
        scopes = {scope};
    bool ok = true;
    for (const auto& s : scopes) {
        nfuse::CheckReport rep = nfuse::gradcheck_scope(s, seed, corrupt);
        for (const auto& r : rep.results) {
            std::cout << "gradcheck " << s << " " << r.name << ": max_rel_err=" << r.max_err
                      << " tol=" << r.tol << " " << (r.pass() ? "PASS" : "FAIL") << "\n";
            if (!r.pass()) ok = false;
        }
    }
    if (!ok) std::cout << "gradcheck: FAILED\n";
    return ok ? kExitOk : kExitVerifyFail;
}

int run_invariants(std::uint64_t seed, std::size_t trials) {
    auto results = nfuse::run_invariant_suites(seed, trials);
    bool ok = true;
    for (const auto& r : results) {
        std::cout << "invariant " << r.name << ": trials=" << r.trials
                  << " failures=" << r.failures << " " << (r.pass() ? "PASS" : "FAIL");
        if (!r.pass()) {
            std::cout << " first_failure{" << r.first_failure << "}";
            ok = false;
        }
        std::cout << "\n";
    }
    return ok ? kExitOk : kExitVerifyFail;
}

struct RunArtifacts {
    nfuse::Metrics metrics;
    std::vector<double> loss_curve;
    double wall_seconds = 0.0;
};

template <typename T>
RunArtifacts run_training(const nfuse::ExperimentConfig& cfg, const std::string& out_dir) {
    namespace fs = std::filesystem;
    nfuse::Dataset<T> ds = nfuse::generate_dataset<T>(cfg.task);
    nfuse::FusionModel<T> model = nfuse::init_model<T>(cfg.fuser, cfg.task, cfg.block, cfg.seed);
    nfuse::TrainResult<T> result = nfuse::train(model, ds, cfg.train);
    nfuse::Metrics metrics = nfuse::evaluate(model, ds.test, cfg.task, cfg.seed);

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::string config_json = nfuse::resolved_config_json(cfg).dump();
        {
            std::ofstream f(out_dir + "/resolved_config.json");
            f << config_json << "\n";
        }
        nfuse::manifest::save_file(out_dir + "/checkpoint.tfmn",
                                   nfuse::checkpoint_tensors(model, &result.opt));
        nfuse::write_loss_csv(out_dir + "/loss_curve.csv", result.loss_curve);
        nfuse::write_metrics_jsonl(out_dir + "/metrics.jsonl", config_json, metrics);
        nfuse::write_table_csv(out_dir + "/table.csv", metrics);
    }
    return {metrics, result.loss_curve, result.wall_seconds};
}

int run_train_cmd(const nfuse::ExperimentConfig& cfg, const std::string& precision) {
    std::cout << nfuse::resolved_config_json(cfg).dump(2) << "\n";
    RunArtifacts art = precision == "f64" ? run_training<double>(cfg, cfg.out_dir)
                                          : run_training<float>(cfg, cfg.out_dir);
    std::cout << "final_loss=" << (art.loss_curve.empty() ? 0.0 : art.loss_curve.back())
              << " mean_accuracy=" << art.metrics.mean_accuracy << " wall_seconds="
              << art.wall_seconds << "\n";
    std::cout << "artifacts written to " << cfg.out_dir << "\n";
    return kExitOk;
}

template <typename T>
int run_evaluate(const nfuse::ExperimentConfig& cfg, const std::string& checkpoint_path) {
    nfuse::Dataset<T> ds = nfuse::generate_dataset<T>(cfg.task);
    nfuse::FusionModel<T> model = nfuse::init_model<T>(cfg.fuser, cfg.task, cfg.block, cfg.seed);
    nfuse::load_checkpoint(model, nfuse::manifest::load_file(checkpoint_path));
    nfuse::Metrics metrics = nfuse::evaluate(model, ds.test, cfg.task, cfg.seed);
    std::filesystem::create_directories(cfg.out_dir);
    std::string config_json = nfuse::resolved_config_json(cfg).dump();
    nfuse::write_metrics_jsonl(cfg.out_dir + "/metrics.jsonl", config_json, metrics);
    nfuse::write_table_csv(cfg.out_dir + "/table.csv", metrics);
    std::cout << "mean_accuracy=" << metrics.mean_accuracy << "\n";
    std::cout << "artifacts written to " << cfg.out_dir << "\n";
    return kExitOk;
}

int run_compare(nfuse::ExperimentConfig cfg, const std::vector<std::string>& fusers,
                std::size_t num_seeds) {
    if (fusers.size() < 2) {
        std::cerr << "compare: need at least two fusers\n";
        return kExitConfig;
    }
    std::vector<nfuse::FuserKind> kinds;
    for (const auto& f : fusers) {
        auto k = nfuse::fuser_from_string(f);
        if (!k) {
            std::cerr << "compare: unknown fuser '" << f << "'\n";
            return kExitConfig;
        }
        kinds.push_back(*k);
    }
    namespace fs = std::filesystem;
    fs::create_directories(cfg.out_dir);

    // per fuser: per-seed metrics
    std::map<std::string, std::vector<nfuse::Metrics>> all;
    for (std::size_t si = 0; si < num_seeds; ++si) {
        nfuse::ExperimentConfig run_cfg = cfg;
        run_cfg.seed = cfg.seed + si;
        run_cfg.finalize();
        for (auto kind : kinds) {
            run_cfg.fuser = kind;
            RunArtifacts art = run_training<float>(run_cfg, "");
            all[nfuse::to_string(kind)].push_back(art.metrics);
            std::cout << "trained " << nfuse::to_string(kind) << " seed=" << run_cfg.seed
                      << " mean_accuracy=" << art.metrics.mean_accuracy << "\n";
        }
    }

    // per-subset accuracies averaged over seeds, best fuser marked per row
    unsigned total = (1u << cfg.task.modalities) - 1u;
    std::ofstream table(cfg.out_dir + "/compare.csv");
    for (int k = 1; k <= cfg.task.modalities; ++k) table << 'm' << k << ',';
    for (const auto& f : fusers) table << f << ',';
    table << "best\n";
    std::map<std::string, std::vector<double>> subset_means;
    for (unsigned mask = 1; mask <= total; ++mask) {
        for (int k = 1; k <= cfg.task.modalities; ++k) table << ((mask >> (k - 1)) & 1u) << ',';
        std::string best;
        double best_acc = -1.0;
        for (const auto& f : fusers) {
            double acc = 0.0;
            for (const auto& m : all[f]) acc += m.per_subset[mask - 1].accuracy;
            acc /= static_cast<double>(num_seeds);
            subset_means[f].push_back(acc);
            table << nfuse::format_double(acc) << ',';
            if (acc > best_acc) {
                best_acc = acc;
                best = f;
            }
        }
        table << best << "\n";
    }
    table << "average";
    for (int k = 1; k < cfg.task.modalities; ++k) table << ',';
    for (const auto& f : fusers) {
        double mean = 0.0;
        for (double a : subset_means[f]) mean += a;
        table << ',' << nfuse::format_double(mean / static_cast<double>(total));
    }
    table << ",\n";

    // pairwise signed-rank tests over per-subset means
    std::ofstream pfile(cfg.out_dir + "/wilcoxon.csv");
    pfile << "fuser_a,fuser_b,p_value\n";
    for (std::size_t i = 0; i < fusers.size(); ++i)
        for (std::size_t j = i + 1; j < fusers.size(); ++j) {
            auto cmp = nfuse::wilcoxon_signed_rank(subset_means[fusers[i]], subset_means[fusers[j]]);
            pfile << fusers[i] << ',' << fusers[j] << ','
                  << (cmp.p_value ? nfuse::format_double(*cmp.p_value) : std::string("n/a")) << "\n";
            std::cout << "wilcoxon " << fusers[i] << " vs " << fusers[j] << ": p="
                      << (cmp.p_value ? std::to_string(*cmp.p_value) : std::string("n/a")) << "\n";
        }
    std::cout << "artifacts written to " << cfg.out_dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"N-to-one multimodal fusion block: verification and experiments"};
    app.require_subcommand(1);

    std::string config_path;
    std::string precision = "f32";
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_given = false;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "experiment config (JSON)");
        cmd->add_option("--precision", precision, "f32 or f64")
            ->check(CLI::IsMember({"f32", "f64"}));
        cmd->add_option("--out", out_dir, "output directory override");
        cmd->add_option("--seed", seed, "seed override")->each([&](const std::string&) {
            seed_given = true;
        });
    };

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification (64-bit)");
    std::string scope = "all";
    gc->add_option("scope", scope, "ops | layer | block | end_to_end | all")
        ->check(CLI::IsMember({"ops", "layer", "block", "end_to_end", "all"}));
    std::string corrupt;
    gc->add_option("--corrupt", corrupt, "fault-injection fixture: corrupt one op's gradient")
        ->group("");  // hidden
    add_common(gc);

    auto* inv = app.add_subcommand("invariants", "randomized fusion-block property suites");
    std::size_t trials = 100;
    inv->add_option("--trials", trials, "trials per invariant (default 100)");
    add_common(inv);

    auto* tr = app.add_subcommand("train", "train one fuser per the config");
    std::string fuser_override;
    tr->add_option("--fuser", fuser_override, "fuser override");
    add_common(tr);

    auto* ev = app.add_subcommand("evaluate", "evaluate a checkpoint on all modality subsets");
    std::string checkpoint_path;
    ev->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
    ev->add_option("--fuser", fuser_override, "fuser override");
    add_common(ev);

    auto* cp = app.add_subcommand("compare", "train several fusers on identical seeds and compare");
    std::vector<std::string> fusers;
    cp->add_option("--fusers", fusers, "fusers to compare")->delimiter(',');
    std::size_t num_seeds = 1;
    cp->add_option("--seeds", num_seeds, "number of seeds (base seed increments)");
    add_common(cp);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gc->parsed()) return run_gradcheck(scope, seed_given ? seed : 42, corrupt);
        if (inv->parsed()) return run_invariants(seed_given ? seed : 42, trials);

        nfuse::ExperimentConfig cfg;
        if (!config_path.empty()) {
            cfg = nfuse::load_experiment_config(config_path);
        }
        if (seed_given) cfg.seed = seed;
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (!fuser_override.empty()) {
            auto k = nfuse::fuser_from_string(fuser_override);
            if (!k) throw nfuse::ConfigError("--fuser", "unknown fuser '" + fuser_override + "'");
            cfg.fuser = *k;
        }
        cfg.finalize();

        if (tr->parsed()) return run_train_cmd(cfg, precision);
        if (ev->parsed())
            return precision == "f64" ? run_evaluate<double>(cfg, checkpoint_path)
                                      : run_evaluate<float>(cfg, checkpoint_path);
        if (cp->parsed()) return run_compare(cfg, fusers, num_seeds);
    } catch (const nfuse::ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const nfuse::TrainAbort& e) {
        std::cerr << e.what() << "\n";
        return kExitNumeric;
    } catch (const nfuse::NumericError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitOk;
}
