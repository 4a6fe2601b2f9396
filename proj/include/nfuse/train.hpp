#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "nfuse/model.hpp"
#include "nfuse/synth.hpp"

namespace nfuse {

enum class MissingProtocol { fixed_per_sample, resample_each_epoch };
enum class LrSchedule { constant, halve_every, poly };

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t batch_size = 16;
    std::size_t steps = 2000;
    std::uint64_t seed = 0;
    MissingProtocol missing_protocol = MissingProtocol::fixed_per_sample;
    LrSchedule schedule = LrSchedule::constant;
    std::size_t halve_interval = 100000;   // schedule = halve_every
    double poly_power = 0.9;               // schedule = poly

    void validate() const {
        if (!(lr > 0)) throw TensorError("train config: lr must be positive");
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw TensorError("train config: betas must be in [0, 1)");
        if (batch_size == 0 || steps == 0) throw TensorError("train config: zero batch or steps");
    }

    double lr_at(std::size_t step) const {  // step is 0-based
        switch (schedule) {
            case LrSchedule::constant: return lr;
            case LrSchedule::halve_every:
                return lr * std::pow(0.5, static_cast<double>(step / halve_interval));
            default:
                return lr * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(steps),
                                     poly_power);
        }
    }
};

struct TrainAbort : std::runtime_error {
    std::size_t step;
    double lr;
    double grad_norm;
    TrainAbort(std::size_t s, double l, double g, const std::string& why)
        : std::runtime_error("training aborted at step " + std::to_string(s) + " (lr=" +
                             std::to_string(l) + ", grad_norm=" + std::to_string(g) + "): " + why),
          step(s), lr(l), grad_norm(g) {}
};

// One bias-corrected Adam update over a parameter list.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<const std::vector<T>*>& grads,
               AdamState<T>& state, const TrainConfig& cfg, std::size_t t) {
    if (t < 1) throw TensorError("adam_step: step index must be >= 1");
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), {});
        state.v.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i]->size(), T(0));
            state.v[i].assign(params[i]->size(), T(0));
        }
    }
    double corr1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    double corr2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    double lr = cfg.lr_at(t - 1);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = *params[i];
        const std::vector<T>& g = *grads[i];
        if (g.size() != p.size())
            throw ShapeError("adam_step: grad size " + std::to_string(g.size()) +
                             " does not match param " + shape_str(p.shape));
        auto fresh = std::make_shared<std::vector<T>>(*p.data);  // params are immutable values
        for (std::size_t j = 0; j < g.size(); ++j) {
            T& m = state.m[i][j];
            T& v = state.v[i][j];
            m = static_cast<T>(cfg.beta1) * m + static_cast<T>(1.0 - cfg.beta1) * g[j];
            v = static_cast<T>(cfg.beta2) * v + static_cast<T>(1.0 - cfg.beta2) * g[j] * g[j];
            double mhat = static_cast<double>(m) / corr1;
            double vhat = static_cast<double>(v) / corr2;
            (*fresh)[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
        p.data = fresh;
    }
    state.step = t;
}

// mean cross-entropy of logits (B x num_classes) against integer labels
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    std::size_t B = logits.shape[0], nc = logits.shape[1];
    if (labels.size() != B) throw ShapeError("cross_entropy: label count mismatch");
    Tensor<T> lsm = log_softmax_axis(logits, 1);
    std::vector<T> onehot(B * nc, T(0));
    for (std::size_t i = 0; i < B; ++i) onehot[i * nc + static_cast<std::size_t>(labels[i])] = T(1);
    Tensor<T> picked = mul(lsm, Tensor<T>({B, nc}, std::move(onehot)));
    return scale(sum_all(picked), T(-1) / static_cast<T>(B));
}

struct SubsetAccuracy {
    unsigned mask;
    double accuracy;
};

struct Metrics {
    int modalities = 0;
    std::vector<SubsetAccuracy> per_subset;  // 2^S - 1 rows, ascending mask
    double mean_accuracy = 0.0;
    std::uint64_t seed = 0;
};

template <typename T>
struct TrainResult {
    std::vector<double> loss_curve;
    AdamState<T> opt;
    double wall_seconds = 0.0;
};

namespace detail {

// Group train sample ids by their fixed missing mask.
inline std::map<unsigned, std::vector<std::size_t>> fixed_mask_pools(int S, std::uint64_t seed,
                                                                     std::size_t n) {
    std::map<unsigned, std::vector<std::size_t>> pools;
    for (std::size_t i = 0; i < n; ++i) pools[fixed_mask_for_sample(S, seed, i)].push_back(i);
    return pools;
}

}  // namespace detail

// Seeded, single-threaded training. Every random draw is a pure function of
// (seed, step), so resuming from a checkpoint replays the exact stream.
template <typename T>
TrainResult<T> train(FusionModel<T>& model, const Dataset<T>& ds, const TrainConfig& cfg,
                     AdamState<T> resume = {}) {
    cfg.validate();
    int S = ds.spec.modalities;
    auto t0 = std::chrono::steady_clock::now();
    TrainResult<T> result;
    result.opt = std::move(resume);
    auto pools = detail::fixed_mask_pools(S, cfg.seed, ds.train.size());

    double last_grad_norm = 0.0;
    for (std::size_t step = result.opt.step; step < cfg.steps; ++step) {
        Rng rng(substream(cfg.seed, "batch", step));
        unsigned mask;
        std::vector<std::size_t> idx(cfg.batch_size);
        if (cfg.missing_protocol == MissingProtocol::fixed_per_sample) {
            // anchor on a uniformly drawn sample, then fill the batch from
            // the pool sharing its fixed missing case
            std::size_t anchor = static_cast<std::size_t>(rng.below(ds.train.size()));
            mask = fixed_mask_for_sample(S, cfg.seed, anchor);
            const auto& pool = pools.at(mask);
            for (auto& i : idx) i = pool[static_cast<std::size_t>(rng.below(pool.size()))];
        } else {
            mask = sample_missing_mask(S, rng);
            for (auto& i : idx) i = static_cast<std::size_t>(rng.below(ds.train.size()));
        }
        std::vector<int> labels(cfg.batch_size);
        for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = ds.train.labels[idx[i]];
        ModalitySet<T> batch = gather_batch(ds.train, idx, mask, S, ds.spec);

        Tape<T> tape;
        auto named = model.named_parameters();
        double lr_now = cfg.lr_at(step);
        std::vector<std::vector<T>> grad_store;
        grad_store.reserve(named.size());
        try {
            ParamBinding<T> binding(tape, named);
            Tensor<T> loss = cross_entropy(model.logits(batch), labels);
            result.loss_curve.push_back(static_cast<double>(loss.item()));
            auto grads = tape.backward(loss);
            double gn = 0.0;
            for (auto& [name, p] : named) {
                grad_store.push_back(std::move(*grads.at(p->node).data));
                for (T g : grad_store.back()) gn += static_cast<double>(g) * static_cast<double>(g);
            }
            last_grad_norm = std::sqrt(gn);
        } catch (const NumericError& e) {
            throw TrainAbort(step, lr_now, last_grad_norm, e.what());
        }
        // params are unbound again; apply the update
        std::vector<Tensor<T>*> ps;
        std::vector<const std::vector<T>*> gs;
        for (std::size_t i = 0; i < named.size(); ++i) {
            ps.push_back(named[i].second);
            gs.push_back(&grad_store[i]);
        }
        adam_step<T>(ps, gs, result.opt, cfg, step + 1);
    }
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

// Accuracy of the model on one split under one modality subset.
template <typename T>
double subset_accuracy(const FusionModel<T>& model, const Split<T>& split,
                       const SyntheticTaskSpec& spec, unsigned mask) {
    const std::size_t chunk = 64;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < split.size(); start += chunk) {
        std::size_t stop = std::min(split.size(), start + chunk);
        std::vector<std::size_t> idx(stop - start);
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
        ModalitySet<T> batch = gather_batch(split, idx, mask, spec.modalities, spec);
        Tensor<T> logits = model.logits(batch);
        std::size_t nc = logits.shape[1];
        for (std::size_t i = 0; i < idx.size(); ++i) {
            int best = 0;
            T bz = (*logits.data)[i * nc];
            for (std::size_t c = 1; c < nc; ++c)
                if ((*logits.data)[i * nc + c] > bz) {
                    bz = (*logits.data)[i * nc + c];
                    best = static_cast<int>(c);
                }
            if (best == split.labels[idx[i]]) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(split.size());
}

inline std::size_t eval_threads() {
    if (const char* env = std::getenv("NFUSE_THREADS")) {
        long n = std::atol(env);
        if (n > 1) return static_cast<std::size_t>(n);
    }
    return 1;
}

// Accuracy for every non-empty subset plus the mean. Parameters are
// read-only here, so subsets may be evaluated concurrently; results are
// keyed by mask and therefore order-independent.
template <typename T>
Metrics evaluate(const FusionModel<T>& model, const Split<T>& split, const SyntheticTaskSpec& spec,
                 std::uint64_t seed) {
    Metrics out;
    out.modalities = spec.modalities;
    out.seed = seed;
    unsigned total = (1u << spec.modalities) - 1u;
    out.per_subset.resize(total);
    std::size_t threads = std::min<std::size_t>(eval_threads(), total);
    if (threads <= 1) {
        for (unsigned mask = 1; mask <= total; ++mask)
            out.per_subset[mask - 1] = {mask, subset_accuracy(model, split, spec, mask)};
    } else {
        std::vector<std::thread> workers;
        for (std::size_t w = 0; w < threads; ++w)
            workers.emplace_back([&, w] {
                for (unsigned mask = 1 + static_cast<unsigned>(w); mask <= total;
                     mask += static_cast<unsigned>(threads))
                    out.per_subset[mask - 1] = {mask, subset_accuracy(model, split, spec, mask)};
            });
        for (auto& t : workers) t.join();
    }
    double sum = 0.0;
    for (const auto& row : out.per_subset) sum += row.accuracy;
    out.mean_accuracy = sum / static_cast<double>(total);
    return out;
}

// ---------------------------------------------------------------------------
// deterministic artifact writers (no timestamps: identical run => identical file)
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

// Table-I style CSV: one indicator column per modality, accuracy last,
// then an average row.
inline void write_table_csv(const std::string& path, const Metrics& m) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path);
    for (int k = 1; k <= m.modalities; ++k) f << 'm' << k << ',';
    f << "accuracy\n";
    for (const auto& row : m.per_subset) {
        for (int k = 1; k <= m.modalities; ++k) f << ((row.mask >> (k - 1)) & 1u) << ',';
        f << format_double(row.accuracy) << '\n';
    }
    f << "average";
    for (int k = 1; k < m.modalities; ++k) f << ',';
    f << ',' << format_double(m.mean_accuracy) << '\n';
}

inline void write_loss_csv(const std::string& path, const std::vector<double>& curve) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "step,loss\n";
    for (std::size_t i = 0; i < curve.size(); ++i) f << i << ',' << format_double(curve[i]) << '\n';
}

// JSON Lines, one record per subset evaluation; the first record embeds the
// resolved config so any metrics file is reproducible from its own header.
inline void write_metrics_jsonl(const std::string& path, const std::string& resolved_config_json,
                                const Metrics& m) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << "{\"record\":\"config\",\"seed\":" << m.seed << ",\"config\":" << resolved_config_json
      << "}\n";
    for (const auto& row : m.per_subset) {
        f << "{\"record\":\"subset\",\"mask\":" << row.mask << ",\"modalities\":[";
        bool first = true;
        for (int k = 1; k <= m.modalities; ++k)
            if ((row.mask >> (k - 1)) & 1u) {
                if (!first) f << ',';
                f << k;
                first = false;
            }
        f << "],\"accuracy\":" << format_double(row.accuracy) << "}\n";
    }
    f << "{\"record\":\"summary\",\"mean_accuracy\":" << format_double(m.mean_accuracy) << "}\n";
}

}  // namespace nfuse
