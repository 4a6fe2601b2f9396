#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "nfuse/rng.hpp"
#include "nfuse/tfusion.hpp"
#include "nfuse/transformer.hpp"

namespace nfuse {

// Randomized property suites for the fusion-block claims: weight-map
// normalization, the |K|=1 identity, the convex-combination bound,
// modality-permutation invariance, and arity robustness.

struct InvariantResult {
    std::string name;
    std::size_t trials = 0;
    std::size_t failures = 0;
    std::string first_failure;  // minimal reproducing seed/shape

    bool pass() const { return failures == 0; }
};

namespace invariants_detail {

using F = float;

struct TrialSetup {
    EncoderStack<F> stack;
    ModalitySet<F> set;
    std::string desc;
};

inline Shape random_feature_shape(Rng& rng) {
    int rank = 1 + static_cast<int>(rng.below(3));  // 1D, 2D or 3D R_f
    Shape fs;
    for (int i = 0; i < rank; ++i) fs.push_back(1 + rng.below(4));
    return fs;
}

inline TrialSetup random_trial(std::uint64_t seed, std::uint64_t trial, int k_count) {
    Rng rng(substream(seed, "invariant.trial", trial));
    TrialSetup t;
    TransformerConfig cfg;
    cfg.channels = 2 + 2 * rng.below(3);  // 2, 4 or 6
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.ffn_expansion = 2;
    t.stack = init_encoder_stack<F>(cfg, 4, rng);
    Shape fs = random_feature_shape(rng);
    std::size_t B = 1 + rng.below(2);
    Shape full{B, cfg.channels};
    for (std::size_t e : fs) full.push_back(e);
    t.set.total_modalities = 4;
    // choose k_count distinct ids out of {1..4}
    std::vector<int> ids{1, 2, 3, 4};
    for (int i = 3; i > 0; --i) std::swap(ids[static_cast<std::size_t>(i)], ids[rng.below(static_cast<std::uint64_t>(i + 1))]);
    ids.resize(static_cast<std::size_t>(k_count));
    std::sort(ids.begin(), ids.end());
    for (int id : ids) {
        std::vector<F> v(shape_numel(full));
        for (auto& x : v) x = static_cast<F>(rng.uniform(-3.0, 3.0));
        t.set.add(id, Tensor<F>(full, std::move(v)));
    }
    t.desc = "seed=" + std::to_string(seed) + " trial=" + std::to_string(trial) + " shape=" +
             shape_str(full) + " |K|=" + std::to_string(k_count);
    return t;
}

}  // namespace invariants_detail

// Sum_k m_k == 1 at every (batch, channel, voxel) position, |K| in 1..4.
inline InvariantResult check_normalization(std::uint64_t seed, std::size_t trials) {
    using namespace invariants_detail;
    InvariantResult res{"weight_map_normalization", trials};
    for (std::size_t t = 0; t < trials; ++t) {
        int k = 1 + static_cast<int>(t % 4);
        TrialSetup ts = random_trial(seed, t, k);
        WeightMaps<F> w = modal_attention(correlation_extraction(tokenize(ts.set), ts.stack, 4));
        std::size_t n = ts.set.entries.front().second.size();
        bool ok = true;
        for (std::size_t i = 0; i < n && ok; ++i) {
            double sum = 0.0;
            for (const auto& [id, m] : w.entries) {
                double x = (*m.data)[i];
                if (x < 0.0 || x > 1.0) ok = false;
                sum += x;
            }
            if (std::abs(sum - 1.0) > 1e-6) ok = false;
        }
        if (!ok && res.failures++ == 0) res.first_failure = ts.desc;
    }
    return res;
}

// |K| = 1: fused output is bitwise equal to the input for random stacks.
inline InvariantResult check_single_modality_identity(std::uint64_t seed, std::size_t trials) {
    using namespace invariants_detail;
    InvariantResult res{"single_modality_identity", trials};
    for (std::size_t t = 0; t < trials; ++t) {
        TrialSetup ts = random_trial(seed, 1000 + t, 1);
        Tensor<F> out = tfusion_forward(ts.set, ts.stack);
        const auto& in = ts.set.entries.front().second;
        bool ok = out.shape == in.shape;
        for (std::size_t i = 0; ok && i < in.size(); ++i)
            if ((*out.data)[i] != (*in.data)[i]) ok = false;  // bitwise
        if (!ok && res.failures++ == 0) res.first_failure = ts.desc;
    }
    return res;
}

// min_k f_k <= f_s <= max_k f_k at every voxel (within 1e-6).
inline InvariantResult check_convex_bound(std::uint64_t seed, std::size_t trials) {
    using namespace invariants_detail;
    InvariantResult res{"convex_combination_bound", trials};
    for (std::size_t t = 0; t < trials; ++t) {
        int k = 2 + static_cast<int>(t % 3);
        TrialSetup ts = random_trial(seed, 2000 + t, k);
        Tensor<F> out = tfusion_forward(ts.set, ts.stack);
        bool ok = true;
        for (std::size_t i = 0; i < out.size() && ok; ++i) {
            double lo = 1e30, hi = -1e30;
            for (const auto& [id, f] : ts.set.entries) {
                lo = std::min(lo, static_cast<double>((*f.data)[i]));
                hi = std::max(hi, static_cast<double>((*f.data)[i]));
            }
            double v = (*out.data)[i];
            if (v < lo - 1e-6 || v > hi + 1e-6) ok = false;
        }
        if (!ok && res.failures++ == 0) res.first_failure = ts.desc;
    }
    return res;
}

// Relabeling modalities (embeddings off) leaves f_s unchanged within 1e-4.
inline InvariantResult check_permutation_invariance(std::uint64_t seed, std::size_t trials) {
    using namespace invariants_detail;
    InvariantResult res{"modality_permutation_invariance", trials};
    for (std::size_t t = 0; t < trials; ++t) {
        int k = 2 + static_cast<int>(t % 3);
        TrialSetup ts = random_trial(seed, 3000 + t, k);
        Tensor<F> base = tfusion_forward(ts.set, ts.stack);
        // reassign the same tensors to a rotated id set
        Rng rng(substream(seed, "invariant.perm", t));
        std::vector<Tensor<F>> tensors;
        for (auto& [id, f] : ts.set.entries) tensors.push_back(f);
        std::vector<int> new_ids{1, 2, 3, 4};
        for (int i = 3; i > 0; --i)
            std::swap(new_ids[static_cast<std::size_t>(i)], new_ids[rng.below(static_cast<std::uint64_t>(i + 1))]);
        new_ids.resize(tensors.size());
        // tensor j follows new_ids[j]; sort by id to rebuild the ordered set
        std::vector<std::pair<int, Tensor<F>>> relabeled;
        for (std::size_t j = 0; j < tensors.size(); ++j) relabeled.emplace_back(new_ids[j], tensors[j]);
        std::sort(relabeled.begin(), relabeled.end(),
                  [](const auto& x, const auto& y) { return x.first < y.first; });
        ModalitySet<F> permuted;
        permuted.total_modalities = 4;
        for (auto& [id, f] : relabeled) permuted.add(id, f);
        Tensor<F> out = tfusion_forward(permuted, ts.stack);
        // compare f_s per original tensor order: fusion output is one shared
        // map, so the two runs must agree elementwise
        bool ok = true;
        for (std::size_t i = 0; i < out.size() && ok; ++i)
            if (std::abs((*out.data)[i] - (*base.data)[i]) > 1e-4f) ok = false;
        if (!ok && res.failures++ == 0) res.first_failure = ts.desc;
    }
    return res;
}

// One parameter set serves every non-empty subset of S = 4 modalities.
inline InvariantResult check_arity_robustness(std::uint64_t seed, std::size_t trials) {
    using namespace invariants_detail;
    InvariantResult res{"arity_robustness", trials};
    for (std::size_t t = 0; t < trials; ++t) {
        Rng rng(substream(seed, "invariant.arity", t));
        TransformerConfig cfg;
        cfg.channels = 4;
        cfg.depth = 2;
        cfg.heads = 2;
        cfg.ffn_expansion = 2;
        EncoderStack<F> stack = init_encoder_stack<F>(cfg, 4, rng);
        Shape full{1, 4, 3};
        bool ok = true;
        std::string why;
        for (unsigned mask = 1; mask <= 15 && ok; ++mask) {
            ModalitySet<F> set;
            set.total_modalities = 4;
            for (int id = 1; id <= 4; ++id) {
                if (!(mask & (1u << (id - 1)))) continue;
                std::vector<F> v(shape_numel(full));
                for (auto& x : v) x = static_cast<F>(rng.uniform(-1.0, 1.0));
                set.add(id, Tensor<F>(full, std::move(v)));
            }
            try {
                Tensor<F> out = tfusion_forward(set, stack);
                if (out.shape != full) {
                    ok = false;
                    why = "shape mismatch at mask " + std::to_string(mask);
                }
            } catch (const std::exception& e) {
                ok = false;
                why = "mask " + std::to_string(mask) + ": " + e.what();
            }
        }
        if (!ok && res.failures++ == 0)
            res.first_failure = "seed=" + std::to_string(seed) + " trial=" + std::to_string(t) + " " + why;
    }
    return res;
}

inline std::vector<InvariantResult> run_invariant_suites(std::uint64_t seed, std::size_t trials = 100) {
    return {
        check_normalization(seed, trials),
        check_single_modality_identity(seed, trials),
        check_convex_bound(seed, trials),
        check_permutation_invariance(seed, std::max<std::size_t>(50, trials / 2)),
        check_arity_robustness(seed, std::max<std::size_t>(5, trials / 20)),
    };
}

}  // namespace nfuse
