#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "nfuse/rng.hpp"
#include "nfuse/serialize.hpp"
#include "nfuse/tfusion.hpp"

namespace nfuse {

enum class CorrelationMode { redundant, complementary, xor_pair };

inline const char* to_string(CorrelationMode m) {
    switch (m) {
        case CorrelationMode::redundant: return "redundant";
        case CorrelationMode::complementary: return "complementary";
        default: return "xor_pair";
    }
}

struct SyntheticTaskSpec {
    int modalities = 4;  // S
    std::size_t channels = 16;
    Shape feature_shape = {8};  // R_f
    std::size_t num_classes = 2;
    std::size_t train_samples = 512;
    std::size_t val_samples = 128;
    std::size_t test_samples = 256;
    double noise_std = 0.1;
    CorrelationMode mode = CorrelationMode::xor_pair;
    std::uint64_t seed = 0;

    std::size_t voxels() const { return shape_numel(feature_shape); }

    void validate() const {
        if (modalities < 1) throw TensorError("task spec: modalities must be >= 1");
        if (num_classes < 2) throw TensorError("task spec: num_classes must be >= 2");
        if (channels == 0 || voxels() == 0) throw TensorError("task spec: degenerate feature shape");
        if (train_samples == 0 || val_samples == 0 || test_samples == 0)
            throw TensorError("task spec: zero samples in a split");
        if (noise_std < 0) throw TensorError("task spec: negative noise_std");
    }
};

// One split: per-modality feature tensors of shape N x C x R_f plus labels.
template <typename T>
struct Split {
    std::vector<Tensor<T>> features;  // S tensors
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
};

template <typename T>
struct Dataset {
    SyntheticTaskSpec spec;
    Split<T> train, val, test;
};

namespace detail {

// Latent symbol per modality for one sample. The label/symbol coupling is
// what makes single modalities insufficient outside redundant mode:
//   redundant     — every modality carries the label itself
//   complementary — symbols sum to the label mod num_classes
//   xor_pair      — odd ids carry u, even ids carry v, label = (u+v) mod nc
inline void draw_symbols(CorrelationMode mode, int S, std::size_t nc, Rng& rng, int& label,
                         std::vector<int>& symbols) {
    symbols.resize(static_cast<std::size_t>(S));
    switch (mode) {
        case CorrelationMode::redundant: {
            label = static_cast<int>(rng.below(nc));
            for (auto& s : symbols) s = label;
            break;
        }
        case CorrelationMode::complementary: {
            label = static_cast<int>(rng.below(nc));
            int sum = 0;
            for (int k = 0; k < S - 1; ++k) {
                symbols[static_cast<std::size_t>(k)] = static_cast<int>(rng.below(nc));
                sum += symbols[static_cast<std::size_t>(k)];
            }
            int last = (label - sum) % static_cast<int>(nc);
            if (last < 0) last += static_cast<int>(nc);
            symbols[static_cast<std::size_t>(S - 1)] = last;
            break;
        }
        case CorrelationMode::xor_pair: {
            int u = static_cast<int>(rng.below(nc));
            int v = static_cast<int>(rng.below(nc));
            label = (u + v) % static_cast<int>(nc);
            for (int k = 0; k < S; ++k)
                symbols[static_cast<std::size_t>(k)] = (k % 2 == 0) ? u : v;  // ids are k+1
            break;
        }
    }
}

template <typename T>
Split<T> make_split(const SyntheticTaskSpec& spec, const std::vector<std::vector<std::vector<T>>>& protos,
                    std::size_t n, Rng& rng) {
    std::size_t dim = spec.channels * spec.voxels();
    int S = spec.modalities;
    Split<T> split;
    split.features.resize(static_cast<std::size_t>(S));
    for (auto& f : split.features) {
        Shape s{n, spec.channels};
        for (std::size_t e : spec.feature_shape) s.push_back(e);
        f = Tensor<T>::zeros(s);
    }
    split.labels.resize(n);
    std::vector<int> symbols;
    for (std::size_t i = 0; i < n; ++i) {
        int label = 0;
        draw_symbols(spec.mode, S, spec.num_classes, rng, label, symbols);
        split.labels[i] = label;
        for (int k = 0; k < S; ++k) {
            const auto& p = protos[static_cast<std::size_t>(k)][static_cast<std::size_t>(symbols[static_cast<std::size_t>(k)])];
            T* dst = split.features[static_cast<std::size_t>(k)].data->data() + i * dim;
            for (std::size_t d = 0; d < dim; ++d)
                dst[d] = p[d] + static_cast<T>(spec.noise_std * rng.normal());
        }
    }
    return split;
}

}  // namespace detail

// Multinomial logistic probe trained on one modality, scored on a held-out
// split. Used at generation time to verify the mode's correlation structure.
template <typename T>
double single_modality_probe_accuracy(const Split<T>& train, const Split<T>& held_out,
                                      const SyntheticTaskSpec& spec, int modality_id) {
    std::size_t dim = spec.channels * spec.voxels();
    std::size_t nc = spec.num_classes;
    std::size_t k = static_cast<std::size_t>(modality_id - 1);
    std::size_t n = std::min<std::size_t>(train.size(), 256);
    const T* x = train.features[k].data->data();

    std::vector<double> w(nc * dim, 0.0), b(nc, 0.0);
    std::vector<double> mw(w.size(), 0.0), vw(w.size(), 0.0), mb(nc, 0.0), vb(nc, 0.0);
    std::vector<double> logits(nc), gw(w.size()), gb(nc);
    const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    for (int step = 1; step <= 300; ++step) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const T* xi = x + i * dim;
            double mx = -1e300;
            for (std::size_t c = 0; c < nc; ++c) {
                double z = b[c];
                for (std::size_t d = 0; d < dim; ++d) z += w[c * dim + d] * static_cast<double>(xi[d]);
                logits[c] = z;
                mx = std::max(mx, z);
            }
            double sum = 0.0;
            for (std::size_t c = 0; c < nc; ++c) sum += std::exp(logits[c] - mx);
            for (std::size_t c = 0; c < nc; ++c) {
                double p = std::exp(logits[c] - mx) / sum;
                double err = p - (static_cast<int>(c) == train.labels[i] ? 1.0 : 0.0);
                gb[c] += err;
                for (std::size_t d = 0; d < dim; ++d) gw[c * dim + d] += err * static_cast<double>(xi[d]);
            }
        }
        double corr1 = 1.0 - std::pow(b1, step), corr2 = 1.0 - std::pow(b2, step);
        for (std::size_t j = 0; j < w.size(); ++j) {
            double g = gw[j] / static_cast<double>(n);
            mw[j] = b1 * mw[j] + (1 - b1) * g;
            vw[j] = b2 * vw[j] + (1 - b2) * g * g;
            w[j] -= lr * (mw[j] / corr1) / (std::sqrt(vw[j] / corr2) + eps);
        }
        for (std::size_t c = 0; c < nc; ++c) {
            double g = gb[c] / static_cast<double>(n);
            mb[c] = b1 * mb[c] + (1 - b1) * g;
            vb[c] = b2 * vb[c] + (1 - b2) * g * g;
            b[c] -= lr * (mb[c] / corr1) / (std::sqrt(vb[c] / corr2) + eps);
        }
    }

    std::size_t hits = 0;
    const T* hx = held_out.features[k].data->data();
    for (std::size_t i = 0; i < held_out.size(); ++i) {
        const T* xi = hx + i * dim;
        int best = 0;
        double bz = -1e300;
        for (std::size_t c = 0; c < nc; ++c) {
            double z = b[c];
            for (std::size_t d = 0; d < dim; ++d) z += w[c * dim + d] * static_cast<double>(xi[d]);
            if (z > bz) {
                bz = z;
                best = static_cast<int>(c);
            }
        }
        if (best == held_out.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(held_out.size());
}

// no single modality may come close to solving the task in the cross-modal modes
inline constexpr double kProbeCeiling = 0.75;

template <typename T>
Dataset<T> generate_dataset(const SyntheticTaskSpec& spec) {
    spec.validate();
    int S = spec.modalities;
    std::size_t dim = spec.channels * spec.voxels();
    std::size_t symbols = spec.num_classes;  // every mode draws per-modality symbols from 0..nc-1

    Rng proto_rng(substream(spec.seed, "proto"));
    std::vector<std::vector<std::vector<T>>> protos(static_cast<std::size_t>(S));
    for (int k = 0; k < S; ++k) {
        protos[static_cast<std::size_t>(k)].resize(symbols);
        for (std::size_t v = 0; v < symbols; ++v) {
            auto& p = protos[static_cast<std::size_t>(k)][v];
            p.resize(dim);
            for (auto& x : p) x = static_cast<T>(proto_rng.normal());
        }
    }

    Dataset<T> ds;
    ds.spec = spec;
    Rng tr(substream(spec.seed, "data.train"));
    Rng va(substream(spec.seed, "data.val"));
    Rng te(substream(spec.seed, "data.test"));
    ds.train = detail::make_split<T>(spec, protos, spec.train_samples, tr);
    ds.val = detail::make_split<T>(spec, protos, spec.val_samples, va);
    ds.test = detail::make_split<T>(spec, protos, spec.test_samples, te);

    if (spec.mode != CorrelationMode::redundant && S >= 2) {
        for (int k = 1; k <= S; ++k) {
            double acc = single_modality_probe_accuracy(ds.train, ds.val, spec, k);
            if (acc > kProbeCeiling)
                throw TensorError("generate_dataset: single-modality probe on modality " +
                                  std::to_string(k) + " reached " + std::to_string(acc) +
                                  ", task is not cross-modal");
        }
    }
    return ds;
}

// Gather a batch ModalitySet restricted to the modalities in `mask`
// (bit k-1 set means modality id k is present).
template <typename T>
ModalitySet<T> gather_batch(const Split<T>& split, const std::vector<std::size_t>& idx,
                            unsigned mask, int S, const SyntheticTaskSpec& spec) {
    ModalitySet<T> set;
    set.total_modalities = S;
    std::size_t dim = spec.channels * spec.voxels();
    for (int k = 1; k <= S; ++k) {
        if (!(mask & (1u << (k - 1)))) continue;
        Shape shape{idx.size(), spec.channels};
        for (std::size_t e : spec.feature_shape) shape.push_back(e);
        std::vector<T> vals(idx.size() * dim);
        const T* src = split.features[static_cast<std::size_t>(k - 1)].data->data();
        for (std::size_t i = 0; i < idx.size(); ++i)
            std::copy(src + idx[i] * dim, src + (idx[i] + 1) * dim, vals.begin() + static_cast<std::ptrdiff_t>(i * dim));
        set.add(k, Tensor<T>(std::move(shape), std::move(vals)));
    }
    return set;
}

// Uniform draw over the 2^S - 1 non-empty subsets.
inline unsigned sample_missing_mask(int S, Rng& rng) {
    if (S < 1) throw TensorError("sample_missing_mask: S must be >= 1");
    unsigned total = (1u << S) - 1u;
    return 1u + static_cast<unsigned>(rng.below(total));
}

// Under the fixed protocol the subset is a pure function of (sample id, seed).
inline unsigned fixed_mask_for_sample(int S, std::uint64_t seed, std::size_t sample_id) {
    Rng rng(substream(seed, "mask", sample_id));
    return sample_missing_mask(S, rng);
}

// Dataset cache: one manifest file per split (features per modality + labels).
template <typename T>
void save_split(const std::string& path, const Split<T>& split) {
    NamedTensors nt;
    for (std::size_t k = 0; k < split.features.size(); ++k) {
        const auto& f = split.features[k];
        std::vector<float> v(f.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((*f.data)[i]);
        nt.items.emplace_back("modality" + std::to_string(k + 1), Tensor<float>(f.shape, std::move(v)));
    }
    std::size_t n = split.labels.size();
    std::vector<float> lab(n);
    for (std::size_t i = 0; i < n; ++i) lab[i] = static_cast<float>(split.labels[i]);
    nt.items.emplace_back("labels", Tensor<float>({n}, std::move(lab)));
    manifest::save_file(path, nt);
}

template <typename T>
Split<T> load_split(const std::string& path) {
    NamedTensors nt = manifest::load_file(path);
    Split<T> split;
    const Tensor<float>* lab = nt.find("labels");
    if (!lab) throw IoError("split file missing labels: " + path);
    split.labels.resize(lab->size());
    for (std::size_t i = 0; i < split.labels.size(); ++i)
        split.labels[i] = static_cast<int>((*lab->data)[i]);
    for (std::size_t k = 1;; ++k) {
        const Tensor<float>* f = nt.find("modality" + std::to_string(k));
        if (!f) break;
        std::vector<T> v(f->size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>((*f->data)[i]);
        split.features.emplace_back(f->shape, std::move(v));
    }
    return split;
}

}  // namespace nfuse
