#pragma once

#include <cstddef>
#include <vector>

#include "nfuse/ops.hpp"
#include "nfuse/tensor.hpp"
#include "nfuse/transformer.hpp"

namespace nfuse {

// Ordered map modality id -> feature tensor of shape B x C x R_f. Iteration
// order is ascending id; all tensors share one shape.
template <typename T>
struct ModalitySet {
    std::vector<std::pair<int, Tensor<T>>> entries;  // ascending id
    int total_modalities = 0;                        // S

    std::size_t count() const { return entries.size(); }

    void add(int id, Tensor<T> t) {
        if (id < 1 || (total_modalities > 0 && id > total_modalities))
            throw TensorError("modality set: id " + std::to_string(id) + " out of range [1, " +
                              std::to_string(total_modalities) + "]");
        if (!entries.empty()) {
            if (id <= entries.back().first)
                throw TensorError("modality set: ids must be added in ascending order");
            if (t.shape != entries.front().second.shape)
                throw ShapeError("modality set: shape " + shape_str(t.shape) +
                                 " differs from existing " + shape_str(entries.front().second.shape));
        } else if (t.rank() < 3) {
            throw ShapeError("modality set: tensors must be B x C x R_f, got " + shape_str(t.shape));
        }
        entries.emplace_back(id, std::move(t));
    }

    void require_nonempty(const char* op) const {
        if (entries.empty()) throw TensorError(std::string(op) + ": no available modalities");
    }
};

// TransformedSet and WeightMaps share the ModalitySet structure.
template <typename T>
using TransformedSet = ModalitySet<T>;
template <typename T>
using WeightMaps = ModalitySet<T>;

struct TokenLayout {
    std::vector<int> ids;                  // ascending, each owning a contiguous run of tokens
    std::size_t tokens_per_modality = 0;   // R = product of R_f
    Shape feature_shape;                   // full B x C x R_f shape of one modality
};

// z in B x T x C with T = R * |K|
template <typename T>
struct TokenBatch {
    Tensor<T> values;
    TokenLayout layout;
};

// Flatten every f_k to B x R x C tokens (channel-last per token) and
// concatenate along the token axis in ascending modality-id order.
template <typename T>
TokenBatch<T> tokenize(const ModalitySet<T>& input) {
    input.require_nonempty("tokenize");
    const Shape& fs = input.entries.front().second.shape;
    std::size_t B = fs[0], C = fs[1];
    std::size_t R = 1;
    for (std::size_t i = 2; i < fs.size(); ++i) R *= fs[i];
    TokenBatch<T> tb;
    tb.layout.tokens_per_modality = R;
    tb.layout.feature_shape = fs;
    std::vector<Tensor<T>> token_runs;
    token_runs.reserve(input.count());
    for (const auto& [id, f] : input.entries) {
        tb.layout.ids.push_back(id);
        token_runs.push_back(transpose_last_two(reshape(f, {B, C, R})));  // B x R x C
    }
    tb.values = concat(token_runs, 1);  // B x (R*|K|) x C
    return tb;
}

// Inverse of tokenize: split the token axis back into per-modality runs and
// revert each to B x C x R_f. Exact (bitwise) roundtrip with tokenize.
template <typename T>
TransformedSet<T> detokenize(const Tensor<T>& z, const TokenLayout& layout, int total_modalities) {
    std::size_t B = layout.feature_shape[0], C = layout.feature_shape[1];
    std::size_t R = layout.tokens_per_modality;
    std::vector<std::size_t> sizes(layout.ids.size(), R);
    auto runs = split(z, 1, sizes);
    TransformedSet<T> out;
    out.total_modalities = total_modalities;
    for (std::size_t i = 0; i < runs.size(); ++i)
        out.add(layout.ids[i], reshape(transpose_last_two(runs[i]), layout.feature_shape));
    (void)B;
    (void)C;
    return out;
}

// CE: run the encoder stack on z0 and revert the result to |K| tensors of
// the original B x C x R_f shape, keyed by the token layout.
template <typename T>
TransformedSet<T> correlation_extraction(const TokenBatch<T>& z0, const EncoderStack<T>& stack,
                                         int total_modalities) {
    std::size_t C = z0.values.shape[2];
    if (C != stack.config.channels)
        throw ShapeError("correlation_extraction: token width " + std::to_string(C) +
                         " does not match stack channels " + std::to_string(stack.config.channels));
    Tensor<T> z = z0.values;
    if (!stack.modality_embed.empty()) {
        // learned per-modality token bias (config flag, off by default)
        std::vector<std::size_t> sizes(z0.layout.ids.size(), z0.layout.tokens_per_modality);
        auto runs = split(z, 1, sizes);
        std::vector<Tensor<T>> shifted;
        shifted.reserve(runs.size());
        for (std::size_t i = 0; i < runs.size(); ++i) {
            std::size_t k = static_cast<std::size_t>(z0.layout.ids[i] - 1);
            if (k >= stack.modality_embed.size())
                throw TensorError("correlation_extraction: no embedding for modality id " +
                                  std::to_string(z0.layout.ids[i]));
            shifted.push_back(add_bias_lastaxis(runs[i], stack.modality_embed[k]));
        }
        z = concat(shifted, 1);
    }
    Tensor<T> zl = encoder_stack_forward(z, stack);
    return detokenize(zl, z0.layout, total_modalities);
}

// MA: softmax across the modality axis, independently at every
// (batch, channel, voxel) position. |K| = 1 yields weights exactly 1.
template <typename T>
WeightMaps<T> modal_attention(const TransformedSet<T>& transformed) {
    transformed.require_nonempty("modal_attention");
    const Shape& fs = transformed.entries.front().second.shape;
    std::size_t n = shape_numel(fs);
    std::vector<Tensor<T>> rows;
    rows.reserve(transformed.count());
    for (const auto& [id, f] : transformed.entries) rows.push_back(reshape(f, {std::size_t(1), n}));
    Tensor<T> stacked = concat(rows, 0);                 // |K| x n
    Tensor<T> weights = softmax_axis(stacked, 0);        // modal-wise softmax per position
    auto parts = split(weights, 0, std::vector<std::size_t>(transformed.count(), 1));
    WeightMaps<T> out;
    out.total_modalities = transformed.total_modalities;
    for (std::size_t i = 0; i < parts.size(); ++i)
        out.add(transformed.entries[i].first, reshape(parts[i], fs));
    return out;
}

// Eq-style fusion: f_s = sum_k f_k * m_k. Weights come from the transformed
// set but multiply the ORIGINAL inputs; with |K| = 1 this is the exact
// identity because the single weight map is exactly 1.
template <typename T>
Tensor<T> fuse(const ModalitySet<T>& original, const WeightMaps<T>& weights) {
    original.require_nonempty("fuse");
    if (original.count() != weights.count())
        throw TensorError("fuse: modality count mismatch, " + std::to_string(original.count()) +
                          " inputs vs " + std::to_string(weights.count()) + " weight maps");
    Tensor<T> acc;
    bool first = true;
    for (std::size_t i = 0; i < original.count(); ++i) {
        const auto& [fid, f] = original.entries[i];
        const auto& [wid, w] = weights.entries[i];
        if (fid != wid)
            throw TensorError("fuse: modality id mismatch, " + std::to_string(fid) + " vs " +
                              std::to_string(wid));
        if (f.shape != w.shape)
            throw ShapeError("fuse: shape mismatch " + shape_str(f.shape) + " vs " +
                             shape_str(w.shape));
        Tensor<T> term = mul(f, w);
        acc = first ? term : add(acc, term);
        first = false;
    }
    return acc;
}

// The full block: tokenize -> CE -> MA -> fuse.
template <typename T>
Tensor<T> tfusion_forward(const ModalitySet<T>& input, const EncoderStack<T>& stack) {
    input.require_nonempty("tfusion_forward");
    // |K| = 1 needs no special casing: the singleton modal softmax is
    // exactly 1 (max subtraction makes it e^0 / e^0), so fuse returns the
    // input bitwise.
    TokenBatch<T> z0 = tokenize(input);
    TransformedSet<T> transformed = correlation_extraction(z0, stack, input.total_modalities);
    WeightMaps<T> weights = modal_attention(transformed);
    return fuse(input, weights);
}

// Ablation "w/o CE": modal attention on the raw inputs.
template <typename T>
Tensor<T> tfusion_without_ce(const ModalitySet<T>& input) {
    input.require_nonempty("tfusion_without_ce");
    return fuse(input, modal_attention(input));
}

// Ablation "w/o MA": plain sum of the transformed representations.
template <typename T>
Tensor<T> tfusion_without_ma(const ModalitySet<T>& input, const EncoderStack<T>& stack) {
    input.require_nonempty("tfusion_without_ma");
    TransformedSet<T> transformed = correlation_extraction(tokenize(input), stack, input.total_modalities);
    Tensor<T> acc = transformed.entries.front().second;
    for (std::size_t i = 1; i < transformed.count(); ++i) acc = add(acc, transformed.entries[i].second);
    return acc;
}

}  // namespace nfuse
