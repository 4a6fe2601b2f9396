#pragma once

#include "nfuse/ops.hpp"
#include "nfuse/rng.hpp"
#include "nfuse/tfusion.hpp"

namespace nfuse {

// Fig-1(a) style arithmetic strategy: voxelwise mean over the modalities
// that are actually present (divide by |K|, not S).
template <typename T>
Tensor<T> mean_fusion(const ModalitySet<T>& input) {
    input.require_nonempty("mean_fusion");
    Tensor<T> acc = input.entries.front().second;
    for (std::size_t i = 1; i < input.count(); ++i) acc = add(acc, input.entries[i].second);
    return scale(acc, T(1) / static_cast<T>(input.count()));
}

// Selection strategy: voxelwise max; ties route the gradient to the lowest id.
template <typename T>
Tensor<T> max_fusion(const ModalitySet<T>& input) {
    input.require_nonempty("max_fusion");
    Tensor<T> acc = input.entries.front().second;
    for (std::size_t i = 1; i < input.count(); ++i) acc = maximum(acc, input.entries[i].second);
    return acc;
}

// Convolution strategy with a fixed input arity: missing modalities are
// fabricated as zero blocks before a 1x1 projection. Deliberately keeps the
// padding sensitivity the learned block avoids.
template <typename T>
struct ConvFusionParams {
    Tensor<T> weight;  // (S*C) x C
    Tensor<T> bias;    // C
    int total_modalities = 0;
};

template <typename T>
ConvFusionParams<T> init_conv_fusion(int total_modalities, std::size_t channels, Rng& rng) {
    ConvFusionParams<T> p;
    p.total_modalities = total_modalities;
    p.weight = detail::glorot<T>(static_cast<std::size_t>(total_modalities) * channels, channels, rng);
    p.bias = Tensor<T>::zeros({channels});
    return p;
}

template <typename T>
Tensor<T> zero_pad_conv_fusion(const ModalitySet<T>& input, const ConvFusionParams<T>& p) {
    input.require_nonempty("zero_pad_conv_fusion");
    int S = p.total_modalities;
    for (const auto& [id, f] : input.entries)
        if (id > S)
            throw TensorError("zero_pad_conv_fusion: modality id " + std::to_string(id) +
                              " exceeds fixed arity S=" + std::to_string(S));
    const Shape& fs = input.entries.front().second.shape;
    std::size_t B = fs[0], C = fs[1];
    std::size_t R = 1;
    for (std::size_t i = 2; i < fs.size(); ++i) R *= fs[i];
    std::vector<Tensor<T>> blocks;
    blocks.reserve(static_cast<std::size_t>(S));
    std::size_t next = 0;
    for (int id = 1; id <= S; ++id) {
        if (next < input.count() && input.entries[next].first == id)
            blocks.push_back(reshape(input.entries[next++].second, {B, C, R}));
        else
            blocks.push_back(Tensor<T>::zeros({B, C, R}));
    }
    Tensor<T> stacked = concat(blocks, 1);                      // B x (S*C) x R
    Tensor<T> rows = transpose_last_two(stacked);               // B x R x (S*C)
    Tensor<T> projected = linear_lastaxis(rows, p.weight, p.bias);  // B x R x C
    return reshape(transpose_last_two(projected), fs);
}

}  // namespace nfuse
