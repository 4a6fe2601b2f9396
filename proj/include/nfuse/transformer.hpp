#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "nfuse/ops.hpp"
#include "nfuse/rng.hpp"
#include "nfuse/tensor.hpp"

namespace nfuse {

enum class Activation { gelu, relu };

struct TransformerConfig {
    std::size_t channels = 16;
    std::size_t depth = 8;
    std::size_t heads = 4;
    std::size_t ffn_expansion = 4;
    Activation activation = Activation::gelu;
    bool modality_embeddings = false;  // off by default; breaks permutation equivariance when on
    double ln_eps = 1e-5;
};

template <typename T>
struct AttentionParams {
    Tensor<T> w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    std::size_t heads = 1;
};

template <typename T>
struct FfnParams {
    Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma, beta;
};

template <typename T>
struct EncoderLayerParams {
    LayerNormParams<T> ln1, ln2;
    AttentionParams<T> attn;
    FfnParams<T> ffn;
};

template <typename T>
struct EncoderStack {
    std::vector<EncoderLayerParams<T>> layers;
    std::vector<Tensor<T>> modality_embed;  // one {C} vector per modality id; empty when disabled
    TransformerConfig config;
};

namespace detail {

// Glorot-uniform in +-sqrt(6 / (fan_in + fan_out))
template <typename T>
Tensor<T> glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<T> v(fan_in * fan_out);
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>({fan_in, fan_out}, std::move(v));
}

}  // namespace detail

template <typename T>
EncoderLayerParams<T> init_encoder_layer(const TransformerConfig& cfg, Rng& rng) {
    std::size_t C = cfg.channels;
    std::size_t H = cfg.ffn_expansion * C;
    EncoderLayerParams<T> p;
    p.ln1 = {Tensor<T>::full({C}, T(1)), Tensor<T>::zeros({C})};
    p.ln2 = {Tensor<T>::full({C}, T(1)), Tensor<T>::zeros({C})};
    p.attn.heads = cfg.heads;
    p.attn.w_q = detail::glorot<T>(C, C, rng);
    p.attn.b_q = Tensor<T>::zeros({C});
    p.attn.w_k = detail::glorot<T>(C, C, rng);
    p.attn.b_k = Tensor<T>::zeros({C});
    p.attn.w_v = detail::glorot<T>(C, C, rng);
    p.attn.b_v = Tensor<T>::zeros({C});
    p.attn.w_o = detail::glorot<T>(C, C, rng);
    p.attn.b_o = Tensor<T>::zeros({C});
    p.ffn.w1 = detail::glorot<T>(C, H, rng);
    p.ffn.b1 = Tensor<T>::zeros({H});
    p.ffn.w2 = detail::glorot<T>(H, C, rng);
    p.ffn.b2 = Tensor<T>::zeros({C});
    return p;
}

template <typename T>
EncoderStack<T> init_encoder_stack(const TransformerConfig& cfg, std::size_t total_modalities, Rng& rng) {
    if (cfg.depth < 1) throw TensorError("encoder stack: depth must be >= 1");
    if (cfg.heads == 0 || cfg.channels % cfg.heads != 0)
        throw ShapeError("encoder stack: heads must divide channels, got " +
                         std::to_string(cfg.heads) + " and " + std::to_string(cfg.channels));
    EncoderStack<T> s;
    s.config = cfg;
    s.layers.reserve(cfg.depth);
    for (std::size_t l = 0; l < cfg.depth; ++l) s.layers.push_back(init_encoder_layer<T>(cfg, rng));
    if (cfg.modality_embeddings) {
        for (std::size_t k = 0; k < total_modalities; ++k) {
            std::vector<T> v(cfg.channels);
            for (auto& x : v) x = static_cast<T>(rng.normal() * 0.02);
            s.modality_embed.push_back(Tensor<T>({cfg.channels}, std::move(v)));
        }
    }
    return s;
}

// position-wise linear over the last axis: z [.., C_in] -> [.., C_out]
template <typename T>
Tensor<T> linear_lastaxis(const Tensor<T>& z, const Tensor<T>& w, const Tensor<T>& b) {
    std::size_t cin = z.shape.back();
    if (w.rank() != 2 || w.shape[0] != cin)
        throw ShapeError("linear: weight " + shape_str(w.shape) + " does not match input " +
                         shape_str(z.shape));
    Shape flat{z.size() / cin, cin};
    Tensor<T> y = matmul(reshape(z, flat), w);
    y = add_bias_lastaxis(y, b);
    Shape out = z.shape;
    out.back() = w.shape[1];
    return reshape(y, out);
}

// Scaled dot-product attention per head (scale 1/sqrt(head_dim)), softmax
// over the key axis, heads concatenated then projected. No masking, no
// positional information: the map is equivariant under token permutation.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& z, const AttentionParams<T>& p) {
    if (z.rank() != 3)
        throw ShapeError("multi_head_attention: expected B x T x C, got " + shape_str(z.shape));
    std::size_t C = z.shape[2];
    if (p.w_q.shape != Shape{C, C})
        throw ShapeError("multi_head_attention: channel mismatch, input " + shape_str(z.shape) +
                         " vs w_q " + shape_str(p.w_q.shape));
    std::size_t heads = p.heads;
    std::size_t hd = C / heads;
    Tensor<T> q = linear_lastaxis(z, p.w_q, p.b_q);
    Tensor<T> k = linear_lastaxis(z, p.w_k, p.b_k);
    Tensor<T> v = linear_lastaxis(z, p.w_v, p.b_v);
    std::vector<std::size_t> sizes(heads, hd);
    auto qh = split(q, 2, sizes);
    auto kh = split(k, 2, sizes);
    auto vh = split(v, 2, sizes);
    T scl = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    std::vector<Tensor<T>> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor<T> scores = scale(matmul(qh[h], transpose_last_two(kh[h])), scl);  // B x T x T
        Tensor<T> att = softmax_axis(scores, 2);
        outs.push_back(matmul(att, vh[h]));  // B x T x hd
    }
    return linear_lastaxis(concat(outs, 2), p.w_o, p.b_o);
}

template <typename T>
Tensor<T> feed_forward(const Tensor<T>& z, const FfnParams<T>& p, Activation act) {
    Tensor<T> h = linear_lastaxis(z, p.w1, p.b1);
    h = act == Activation::gelu ? gelu(h) : relu(h);
    return linear_lastaxis(h, p.w2, p.b2);
}

// pre-norm residual layer: z' = MHA(LN1(z)) + z ; out = FFN(LN2(z')) + z'
template <typename T>
Tensor<T> encoder_layer(const Tensor<T>& z_prev, const EncoderLayerParams<T>& p, Activation act,
                        T ln_eps) {
    Tensor<T> zp = add(multi_head_attention(layer_norm(z_prev, p.ln1.gamma, p.ln1.beta, ln_eps), p.attn),
                       z_prev);
    return add(feed_forward(layer_norm(zp, p.ln2.gamma, p.ln2.beta, ln_eps), p.ffn, act), zp);
}

template <typename T>
Tensor<T> encoder_stack_forward(const Tensor<T>& z0, const EncoderStack<T>& s) {
    if (s.layers.empty()) throw TensorError("encoder_stack_forward: stack has no layers");
    Tensor<T> z = z0;
    T eps = static_cast<T>(s.config.ln_eps);
    for (const auto& layer : s.layers) z = encoder_layer(z, layer, s.config.activation, eps);
    return z;
}

// Parameter enumeration in a stable order, for optimizers and checkpoints.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> named_params(EncoderStack<T>& s) {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t l = 0; l < s.layers.size(); ++l) {
        auto& p = s.layers[l];
        std::string base = "layer" + std::to_string(l) + ".";
        out.emplace_back(base + "ln1.gamma", &p.ln1.gamma);
        out.emplace_back(base + "ln1.beta", &p.ln1.beta);
        out.emplace_back(base + "attn.w_q", &p.attn.w_q);
        out.emplace_back(base + "attn.b_q", &p.attn.b_q);
        out.emplace_back(base + "attn.w_k", &p.attn.w_k);
        out.emplace_back(base + "attn.b_k", &p.attn.b_k);
        out.emplace_back(base + "attn.w_v", &p.attn.w_v);
        out.emplace_back(base + "attn.b_v", &p.attn.b_v);
        out.emplace_back(base + "attn.w_o", &p.attn.w_o);
        out.emplace_back(base + "attn.b_o", &p.attn.b_o);
        out.emplace_back(base + "ln2.gamma", &p.ln2.gamma);
        out.emplace_back(base + "ln2.beta", &p.ln2.beta);
        out.emplace_back(base + "ffn.w1", &p.ffn.w1);
        out.emplace_back(base + "ffn.b1", &p.ffn.b1);
        out.emplace_back(base + "ffn.w2", &p.ffn.w2);
        out.emplace_back(base + "ffn.b2", &p.ffn.b2);
    }
    for (std::size_t k = 0; k < s.modality_embed.size(); ++k)
        out.emplace_back("modality_embed" + std::to_string(k), &s.modality_embed[k]);
    return out;
}

}  // namespace nfuse
