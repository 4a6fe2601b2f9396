#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nfuse/baselines.hpp"
#include "nfuse/serialize.hpp"
#include "nfuse/synth.hpp"
#include "nfuse/tfusion.hpp"
#include "nfuse/transformer.hpp"

namespace nfuse {

enum class FuserKind { tfusion, tfusion_no_ce, tfusion_no_ma, mean, max, conv_pad };

inline const char* to_string(FuserKind k) {
    switch (k) {
        case FuserKind::tfusion: return "tfusion";
        case FuserKind::tfusion_no_ce: return "tfusion_no_ce";
        case FuserKind::tfusion_no_ma: return "tfusion_no_ma";
        case FuserKind::mean: return "mean";
        case FuserKind::max: return "max";
        default: return "conv_pad";
    }
}

inline std::optional<FuserKind> fuser_from_string(const std::string& s) {
    if (s == "tfusion") return FuserKind::tfusion;
    if (s == "tfusion_no_ce") return FuserKind::tfusion_no_ce;
    if (s == "tfusion_no_ma") return FuserKind::tfusion_no_ma;
    if (s == "mean") return FuserKind::mean;
    if (s == "max") return FuserKind::max;
    if (s == "conv_pad") return FuserKind::conv_pad;
    return std::nullopt;
}

// Fusion block + linear task head. One parameter set serves every non-empty
// modality subset; absent modalities are never materialized (conv_pad, the
// baseline under criticism, is the deliberate exception).
template <typename T>
struct FusionModel {
    FuserKind kind = FuserKind::tfusion;
    int total_modalities = 4;
    std::size_t channels = 16;
    Shape feature_shape = {8};
    std::size_t num_classes = 2;

    EncoderStack<T> stack;     // tfusion / tfusion_no_ma
    ConvFusionParams<T> conv;  // conv_pad
    Tensor<T> head_w, head_b;  // (C * R) x num_classes

    bool has_stack() const {
        return kind == FuserKind::tfusion || kind == FuserKind::tfusion_no_ma;
    }

    Tensor<T> fuse_forward(const ModalitySet<T>& in) const {
        switch (kind) {
            case FuserKind::tfusion: return tfusion_forward(in, stack);
            case FuserKind::tfusion_no_ce: return tfusion_without_ce(in);
            case FuserKind::tfusion_no_ma: return tfusion_without_ma(in, stack);
            case FuserKind::mean: return mean_fusion(in);
            case FuserKind::max: return max_fusion(in);
            default: return zero_pad_conv_fusion(in, conv);
        }
    }

    Tensor<T> logits(const ModalitySet<T>& in) const {
        Tensor<T> fused = fuse_forward(in);  // B x C x R_f
        std::size_t B = fused.shape[0];
        Tensor<T> flat = reshape(fused, {B, fused.size() / B});
        return add_bias_lastaxis(matmul(flat, head_w), head_b);
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        if (has_stack())
            for (auto& [name, t] : named_params(stack)) out.emplace_back("stack." + name, t);
        if (kind == FuserKind::conv_pad) {
            out.emplace_back("conv.weight", &conv.weight);
            out.emplace_back("conv.bias", &conv.bias);
        }
        out.emplace_back("head.w", &head_w);
        out.emplace_back("head.b", &head_b);
        return out;
    }
};

template <typename T>
FusionModel<T> init_model(FuserKind kind, const SyntheticTaskSpec& task, const TransformerConfig& tcfg,
                          std::uint64_t seed) {
    FusionModel<T> m;
    m.kind = kind;
    m.total_modalities = task.modalities;
    m.channels = task.channels;
    m.feature_shape = task.feature_shape;
    m.num_classes = task.num_classes;
    Rng rng(substream(seed, "init"));
    if (m.has_stack()) {
        TransformerConfig cfg = tcfg;
        cfg.channels = task.channels;
        m.stack = init_encoder_stack<T>(cfg, static_cast<std::size_t>(task.modalities), rng);
    }
    if (kind == FuserKind::conv_pad)
        m.conv = init_conv_fusion<T>(task.modalities, task.channels, rng);
    std::size_t flat = task.channels * task.voxels();
    m.head_w = detail::glorot<T>(flat, task.num_classes, rng);
    m.head_b = Tensor<T>::zeros({task.num_classes});
    return m;
}

// RAII scope that registers every parameter as a grad-enabled leaf on a tape
// and detaches again on exit. Parameter updates happen only while unbound.
template <typename T>
class ParamBinding {
public:
    ParamBinding(Tape<T>& tape, std::vector<std::pair<std::string, Tensor<T>*>> params)
        : params_(std::move(params)) {
        for (auto& [name, p] : params_) *p = tape.watch(*p);
    }
    ~ParamBinding() {
        for (auto& [name, p] : params_) {
            p->node = -1;
            p->tape = nullptr;
        }
    }
    ParamBinding(const ParamBinding&) = delete;
    ParamBinding& operator=(const ParamBinding&) = delete;

    const std::vector<std::pair<std::string, Tensor<T>*>>& params() const { return params_; }

private:
    std::vector<std::pair<std::string, Tensor<T>*>> params_;
};

// ---------------------------------------------------------------------------
// checkpointing (everything needed for exact resume: params + Adam moments)
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
    std::vector<std::vector<T>> m, v;  // per parameter, same precision as training
    std::size_t step = 0;              // completed steps
};

template <typename T>
NamedTensors checkpoint_tensors(FusionModel<T>& model, const AdamState<T>* opt) {
    NamedTensors nt;
    auto to_f32 = [](const Tensor<T>& t) {
        std::vector<float> v(t.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((*t.data)[i]);
        return Tensor<float>(t.shape, std::move(v));
    };
    auto params = model.named_parameters();
    for (auto& [name, p] : params) nt.items.emplace_back(name, to_f32(*p));
    if (opt) {
        auto cast = [](const std::vector<T>& src) {
            std::vector<float> v(src.size());
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(src[i]);
            return v;
        };
        for (std::size_t i = 0; i < params.size(); ++i) {
            nt.items.emplace_back("__opt.m." + params[i].first,
                                  Tensor<float>(params[i].second->shape, cast(opt->m[i])));
            nt.items.emplace_back("__opt.v." + params[i].first,
                                  Tensor<float>(params[i].second->shape, cast(opt->v[i])));
        }
        nt.items.emplace_back("__meta.step",
                              Tensor<float>({1}, {static_cast<float>(opt->step)}));
    }
    return nt;
}

template <typename T>
void load_checkpoint(FusionModel<T>& model, const NamedTensors& nt, AdamState<T>* opt = nullptr) {
    auto params = model.named_parameters();
    for (auto& [name, p] : params) {
        const Tensor<float>* t = nt.find(name);
        if (!t) throw IoError("checkpoint missing tensor: " + name);
        if (t->shape != p->shape)
            throw IoError("checkpoint shape mismatch for " + name + ": " + shape_str(t->shape) +
                          " vs " + shape_str(p->shape));
        std::vector<T> v(t->size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>((*t->data)[i]);
        *p = Tensor<T>(p->shape, std::move(v));
    }
    if (opt) {
        opt->m.clear();
        opt->v.clear();
        auto cast = [](const std::vector<float>& src) {
            std::vector<T> v(src.size());
            for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(src[i]);
            return v;
        };
        for (auto& [name, p] : params) {
            const Tensor<float>* m = nt.find("__opt.m." + name);
            const Tensor<float>* v = nt.find("__opt.v." + name);
            if (!m || !v) throw IoError("checkpoint missing optimizer state for " + name);
            opt->m.push_back(cast(*m->data));
            opt->v.push_back(cast(*v->data));
        }
        const Tensor<float>* step = nt.find("__meta.step");
        opt->step = step ? static_cast<std::size_t>((*step->data)[0]) : 0;
    }
}

}  // namespace nfuse
