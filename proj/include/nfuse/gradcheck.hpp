#pragma once

#include <string>
#include <vector>

#include "nfuse/model.hpp"
#include "nfuse/ops.hpp"
#include "nfuse/rng.hpp"
#include "nfuse/tfusion.hpp"
#include "nfuse/train.hpp"
#include "nfuse/transformer.hpp"

namespace nfuse {

// Finite-difference verification of the reverse-mode gradients, always in
// 64-bit (fp32 central differences are too noisy for the tolerances here).

struct CheckResult {
    std::string name;
    double max_err = 0.0;
    double tol = 0.0;
    bool pass() const { return max_err < tol; }
};

struct CheckReport {
    std::vector<CheckResult> results;
    bool all_pass() const {
        for (const auto& r : results)
            if (!r.pass()) return false;
        return true;
    }
    const CheckResult* first_failure() const {
        for (const auto& r : results)
            if (!r.pass()) return &r;
        return nullptr;
    }
};

namespace gradcheck_detail {

using D = double;

inline Tensor<D> rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<D> v(shape_numel(s));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<D>(std::move(s), std::move(v));
}

// Compare tape gradients of `fwd(inputs) -> scalar` against central
// differences for every input, recording one result line. `corrupt`
// perturbs the analytic gradient of the named check, as a fault fixture.
template <typename Fwd>
void check_grad(CheckReport& rep, const std::string& name, std::vector<Tensor<D>> inputs, Fwd&& fwd,
                double tol, const std::string& corrupt = "") {
    Tape<D> tape;
    std::vector<Tensor<D>> watched;
    watched.reserve(inputs.size());
    for (const auto& in : inputs) watched.push_back(tape.watch(in));
    Tensor<D> loss = fwd(watched);
    auto grads = tape.backward(loss);

    double worst = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor<D> analytic = grads.at(watched[k].node);
        if (name == corrupt && analytic.size() > 0) {
            auto broken = std::make_shared<std::vector<D>>(*analytic.data);
            (*broken)[0] += 0.5;
            analytic.data = broken;
        }
        Tensor<D> fd = finite_difference_grad<D>(
            [&](const Tensor<D>& x) {
                std::vector<Tensor<D>> ins = inputs;
                ins[k] = x;
                return fwd(ins).item();
            },
            inputs[k], 1e-5);
        worst = std::max(worst, max_rel_err(analytic, fd));
    }
    rep.results.push_back({name, worst, tol});
}

// scalar-ize any tensor against a fixed random probe so reductions do not
// mask per-element errors
inline Tensor<D> probe_sum(const Tensor<D>& t, std::uint64_t salt) {
    Rng rng(substream(0x9eadbeef, "probe", salt));
    std::vector<D> w(t.size());
    for (auto& x : w) x = rng.uniform(-1.0, 1.0);
    return sum_all(mul(t, Tensor<D>(t.shape, std::move(w))));
}

}  // namespace gradcheck_detail

// Every primitive op family.
inline CheckReport gradcheck_ops(std::uint64_t seed, double tol = 1e-4,
                                 const std::string& corrupt = "") {
    using namespace gradcheck_detail;
    CheckReport rep;
    Rng rng(substream(seed, "gradcheck.ops"));
    auto r = [&](Shape s, double lo = -1.0, double hi = 1.0) { return rand_tensor(std::move(s), rng, lo, hi); };

    check_grad(rep, "add", {r({2, 3}), r({2, 3})},
               [](auto& in) { return probe_sum(add(in[0], in[1]), 1); }, tol, corrupt);
    check_grad(rep, "sub", {r({2, 3}), r({2, 3})},
               [](auto& in) { return probe_sum(sub(in[0], in[1]), 2); }, tol, corrupt);
    check_grad(rep, "mul", {r({2, 3}), r({2, 3})},
               [](auto& in) { return probe_sum(mul(in[0], in[1]), 3); }, tol, corrupt);
    check_grad(rep, "scale", {r({2, 3})},
               [](auto& in) { return probe_sum(scale(in[0], 2.5), 4); }, tol, corrupt);
    check_grad(rep, "exp", {r({2, 3})},
               [](auto& in) { return probe_sum(exp(in[0]), 5); }, tol, corrupt);
    check_grad(rep, "log", {r({2, 3}, 0.5, 2.0)},
               [](auto& in) { return probe_sum(log(in[0]), 6); }, tol, corrupt);
    check_grad(rep, "relu", {r({2, 6}, 0.1, 1.0)},  // keep clear of the kink
               [](auto& in) { return probe_sum(relu(in[0]), 7); }, tol, corrupt);
    check_grad(rep, "gelu", {r({2, 6})},
               [](auto& in) { return probe_sum(gelu(in[0]), 8); }, tol, corrupt);
    check_grad(rep, "maximum", {r({3, 4}), r({3, 4})},
               [](auto& in) { return probe_sum(maximum(in[0], in[1]), 9); }, tol, corrupt);
    check_grad(rep, "sum_axis", {r({2, 3, 4})},
               [](auto& in) { return probe_sum(sum_axis(in[0], 1), 10); }, tol, corrupt);
    check_grad(rep, "mean_axis", {r({2, 3, 4})},
               [](auto& in) { return probe_sum(mean_axis(in[0], 2), 11); }, tol, corrupt);
    check_grad(rep, "max_axis", {r({2, 3, 4})},
               [](auto& in) { return probe_sum(max_axis(in[0], 1), 12); }, tol, corrupt);
    check_grad(rep, "reshape", {r({2, 3, 4})},
               [](auto& in) { return probe_sum(reshape(in[0], {6, 4}), 13); }, tol, corrupt);
    check_grad(rep, "transpose_last_two", {r({2, 3, 4})},
               [](auto& in) { return probe_sum(transpose_last_two(in[0]), 14); }, tol, corrupt);
    check_grad(rep, "concat", {r({2, 2, 3}), r({2, 1, 3})},
               [](auto& in) { return probe_sum(concat<double>({in[0], in[1]}, 1), 15); }, tol, corrupt);
    check_grad(rep, "split", {r({2, 5})},
               [](auto& in) {
                   auto parts = split(in[0], 1, {2, 3});
                   return add(probe_sum(parts[0], 16), probe_sum(parts[1], 17));
               },
               tol, corrupt);
    check_grad(rep, "matmul", {r({4, 5}), r({5, 3})},
               [](auto& in) { return probe_sum(matmul(in[0], in[1]), 18); }, tol, corrupt);
    check_grad(rep, "matmul_batched", {r({2, 3, 4}), r({2, 4, 2})},
               [](auto& in) { return probe_sum(matmul(in[0], in[1]), 19); }, tol, corrupt);
    check_grad(rep, "softmax_axis", {r({2, 5})},
               [](auto& in) { return probe_sum(softmax_axis(in[0], 1), 20); }, tol, corrupt);
    check_grad(rep, "log_softmax_axis", {r({2, 5})},
               [](auto& in) { return probe_sum(log_softmax_axis(in[0], 1), 21); }, tol, corrupt);
    check_grad(rep, "layer_norm", {r({3, 4}), r({4}, 0.5, 1.5), r({4})},
               [](auto& in) { return probe_sum(layer_norm(in[0], in[1], in[2], 1e-5), 22); }, tol,
               corrupt);
    check_grad(rep, "add_bias_lastaxis", {r({3, 4}), r({4})},
               [](auto& in) { return probe_sum(add_bias_lastaxis(in[0], in[1]), 23); }, tol, corrupt);
    return rep;
}

namespace gradcheck_detail {

inline TransformerConfig small_config(std::size_t depth) {
    TransformerConfig cfg;
    cfg.channels = 4;
    cfg.depth = depth;
    cfg.heads = 2;
    cfg.ffn_expansion = 2;
    return cfg;
}

// Rebuild a stack whose parameters come from a flat tensor list (the order
// of named_params), so parameters can be treated as check inputs.
inline EncoderStack<D> stack_from(const EncoderStack<D>& proto, const std::vector<Tensor<D>>& flat,
                                  std::size_t offset) {
    EncoderStack<D> s = proto;
    auto np = named_params(s);
    for (std::size_t i = 0; i < np.size(); ++i) *np[i].second = flat[offset + i];
    return s;
}

}  // namespace gradcheck_detail

// One pre-norm encoder layer: gradients w.r.t. the input and every parameter.
inline CheckReport gradcheck_layer(std::uint64_t seed, double tol = 1e-4,
                                   const std::string& corrupt = "") {
    using namespace gradcheck_detail;
    CheckReport rep;
    Rng rng(substream(seed, "gradcheck.layer"));
    TransformerConfig cfg = small_config(1);
    EncoderStack<D> proto = init_encoder_stack<D>(cfg, 2, rng);
    std::vector<Tensor<D>> inputs{rand_tensor({1, 4, 4}, rng)};
    for (auto& [name, p] : named_params(proto)) inputs.push_back(*p);
    check_grad(rep, "encoder_layer", std::move(inputs),
               [&](const std::vector<Tensor<D>>& in) {
                   EncoderStack<D> s = stack_from(proto, in, 1);
                   return probe_sum(encoder_layer(in[0], s.layers[0], s.config.activation,
                                                  static_cast<D>(s.config.ln_eps)),
                                    31);
               },
               tol, corrupt);
    return rep;
}

// The full block: 2-layer stack, B=1, C=4, R_f=(3,), |K|=2.
inline CheckReport gradcheck_block(std::uint64_t seed, double tol = 1e-4,
                                   const std::string& corrupt = "") {
    using namespace gradcheck_detail;
    CheckReport rep;
    Rng rng(substream(seed, "gradcheck.block"));
    TransformerConfig cfg = small_config(2);
    EncoderStack<D> proto = init_encoder_stack<D>(cfg, 2, rng);
    std::vector<Tensor<D>> inputs{rand_tensor({1, 4, 3}, rng), rand_tensor({1, 4, 3}, rng)};
    for (auto& [name, p] : named_params(proto)) inputs.push_back(*p);
    check_grad(rep, "tfusion_block", std::move(inputs),
               [&](const std::vector<Tensor<D>>& in) {
                   EncoderStack<D> s = stack_from(proto, in, 2);
                   ModalitySet<D> set;
                   set.total_modalities = 2;
                   set.add(1, in[0]);
                   set.add(2, in[1]);
                   return probe_sum(tfusion_forward(set, s), 32);
               },
               tol, corrupt);
    return rep;
}

// End-to-end: cross-entropy on top of the fused representation and task head.
inline CheckReport gradcheck_end_to_end(std::uint64_t seed, double tol = 1e-3,
                                        const std::string& corrupt = "") {
    using namespace gradcheck_detail;
    CheckReport rep;
    Rng rng(substream(seed, "gradcheck.e2e"));
    TransformerConfig cfg = small_config(2);
    EncoderStack<D> proto = init_encoder_stack<D>(cfg, 2, rng);
    Tensor<D> head_w = rand_tensor({12, 2}, rng, -0.5, 0.5);
    Tensor<D> head_b = rand_tensor({2}, rng, -0.1, 0.1);
    std::vector<int> labels{0, 1};
    std::vector<Tensor<D>> inputs{rand_tensor({2, 4, 3}, rng), rand_tensor({2, 4, 3}, rng), head_w,
                                  head_b};
    std::size_t stack_offset = inputs.size();
    for (auto& [name, p] : named_params(proto)) inputs.push_back(*p);
    check_grad(rep, "end_to_end_loss", std::move(inputs),
               [&](const std::vector<Tensor<D>>& in) {
                   EncoderStack<D> s = stack_from(proto, in, stack_offset);
                   ModalitySet<D> set;
                   set.total_modalities = 2;
                   set.add(1, in[0]);
                   set.add(2, in[1]);
                   Tensor<D> fused = tfusion_forward(set, s);
                   Tensor<D> flat = reshape(fused, {2, 12});
                   Tensor<D> logits = add_bias_lastaxis(matmul(flat, in[2]), in[3]);
                   return cross_entropy(logits, labels);
               },
               tol, corrupt);
    return rep;
}

inline CheckReport gradcheck_scope(const std::string& scope, std::uint64_t seed,
                                   const std::string& corrupt = "") {
    if (scope == "ops") return gradcheck_ops(seed, 1e-4, corrupt);
    if (scope == "layer") return gradcheck_layer(seed, 1e-4, corrupt);
    if (scope == "block") return gradcheck_block(seed, 1e-4, corrupt);
    if (scope == "end_to_end") return gradcheck_end_to_end(seed, 1e-3, corrupt);
    throw TensorError("gradcheck: unknown scope '" + scope + "'");
}

}  // namespace nfuse
