// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference checks of every hand-written backward pass, in
// double precision. Each check builds a small random instance, computes a
// scalar objective, and compares analytic gradients against
// (f(x+h) - f(x-h)) / 2h on a seeded sample of coordinates.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "maemi/adapter.hpp"
#include "maemi/fusion.hpp"
#include "maemi/layers.hpp"
#include "maemi/tensor.hpp"
#include "maemi/vision.hpp"

namespace maemi {

struct GradCheckResult {
    std::string name;
    double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic|| + ||numeric||, 1e-12)
    std::size_t coords = 0;
    bool passed = false;
};

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-5;
    std::size_t max_coords = 24;  // per checked tensor
};

namespace detail {

using D = double;

/// Compares `analytic` with central differences of `objective` while
/// perturbing `param` in place, over a random subset of coordinates.
inline std::pair<double, std::size_t> fd_compare(Tensor<D>& param, const Tensor<D>& analytic,
                                                 const std::function<double()>& objective,
                                                 const std::function<void()>& touched, const GradCheckOptions& opt,
                                                 Prng& prng) {
    require(param.size() == analytic.size(), Errc::ShapeMismatch, "gradcheck: analytic gradient shape");
    std::vector<std::size_t> idx(param.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    prng.shuffle(idx.begin(), idx.end());
    idx.resize(std::min(idx.size(), opt.max_coords));
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i : idx) {
        const D orig = param[i];
        param[i] = orig + opt.step;
        if (touched) touched();
        const double fp = objective();
        param[i] = orig - opt.step;
        if (touched) touched();
        const double fm = objective();
        param[i] = orig;
        if (touched) touched();
        const double num = (fp - fm) / (2.0 * opt.step);
        diff += (analytic[i] - num) * (analytic[i] - num);
        na += analytic[i] * analytic[i];
        nn += num * num;
    }
    return {std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), 1e-12), idx.size()};
}

inline double weighted_sum(const Tensor<D>& y, const Tensor<D>& w) {
    double s = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
    return s;
}

struct Collector {
    std::string layer;
    GradCheckOptions opt;
    Prng* prng;
    double worst = 0.0;
    std::size_t coords = 0;

    void check(Tensor<D>& param, const Tensor<D>& analytic, const std::function<double()>& f,
               const std::function<void()>& touched = {}) {
        auto [err, n] = fd_compare(param, analytic, f, touched, opt, *prng);
        worst = std::max(worst, err);
        coords += n;
    }

    GradCheckResult result() const { return {layer, worst, coords, worst < opt.tolerance}; }
};

/// Random B so the low-rank path contributes to every gradient.
inline void randomize_adapter(AdapterLinear<D>& a, Prng& prng) {
    a.mutable_B() = randn<D>(a.B().shape(), 0.5, prng);
}

inline AdapterConfig small_adapter(AdapterMode mode) {
    AdapterConfig c;
    c.r_min = 4;
    c.r_max = 8;
    c.mode = mode;
    c.dropout = 0.0;
    return c;
}

}  // namespace detail

inline GradCheckResult gradcheck_adapter(AdapterMode mode, std::uint64_t seed, const GradCheckOptions& opt = {}) {
    using D = double;
    Prng prng(seed);
    auto cfg = detail::small_adapter(mode);
    AdapterLinear<D> layer = init_adapter<D>(12, 10, cfg, prng);
    detail::randomize_adapter(layer, prng);
    Tensor<D> x = randn<D>({5, 12}, 1.0, prng);
    const Tensor<D> w = randn<D>({5, 10}, 1.0, prng);
    const int rank = 6;
    const StepContext ctx{rank, false, nullptr};
    AdapterCache<D> cache;
    layer.forward(x, ctx, &cache);
    const AdapterGrads<D> g = layer.backward(cache, w);
    auto f = [&] { return detail::weighted_sum(layer.forward(x, ctx), w); };

    detail::Collector c{std::string("adapter_linear.") + (mode == AdapterMode::lora ? "lora" : "lora_fa"), opt, &prng};
    c.check(x, g.dX, f);
    // Only the first `rank` rows of B are live at this rank.
    Tensor<D> dB_full(layer.B().shape());
    for (std::size_t i = 0; i < g.dB.size(); ++i) dB_full[i] = g.dB[i];
    c.check(layer.mutable_B(), dB_full, f);
    if (mode == AdapterMode::lora) {
        Tensor<D> dA_full(layer.A().shape());
        for (std::size_t r = 0; r < g.dA.rows(); ++r)
            for (std::size_t k = 0; k < g.dA.cols(); ++k) dA_full(r, k) = g.dA(r, k);
        c.check(layer.mutable_A(), dA_full, f);
    }
    return c.result();
}

inline GradCheckResult gradcheck_rms_norm(std::uint64_t seed, const GradCheckOptions& opt = {}) {
    using D = double;
    Prng prng(seed);
    Tensor<D> x = randn<D>({4, 9}, 1.0, prng);
    const Tensor<D> gain = randn<D>({9}, 1.0, prng);
    const Tensor<D> w = randn<D>({4, 9}, 1.0, prng);
    const Tensor<D> dx = rms_norm_backward(x, gain, w);
    detail::Collector c{"rms_norm", opt, &prng};
    c.check(x, dx, [&] { return detail::weighted_sum(rms_norm(x, gain), w); });
    return c.result();
}

inline GradCheckResult gradcheck_swiglu_ffn(std::uint64_t seed, const GradCheckOptions& opt = {}) {
    using D = double;
    using Lin = AdapterLinear<D>;
    Prng prng(seed);
    const auto cfg = detail::small_adapter(AdapterMode::lora_fa);
    FeedForward<D, Lin> ffn(init_adapter<D>(16, 24, cfg, prng), init_adapter<D>(12, 16, cfg, prng));
    detail::randomize_adapter(ffn.up(), prng);
    detail::randomize_adapter(ffn.down(), prng);
    Tensor<D> x = randn<D>({5, 16}, 1.0, prng);
    const Tensor<D> w = randn<D>({5, 16}, 1.0, prng);
    const StepContext ctx{5, false, nullptr};
    FeedForwardCache<D, Lin> cache;
    ffn.forward(x, ctx, &cache);
    const Tensor<D> dx = ffn.backward(cache, w, true);
    auto f = [&] { return detail::weighted_sum(ffn.forward(x, ctx), w); };
    detail::Collector c{"swiglu_ffn", opt, &prng};
    c.check(x, dx, f);
    for (Lin* l : {&ffn.up(), &ffn.down()}) {
        const auto g = l->take_gradients();
        Tensor<D> full(l->B().shape());
        for (std::size_t i = 0; i < g.dB.size(); ++i) full[i] = g.dB[i];
        c.check(l->mutable_B(), full, f);
    }
    return c.result();
}

namespace detail {

inline MultiHeadAttention<D, AdapterLinear<D>> small_attention(std::size_t d, std::size_t heads, Prng& prng) {
    const auto cfg = small_adapter(AdapterMode::lora_fa);
    MultiHeadAttention<D, AdapterLinear<D>> m(init_adapter<D>(d, d, cfg, prng), init_adapter<D>(d, d, cfg, prng),
                                              init_adapter<D>(d, d, cfg, prng), init_adapter<D>(d, d, cfg, prng), heads);
    for (auto* l : {&m.wq(), &m.wk(), &m.wv(), &m.wo()}) randomize_adapter(*l, prng);
    return m;
}

inline void check_attention_params(Collector& c, MultiHeadAttention<D, AdapterLinear<D>>& m,
                                   const std::function<double()>& f) {
    for (auto* l : {&m.wq(), &m.wk(), &m.wv(), &m.wo()}) {
        const auto g = l->take_gradients();
        Tensor<D> full(l->B().shape());
        for (std::size_t i = 0; i < g.dB.size(); ++i) full[i] = g.dB[i];
        c.check(l->mutable_B(), full, f);
    }
}

}  // namespace detail

inline GradCheckResult gradcheck_self_attention(std::uint64_t seed, const GradCheckOptions& opt = {}) {
    using D = double;
    Prng prng(seed);
    auto attn = detail::small_attention(16, 2, prng);
    Tensor<D> x = randn<D>({6, 16}, 1.0, prng);
    const Tensor<D> w = randn<D>({6, 16}, 1.0, prng);
    const StepContext ctx{7, false, nullptr};
    AttentionCache<D, AdapterLinear<D>> cache;
    attn.forward(x, x, true, ctx, &cache);
    auto [dq, dkv] = attn.backward(cache, w, true);
    add_inplace(dq, dkv);
    auto f = [&] { return detail::weighted_sum(attn.forward(x, x, true, ctx), w); };
    detail::Collector c{"causal_self_attention", opt, &prng};
    c.check(x, dq, f);
    detail::check_attention_params(c, attn, f);
    return c.result();
}

inline GradCheckResult gradcheck_gated_cross_attention(std::uint64_t seed, const GradCheckOptions& opt = {}) {
    using D = double;
    Prng prng(seed);
    auto attn = detail::small_attention(16, 2, prng);
    const Tensor<D> gain = randn<D>({16}, 1.0, prng);
    Tensor<D> x = randn<D>({5, 16}, 1.0, prng);
    Tensor<D> visual = randn<D>({7, 16}, 1.0, prng);
    Tensor<D> gate({1}, 0.4);
    const Tensor<D> w = randn<D>({5, 16}, 1.0, prng);
    const StepContext ctx{8, false, nullptr};
    GatedCrossCache<D> cache;
    gated_cross_attn(attn, gain, x, visual, gate[0], ctx, &cache);
    const auto g = gated_cross_attn_backward(attn, gain, cache, w, true);
    auto f = [&] { return detail::weighted_sum(gated_cross_attn(attn, gain, x, visual, gate[0], ctx), w); };
    detail::Collector c{"gated_cross_attention", opt, &prng};
    c.check(x, g.dx, f);
    c.check(visual, g.dvisual, f);
    c.check(gate, Tensor<D>({1}, g.dgate), f);
    detail::check_attention_params(c, attn, f);
    return c.result();
}

/// The miniature fusion configuration used by model-level checks.
inline FusionConfig gradcheck_fusion_config() {
    FusionConfig fc;
    fc.d_model = 16;
    fc.heads = 2;
    fc.head_dim = 8;
    fc.blocks = 2;
    fc.max_seq = 16;
    fc.ffn_hidden = 12;
    fc.vision_dim = 8;
    fc.embed_std = 0.5;
    return fc;
}

/// Masked LM loss of a 2-block model with respect to every trainable tensor
/// (adapter B, and A in lora mode), every gate, and the vision states.
inline GradCheckResult gradcheck_fusion_model(AdapterMode mode, std::uint64_t seed, const GradCheckOptions& opt = {}) {
    using D = double;
    Prng prng(seed);
    const auto acfg = detail::small_adapter(mode);
    FusionModel<D> model = FusionModel<D>::init(gradcheck_fusion_config(), acfg, 20, prng);
    model.for_each_adapter([&](const std::string&, AdapterLinear<D>& a) { detail::randomize_adapter(a, prng); });
    model.for_each_gate([&](const std::string&, ScalarParam<D>& g) { g.set(0.5 * prng.normal()); });
    const std::vector<int> ids = {kBos, 9, kImage, 12, 7, kEncode, 15, 11, 18, kEos};
    const LmTargets targets = lm_targets(ids, 6);
    VisualInput<D> vis{randn<D>({5, 8}, 1.0, prng), 2, {}};
    const StepContext ctx{6, false, nullptr};

    FusionCache<D> cache;
    const auto lg = lm_loss(model.forward(ids, &vis, ctx, &cache), targets);
    const Tensor<D> dvis = model.backward(cache, lg.dlogits, true);
    auto f = [&] { return static_cast<double>(lm_loss(model.forward(ids, &vis, ctx), targets).loss); };

    detail::Collector c{std::string("fusion_model_2block.") + (mode == AdapterMode::lora ? "lora" : "lora_fa"), opt, &prng};
    c.check(vis.states, dvis, f);
    model.for_each_adapter([&](const std::string&, AdapterLinear<D>& a) {
        const auto g = a.take_gradients();
        Tensor<D> full(a.B().shape());
        for (std::size_t i = 0; i < g.dB.size(); ++i) full[i] = g.dB[i];
        c.check(a.mutable_B(), full, f);
        if (mode == AdapterMode::lora) {
            Tensor<D> fa(a.A().shape());
            for (std::size_t r = 0; r < g.dA.rows(); ++r)
                for (std::size_t k = 0; k < g.dA.cols(); ++k) fa(r, k) = g.dA(r, k);
            c.check(a.mutable_A(), fa, f);
        }
    });
    model.for_each_gate([&](const std::string&, ScalarParam<D>& g) {
        Tensor<D> v({1}, g.value());
        const Tensor<D> grad({1}, g.mean_grad());
        g.clear_grad();
        c.check(v, grad, f, [&] { g.set(v[0]); });
    });
    return c.result();
}

/// d(loss)/d(pixel) through the vision encoder and the fusion model.
inline GradCheckResult gradcheck_end_to_end(std::uint64_t seed, const GradCheckOptions& opt = {}) {
    using D = double;
    Prng prng(seed);
    VisionConfig vc;
    vc.image_size = 8;
    vc.patch = 4;
    vc.dim = 8;
    vc.layers = 2;
    vc.heads = 2;
    vc.ffn_hidden = 8;
    const VisionEncoder<D> enc_init = VisionEncoder<D>::init(vc, prng);
    VisionEncoder<D> enc = enc_init;
    const auto acfg = detail::small_adapter(AdapterMode::lora_fa);
    FusionModel<D> model = FusionModel<D>::init(gradcheck_fusion_config(), acfg, 20, prng);
    model.for_each_adapter([&](const std::string&, AdapterLinear<D>& a) { detail::randomize_adapter(a, prng); });
    model.for_each_gate([&](const std::string&, ScalarParam<D>& g) { g.set(0.5 * prng.normal()); });
    Tensor<D> patches = randn<D>({vc.num_patches(), vc.patch_width()}, 0.5, prng);
    const std::vector<int> ids = {kBos, kImage, 12, kEncode, 15, 11, kEos};
    const LmTargets targets = lm_targets(ids, 4);
    const StepContext ctx{5, false, nullptr};

    auto loss_of = [&](FusionCache<D>* fc, VisionCache<D>* vcache, Tensor<D>* dlogits) {
        const VisionOutput<D> out = enc.encode(patches, vcache);
        const VisualInput<D> vis{out.states, 1, {}};
        auto lg = lm_loss(model.forward(ids, &vis, ctx, fc), targets);
        if (dlogits) *dlogits = lg.dlogits;
        return static_cast<double>(lg.loss);
    };
    FusionCache<D> fc;
    VisionCache<D> vcache;
    Tensor<D> dlogits;
    loss_of(&fc, &vcache, &dlogits);
    const Tensor<D> dstates = model.backward(fc, dlogits, false);
    const Tensor<D> dpatches = enc.backward(vcache, dstates);
    detail::Collector c{"end_to_end_pixels", opt, &prng};
    c.check(patches, dpatches, [&] { return loss_of(nullptr, nullptr, nullptr); });
    return c.result();
}

/// Every registered check, in a fixed order.
inline std::vector<GradCheckResult> run_gradchecks(std::uint64_t seed, const GradCheckOptions& opt = {}) {
    std::vector<GradCheckResult> out;
    out.push_back(gradcheck_adapter(AdapterMode::lora_fa, seed, opt));
    out.push_back(gradcheck_adapter(AdapterMode::lora, seed + 1, opt));
    out.push_back(gradcheck_rms_norm(seed + 2, opt));
    out.push_back(gradcheck_swiglu_ffn(seed + 3, opt));
    out.push_back(gradcheck_self_attention(seed + 4, opt));
    out.push_back(gradcheck_gated_cross_attention(seed + 5, opt));
    out.push_back(gradcheck_fusion_model(AdapterMode::lora_fa, seed + 6, opt));
    out.push_back(gradcheck_fusion_model(AdapterMode::lora, seed + 7, opt));
    out.push_back(gradcheck_end_to_end(seed + 8, opt));
    return out;
}

}  // namespace maemi
