// SPDX-License-Identifier: Apache-2.0
//
// Autoregressive decoder that fuses vision states into a text stream. Each
// block runs
//
//     x = x + tanh(g) * CrossAttn(rms(x), visual)     (gated, zero at init)
//     x = x + SelfAttn(rms(x))                         (causal)
//     x = x + FFN(rms(x))                              (SwiGLU)
//
// and the projected classification state is blended into the <image> slot
// through a second zero-initialized tanh gate. Every attention and FFN linear,
// plus the vision projection, is an AdapterLinear; the gates and adapter
// factors are the only trainable tensors.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "maemi/adapter.hpp"
#include "maemi/layers.hpp"
#include "maemi/tensor.hpp"
#include "maemi/tokenizer.hpp"

namespace maemi {

struct FusionConfig {
    std::size_t d_model = 128;
    std::size_t heads = 4;
    std::size_t head_dim = 32;
    std::size_t blocks = 4;
    std::size_t max_seq = 256;
    std::size_t ffn_hidden = 256;
    std::size_t vision_dim = 64;
    double embed_std = 0.2;
    double pos_std = 0.1;

    void validate() const {
        require(heads * head_dim == d_model, Errc::BadConfig, "heads * head_dim must equal d_model");
        require(blocks >= 1, Errc::BadConfig, "need at least one fusion block");
        require(max_seq >= 2 && ffn_hidden >= 1 && vision_dim >= 1, Errc::BadConfig, "degenerate fusion config");
    }
};

template <class T>
struct FusionBlock {
    using Lin = AdapterLinear<T>;
    Tensor<T> cross_gain, self_gain, ffn_gain;
    MultiHeadAttention<T, Lin> cross, self;
    ScalarParam<T> gate;
    FeedForward<T, Lin> ffn;
};

// ---------------------------------------------------------------------------
// Gated cross-attention as a standalone operation:
//     out = x + tanh(g) * MHA(q = rms(x), k = v = visual)

template <class T>
struct GatedCrossCache {
    Tensor<T> x;
    Tensor<T> xn;
    Tensor<T> m;  // attention output before gating
    AttentionCache<T, AdapterLinear<T>> attn;
    T t{0};
    bool computed = false;
};

template <class T>
Tensor<T> gated_cross_attn(const MultiHeadAttention<T, AdapterLinear<T>>& attn, const Tensor<T>& gain,
                           const Tensor<T>& x, const Tensor<T>& visual, T gate, const StepContext& ctx,
                           GatedCrossCache<T>* cache = nullptr) {
    require(visual.rows() >= 1, Errc::EmptyVisual, "gated cross-attention over zero visual states");
    const T t = std::tanh(gate);
    if (!cache && t == T{0}) return x;
    GatedCrossCache<T> local;
    auto& c = cache ? *cache : local;
    c.x = x;
    c.t = t;
    c.xn = rms_norm(x, gain);
    c.m = attn.forward(c.xn, visual, false, ctx, &c.attn);
    c.computed = true;
    if (t == T{0}) return x;  // exact pass-through when the gate is closed
    Tensor<T> out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += t * c.m[i];
    return out;
}

template <class T>
struct GatedCrossGrads {
    Tensor<T> dx;
    Tensor<T> dvisual;
    T dgate{0};
};

template <class T>
GatedCrossGrads<T> gated_cross_attn_backward(MultiHeadAttention<T, AdapterLinear<T>>& attn, const Tensor<T>& gain,
                                             const GatedCrossCache<T>& c, const Tensor<T>& dout, bool accumulate) {
    require(c.computed, Errc::StaleCache, "gated cross-attention backward without a forward cache");
    GatedCrossGrads<T> g;
    T dt{0};
    for (std::size_t i = 0; i < dout.size(); ++i) dt += dout[i] * c.m[i];
    g.dgate = dt * (T{1} - c.t * c.t);
    Tensor<T> dm = dout;
    scale_inplace(dm, c.t);
    auto [dq, dkv] = attn.backward(c.attn, dm, accumulate);
    g.dx = dout;
    add_inplace(g.dx, rms_norm_backward(c.x, gain, dq));
    g.dvisual = std::move(dkv);
    return g;
}

// ---------------------------------------------------------------------------

/// Vision conditioning for one forward pass.
template <class T>
struct VisualInput {
    Tensor<T> states;         // (n+1) x vision_dim, row 0 = classification state
    std::size_t slot = 0;     // position of the query's <image> token
    // Few-shot demonstrations: extra <image> positions with their own
    // classification states (1 x vision_dim). They are injected but not
    // cross-attended.
    std::vector<std::pair<std::size_t, Tensor<T>>> demos;
};

template <class T>
struct FusionBlockCache {
    using Lin = AdapterLinear<T>;
    GatedCrossCache<T> cross;
    Tensor<T> x_cross;  // block input to the self-attention residual
    Tensor<T> self_norm;
    AttentionCache<T, Lin> self;
    Tensor<T> x_self;   // input to the FFN residual
    FeedForwardCache<T, Lin> ffn;
};

template <class T>
struct FusionCache {
    std::vector<int> ids;
    bool multimodal = false;
    AdapterCache<T> vproj;
    Tensor<T> visual;  // projected states
    AdapterCache<T> demo_proj;
    Tensor<T> demo_visual;
    std::vector<std::size_t> inject_pos;  // slot, then demos
    Tensor<T> inject_delta;               // (c - e) per injected slot
    T inject_t{0};
    std::vector<FusionBlockCache<T>> blocks;
    Tensor<T> x_final;
    Tensor<T> h;
};

template <class T>
class FusionModel {
  public:
    using Lin = AdapterLinear<T>;

    FusionModel() = default;

    static FusionModel init(const FusionConfig& cfg, const AdapterConfig& acfg, std::size_t vocab_size, Prng& prng) {
        cfg.validate();
        require(vocab_size > kNumSpecials, Errc::BadConfig, "vocabulary has no ordinary tokens");
        FusionModel m;
        m.cfg_ = cfg;
        m.acfg_ = acfg;
        const std::size_t D = cfg.d_model;
        m.embed_ = randn<T>({vocab_size, D}, cfg.embed_std, prng);
        m.pos_ = randn<T>({cfg.max_seq, D}, cfg.pos_std, prng);
        m.final_gain_ = Tensor<T>({D}, T{1});
        m.vision_proj_ = init_adapter<T>(cfg.vision_dim, D, acfg, prng);
        auto lin = [&](std::size_t i, std::size_t o) { return init_adapter<T>(i, o, acfg, prng); };
        for (std::size_t b = 0; b < cfg.blocks; ++b) {
            FusionBlock<T> blk;
            blk.cross_gain = Tensor<T>({D}, T{1});
            blk.self_gain = Tensor<T>({D}, T{1});
            blk.ffn_gain = Tensor<T>({D}, T{1});
            blk.cross = MultiHeadAttention<T, Lin>(lin(D, D), lin(D, D), lin(D, D), lin(D, D), cfg.heads);
            blk.self = MultiHeadAttention<T, Lin>(lin(D, D), lin(D, D), lin(D, D), lin(D, D), cfg.heads);
            blk.ffn = FeedForward<T, Lin>(lin(D, 2 * cfg.ffn_hidden), lin(cfg.ffn_hidden, D));
            m.blocks_.push_back(std::move(blk));
        }
        return m;
    }

    const FusionConfig& config() const noexcept { return cfg_; }
    const AdapterConfig& adapter_config() const noexcept { return acfg_; }
    std::size_t vocab_size() const noexcept { return embed_.rows(); }

    Tensor<T>& embed() noexcept { return embed_; }
    const Tensor<T>& embed() const noexcept { return embed_; }
    Tensor<T>& pos() noexcept { return pos_; }
    Tensor<T>& final_gain() noexcept { return final_gain_; }
    Lin& vision_proj() noexcept { return vision_proj_; }
    ScalarParam<T>& inject_gate() noexcept { return inject_gate_; }
    std::vector<FusionBlock<T>>& blocks() noexcept { return blocks_; }
    const std::vector<FusionBlock<T>>& blocks() const noexcept { return blocks_; }

    /// Visits every adapter with a stable name.
    template <class F>
    void for_each_adapter(F&& f) {
        f(std::string("vision_proj"), vision_proj_);
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            const std::string p = "block" + std::to_string(b) + ".";
            auto& blk = blocks_[b];
            f(p + "cross.wq", blk.cross.wq());
            f(p + "cross.wk", blk.cross.wk());
            f(p + "cross.wv", blk.cross.wv());
            f(p + "cross.wo", blk.cross.wo());
            f(p + "self.wq", blk.self.wq());
            f(p + "self.wk", blk.self.wk());
            f(p + "self.wv", blk.self.wv());
            f(p + "self.wo", blk.self.wo());
            f(p + "ffn.up", blk.ffn.up());
            f(p + "ffn.down", blk.ffn.down());
        }
    }

    template <class F>
    void for_each_gate(F&& f) {
        f(std::string("inject_gate"), inject_gate_);
        for (std::size_t b = 0; b < blocks_.size(); ++b) f("block" + std::to_string(b) + ".gate", blocks_[b].gate);
    }

    /// Logits (seq x V). `vis == nullptr` runs the text-only path.
    Tensor<T> forward(const std::vector<int>& ids, const VisualInput<T>* vis, const StepContext& ctx,
                      FusionCache<T>* cache = nullptr) const {
        const std::size_t s = ids.size(), D = cfg_.d_model;
        require(s >= 1, Errc::InvalidArgument, "empty token sequence");
        require(s <= cfg_.max_seq, Errc::SequenceTooLong,
                "sequence of " + std::to_string(s) + " exceeds max_seq " + std::to_string(cfg_.max_seq));
        FusionCache<T> local;
        auto& c = cache ? *cache : local;
        c = FusionCache<T>{};
        c.ids = ids;

        Tensor<T> x({s, D});
        for (std::size_t i = 0; i < s; ++i) {
            require(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < vocab_size(), Errc::TargetOutOfRange,
                    "token id " + std::to_string(ids[i]) + " out of vocabulary");
            auto e = embed_.row(static_cast<std::size_t>(ids[i]));
            std::copy(e.begin(), e.end(), x.row(i).begin());
        }

        if (vis) {
            require(vis->states.rows() >= 1, Errc::EmptyVisual, "no vision states");
            require(vis->states.cols() == cfg_.vision_dim, Errc::ShapeMismatch,
                    "vision states " + shape_str(vis->states.shape()) + " vs vision_dim " + std::to_string(cfg_.vision_dim));
            c.multimodal = true;
            c.visual = vision_proj_.forward(vis->states, ctx, &c.vproj);
            c.inject_pos.push_back(vis->slot);
            std::vector<Tensor<T>> sources{slice_rows(c.visual, 0, 1)};
            if (!vis->demos.empty()) {
                Tensor<T> demo_states({vis->demos.size(), cfg_.vision_dim});
                for (std::size_t k = 0; k < vis->demos.size(); ++k) {
                    c.inject_pos.push_back(vis->demos[k].first);
                    auto r = vis->demos[k].second.row(0);
                    std::copy(r.begin(), r.end(), demo_states.row(k).begin());
                }
                c.demo_visual = vision_proj_.forward(demo_states, ctx, &c.demo_proj);
                for (std::size_t k = 0; k < vis->demos.size(); ++k) sources.push_back(slice_rows(c.demo_visual, k, k + 1));
            }
            c.inject_t = std::tanh(inject_gate_.value());
            c.inject_delta = Tensor<T>({c.inject_pos.size(), D});
            for (std::size_t k = 0; k < c.inject_pos.size(); ++k) {
                const std::size_t p = c.inject_pos[k];
                require(p < s, Errc::ShapeMismatch, "image slot " + std::to_string(p) + " beyond sequence");
                for (std::size_t j = 0; j < D; ++j) c.inject_delta(k, j) = sources[k][j] - x(p, j);
                if (c.inject_t != T{0})
                    for (std::size_t j = 0; j < D; ++j) x(p, j) += c.inject_t * c.inject_delta(k, j);
            }
        }
        for (std::size_t i = 0; i < s; ++i)
            for (std::size_t j = 0; j < D; ++j) x(i, j) += pos_(i, j);

        c.blocks.assign(blocks_.size(), FusionBlockCache<T>{});
        const bool keep = cache != nullptr;
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            const auto& blk = blocks_[b];
            auto& bc = c.blocks[b];
            if (vis)
                x = gated_cross_attn(blk.cross, blk.cross_gain, x, c.visual, blk.gate.value(), ctx, keep ? &bc.cross : nullptr);
            bc.x_cross = x;
            bc.self_norm = rms_norm(x, blk.self_gain);
            add_inplace(x, blk.self.forward(bc.self_norm, bc.self_norm, true, ctx, keep ? &bc.self : nullptr));
            bc.x_self = x;
            add_inplace(x, blk.ffn.forward(rms_norm(x, blk.ffn_gain), ctx, keep ? &bc.ffn : nullptr));
        }
        c.x_final = x;
        c.h = rms_norm(x, final_gain_);
        return matmul_nt(c.h, embed_);
    }

    /// Back-propagates d(logits). With `accumulate`, adapter and gate
    /// gradients are added to their accumulators. Returns d(vision states)
    /// (empty for a text-only pass).
    Tensor<T> backward(const FusionCache<T>& c, const Tensor<T>& dlogits, bool accumulate = true) {
        const std::size_t s = c.ids.size(), D = cfg_.d_model;
        require(dlogits.rows() == s && dlogits.cols() == vocab_size(), Errc::ShapeMismatch, "dlogits shape");
        Tensor<T> dx = rms_norm_backward(c.x_final, final_gain_, matmul(dlogits, embed_));
        Tensor<T> dvisual;
        if (c.multimodal) dvisual = Tensor<T>(c.visual.shape());
        for (std::size_t b = blocks_.size(); b-- > 0;) {
            auto& blk = blocks_[b];
            const auto& bc = c.blocks[b];
            add_inplace(dx, rms_norm_backward(bc.x_self, blk.ffn_gain, blk.ffn.backward(bc.ffn, dx, accumulate)));
            auto [dq, dkv] = blk.self.backward(bc.self, dx, accumulate);
            add_inplace(dq, dkv);
            add_inplace(dx, rms_norm_backward(bc.x_cross, blk.self_gain, dq));
            if (c.multimodal) {
                auto g = gated_cross_attn_backward(blk.cross, blk.cross_gain, bc.cross, dx, accumulate);
                if (accumulate) blk.gate.accumulate(g.dgate);
                dx = std::move(g.dx);
                add_inplace(dvisual, g.dvisual);
            }
        }
        if (!c.multimodal) return {};

        // Injection: x[p] = e + t * (c_p - e) before positions are added.
        const T t = c.inject_t;
        T dgate{0};
        Tensor<T> ddemo;
        if (c.inject_pos.size() > 1) ddemo = Tensor<T>(c.demo_visual.shape());
        for (std::size_t k = 0; k < c.inject_pos.size(); ++k) {
            const std::size_t p = c.inject_pos[k];
            for (std::size_t j = 0; j < D; ++j) {
                dgate += dx(p, j) * c.inject_delta(k, j);
                const T dsrc = t * dx(p, j);
                if (k == 0) dvisual(0, j) += dsrc;
                else ddemo(k - 1, j) += dsrc;
            }
        }
        if (accumulate) inject_gate_.accumulate(dgate * (T{1} - t * t));
        if (!ddemo.empty()) vision_proj_.backward_input(c.demo_proj, ddemo, accumulate);
        return vision_proj_.backward_input(c.vproj, dvisual, accumulate);
    }

    /// Applies accumulated gradients to every adapter and gate.
    void step(bool rank_norm) {
        for_each_adapter([&](const std::string&, Lin& l) { l.step(rank_norm); });
        for_each_gate([&](const std::string&, ScalarParam<T>& g) { g.step(); });
    }

    void set_learning_rate(double lr) {
        for_each_adapter([&](const std::string&, Lin& l) { l.set_learning_rate(lr); });
        for_each_gate([&](const std::string&, ScalarParam<T>& g) { g.set_learning_rate(lr); });
    }

    void reset_optimizers(double lr) {
        for_each_adapter([&](const std::string&, Lin& l) { l.reset_optimizer(lr); });
        for_each_gate([&](const std::string&, ScalarParam<T>& g) { g.reset_optimizer(lr); });
    }

    void set_layer_ranks(const std::function<int()>& draw) {
        for_each_adapter([&](const std::string&, Lin& l) { l.set_layer_rank(draw ? draw() : 0); });
    }

    void quantize_base() {
        for_each_adapter([](const std::string&, Lin& l) { l.quantize_base(); });
    }

    std::size_t trainable_state_bytes() {
        std::size_t n = 0;
        for_each_adapter([&](const std::string&, Lin& l) { n += l.trainable_state_bytes(); });
        for_each_gate([&](const std::string&, ScalarParam<T>& g) { n += g.trainable_state_bytes(); });
        return n;
    }

  private:
    FusionConfig cfg_;
    AdapterConfig acfg_;
    Tensor<T> embed_, pos_, final_gain_;
    Lin vision_proj_;
    ScalarParam<T> inject_gate_;
    std::vector<FusionBlock<T>> blocks_;
};

// ---------------------------------------------------------------------------
// Language-model loss over answer tokens.

struct LmTargets {
    std::vector<int> targets;
    std::vector<bool> mask;
};

/// Next-token targets for `ids`; positions whose target lies at or after
/// `answer_start` are unmasked (the answer and its closing <eos>).
inline LmTargets lm_targets(const std::vector<int>& ids, std::size_t answer_start) {
    LmTargets t;
    t.targets.assign(ids.size(), kPad);
    t.mask.assign(ids.size(), false);
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
        t.targets[i] = ids[i + 1];
        t.mask[i] = i + 1 >= answer_start;
    }
    return t;
}

template <class T>
LossAndGrad<T> lm_loss(const Tensor<T>& logits, const LmTargets& t) {
    std::vector<char> m(t.mask.begin(), t.mask.end());
    return cross_entropy(logits, std::span<const int>(t.targets),
                         std::span<const bool>(reinterpret_cast<const bool*>(m.data()), m.size()));
}

/// Fraction of unmasked positions whose argmax equals the target.
template <class T>
std::pair<std::size_t, std::size_t> token_hits(const Tensor<T>& logits, const LmTargets& t) {
    std::size_t hit = 0, total = 0;
    for (std::size_t i = 0; i < t.targets.size(); ++i) {
        if (!t.mask[i]) continue;
        auto r = logits.row(i);
        const auto arg = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
        hit += arg == t.targets[i];
        ++total;
    }
    return {hit, total};
}

// ---------------------------------------------------------------------------
// Decoding

struct DecodeStrategy {
    enum class Kind { greedy, temperature } kind = Kind::greedy;
    double temperature = 1.0;

    static DecodeStrategy greedy() { return {}; }
    static DecodeStrategy sample(double tau) { return {Kind::temperature, tau}; }
};

/// Returns the generated ids (without the prompt and without <eos>).
template <class T>
std::vector<int> generate_ids(const FusionModel<T>& model, const std::vector<int>& prompt, const VisualInput<T>* vis,
                              std::size_t max_new, DecodeStrategy strategy, int rank, Prng* prng = nullptr) {
    require(!prompt.empty() && prompt.back() == kEncode, Errc::InvalidArgument, "prompt must end with <Encode>");
    require(prompt.size() <= model.config().max_seq, Errc::SequenceTooLong, "prompt longer than max_seq");
    require(strategy.kind == DecodeStrategy::Kind::greedy || (prng && strategy.temperature > 0), Errc::InvalidArgument,
            "temperature sampling needs a Prng and tau > 0");
    std::vector<int> seq = prompt, out;
    const StepContext ctx{rank, false, nullptr};
    while (out.size() < max_new && seq.size() < model.config().max_seq) {
        const Tensor<T> logits = model.forward(seq, vis, ctx);
        auto last = logits.row(logits.rows() - 1);
        int next;
        if (strategy.kind == DecodeStrategy::Kind::greedy) {
            next = static_cast<int>(std::max_element(last.begin(), last.end()) - last.begin());
        } else {
            std::vector<double> p(last.size());
            for (std::size_t j = 0; j < p.size(); ++j) p[j] = static_cast<double>(last[j]) / strategy.temperature;
            softmax_row_inplace(std::span<double>(p));
            const double u = prng->uniform();
            double acc = 0.0;
            next = static_cast<int>(p.size()) - 1;
            for (std::size_t j = 0; j < p.size(); ++j) {
                acc += p[j];
                if (u < acc) {
                    next = static_cast<int>(j);
                    break;
                }
            }
        }
        if (next == kEos) break;
        out.push_back(next);
        seq.push_back(next);
    }
    return out;
}

template <class T>
std::string generate(const FusionModel<T>& model, const Vocabulary& vocab, const std::vector<int>& prompt,
                     const VisualInput<T>* vis, std::size_t max_new, DecodeStrategy strategy, int rank,
                     Prng* prng = nullptr) {
    return vocab.decode_answer(generate_ids(model, prompt, vis, max_new, strategy, rank, prng));
}

struct LabelScore {
    std::string label;
    double score = 0.0;  // mean per-token log-likelihood
};

/// Ranks candidate labels by the mean log-likelihood of each label string as
/// the answer to `question`.
template <class T>
std::vector<LabelScore> classify(const FusionModel<T>& model, const Vocabulary& vocab, const Tensor<T>& vision_states,
                                 const std::vector<std::string>& labels, const std::string& question, int rank) {
    require(labels.size() >= 2, Errc::TooFewLabels, "classification needs at least two labels");
    const PromptTokens prompt = assemble_prompt(vocab, "", question);
    const StepContext ctx{rank, false, nullptr};
    VisualInput<T> vis{vision_states, prompt.image_slot, {}};
    std::vector<LabelScore> out;
    for (const auto& label : labels) {
        const std::vector<int> lab = vocab.encode(label);
        require(!lab.empty(), Errc::InvalidArgument, "label '" + label + "' has no tokens");
        std::vector<int> seq = prompt.ids;
        seq.insert(seq.end(), lab.begin(), lab.end());
        const Tensor<T> logits = model.forward(seq, &vis, ctx);
        double total = 0.0;
        for (std::size_t k = 0; k < lab.size(); ++k) {
            const std::size_t row = prompt.ids.size() - 1 + k;
            auto r = logits.row(row);
            const double mx = static_cast<double>(*std::max_element(r.begin(), r.end()));
            double z = 0.0;
            for (T v : r) z += std::exp(static_cast<double>(v) - mx);
            total += static_cast<double>(r[static_cast<std::size_t>(lab[k])]) - mx - std::log(z);
        }
        out.push_back({label, total / static_cast<double>(lab.size())});
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    return out;
}

}  // namespace maemi
