// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "maemi/adapter.hpp"
#include "maemi/tensor.hpp"

namespace maemi {

/// Plain frozen linear map, no adapter. Same calling convention as
/// AdapterLinear so attention and FFN blocks can be built over either.
template <class T>
class DenseLinear {
  public:
    struct Cache {};

    DenseLinear() = default;
    explicit DenseLinear(Tensor<T> w) : w_(std::move(w)) {}

    static DenseLinear random(std::size_t d_in, std::size_t d_out, Prng& prng) {
        return DenseLinear(randn<T>({d_in, d_out}, 1.0 / std::sqrt(static_cast<double>(d_in)), prng));
    }

    std::size_t d_in() const noexcept { return w_.rows(); }
    std::size_t d_out() const noexcept { return w_.cols(); }
    const Tensor<T>& weight() const noexcept { return w_; }
    Tensor<T>& mutable_weight() noexcept { return w_; }

    Tensor<T> forward(const Tensor<T>& x, const StepContext&, Cache* = nullptr) const { return matmul(x, w_); }
    Tensor<T> backward_input(const Cache&, const Tensor<T>& dy, bool) const { return matmul_nt(dy, w_); }

  private:
    Tensor<T> w_;
};

/// A trainable scalar (used for tanh gates).
template <class T>
class ScalarParam {
  public:
    ScalarParam() : opt_(Shape{1}) {}
    explicit ScalarParam(T v) : value_(v), opt_(Shape{1}) {}

    T value() const noexcept { return value_; }
    void set(T v) noexcept { value_ = v; }

    void accumulate(T g) {
        grad_sum_ += g;
        ++count_;
    }
    int pending() const noexcept { return count_; }
    T mean_grad() const noexcept { return count_ ? grad_sum_ / static_cast<T>(count_) : T{0}; }

    void step() {
        if (count_ == 0) return;
        const T g = mean_grad();
        opt_.begin_step();
        opt_.update(0, value_, g);
        grad_sum_ = T{0};
        count_ = 0;
    }
    void clear_grad() noexcept {
        grad_sum_ = T{0};
        count_ = 0;
    }

    void reset_optimizer(double lr) { opt_ = AdamState<T>(Shape{1}, lr); }
    void set_learning_rate(double lr) { opt_.lr = lr; }
    std::size_t trainable_state_bytes() const noexcept { return 3 * sizeof(T); }

  private:
    T value_{0};
    T grad_sum_{0};
    int count_ = 0;
    AdamState<T> opt_;
};

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention.

template <class T, class Lin>
struct AttentionCache {
    typename Lin::Cache q, k, v, o;
    Tensor<T> Q, K, V, O;
    std::vector<Tensor<T>> probs;  // one (s x t) matrix per head
    bool causal = false;
};

template <class T, class Lin>
class MultiHeadAttention {
  public:
    MultiHeadAttention() = default;
    MultiHeadAttention(Lin wq, Lin wk, Lin wv, Lin wo, std::size_t heads)
        : wq_(std::move(wq)), wk_(std::move(wk)), wv_(std::move(wv)), wo_(std::move(wo)), heads_(heads) {
        require(heads_ > 0 && wq_.d_out() % heads_ == 0, Errc::ShapeMismatch, "attention width not divisible by heads");
        require(wk_.d_out() == wq_.d_out() && wv_.d_out() == wq_.d_out() && wo_.d_in() == wq_.d_out(),
                Errc::ShapeMismatch, "attention projection widths disagree");
    }

    std::size_t heads() const noexcept { return heads_; }
    std::size_t head_dim() const noexcept { return wq_.d_out() / heads_; }

    Lin& wq() noexcept { return wq_; }
    Lin& wk() noexcept { return wk_; }
    Lin& wv() noexcept { return wv_; }
    Lin& wo() noexcept { return wo_; }
    const Lin& wq() const noexcept { return wq_; }
    const Lin& wk() const noexcept { return wk_; }
    const Lin& wv() const noexcept { return wv_; }
    const Lin& wo() const noexcept { return wo_; }

    /// Queries from xq (s rows), keys/values from xkv (t rows). With `causal`
    /// row i only sees keys j <= i (requires s == t).
    Tensor<T> forward(const Tensor<T>& xq, const Tensor<T>& xkv, bool causal, const StepContext& ctx,
                      AttentionCache<T, Lin>* cache = nullptr) const {
        require(xkv.rows() >= 1, Errc::EmptyVisual, "attention over zero keys");
        require(!causal || xq.rows() == xkv.rows(), Errc::ShapeMismatch, "causal attention needs square scores");
        AttentionCache<T, Lin> local;
        AttentionCache<T, Lin>& c = cache ? *cache : local;
        c.causal = causal;
        c.Q = wq_.forward(xq, ctx, &c.q);
        c.K = wk_.forward(xkv, ctx, &c.k);
        c.V = wv_.forward(xkv, ctx, &c.v);
        const std::size_t s = xq.rows(), t = xkv.rows(), dh = head_dim();
        const T scale = T{1} / std::sqrt(static_cast<T>(dh));
        c.O = Tensor<T>({s, heads_ * dh});
        c.probs.assign(heads_, Tensor<T>{});
        for (std::size_t h = 0; h < heads_; ++h) {
            Tensor<T> p({s, t});
            for (std::size_t i = 0; i < s; ++i) {
                const std::size_t jmax = causal ? i + 1 : t;
                for (std::size_t j = 0; j < t; ++j) {
                    if (j >= jmax) {
                        p(i, j) = -std::numeric_limits<T>::infinity();
                        continue;
                    }
                    T dot{0};
                    for (std::size_t e = 0; e < dh; ++e) dot += c.Q(i, h * dh + e) * c.K(j, h * dh + e);
                    p(i, j) = dot * scale;
                }
                softmax_row_inplace(p.row(i));
            }
            for (std::size_t i = 0; i < s; ++i)
                for (std::size_t j = 0; j < t; ++j) {
                    const T pij = p(i, j);
                    if (pij == T{0}) continue;
                    for (std::size_t e = 0; e < dh; ++e) c.O(i, h * dh + e) += pij * c.V(j, h * dh + e);
                }
            c.probs[h] = std::move(p);
        }
        return wo_.forward(c.O, ctx, &c.o);
    }

    /// Returns (d xq, d xkv). For self-attention the caller adds the two.
    std::pair<Tensor<T>, Tensor<T>> backward(const AttentionCache<T, Lin>& c, const Tensor<T>& dout, bool accumulate) {
        const Tensor<T> dO = wo_.backward_input(c.o, dout, accumulate);
        const std::size_t s = c.Q.rows(), t = c.K.rows(), dh = head_dim();
        const T scale = T{1} / std::sqrt(static_cast<T>(dh));
        Tensor<T> dQ(c.Q.shape()), dK(c.K.shape()), dV(c.V.shape());
        std::vector<T> dp(t);
        for (std::size_t h = 0; h < heads_; ++h) {
            const Tensor<T>& p = c.probs[h];
            for (std::size_t i = 0; i < s; ++i) {
                T rowdot{0};
                for (std::size_t j = 0; j < t; ++j) {
                    T g{0};
                    for (std::size_t e = 0; e < dh; ++e) g += dO(i, h * dh + e) * c.V(j, h * dh + e);
                    dp[j] = g;
                    rowdot += g * p(i, j);
                }
                for (std::size_t j = 0; j < t; ++j) {
                    const T pij = p(i, j);
                    if (pij == T{0}) continue;
                    for (std::size_t e = 0; e < dh; ++e) dV(j, h * dh + e) += pij * dO(i, h * dh + e);
                    const T ds = pij * (dp[j] - rowdot) * scale;
                    for (std::size_t e = 0; e < dh; ++e) {
                        dQ(i, h * dh + e) += ds * c.K(j, h * dh + e);
                        dK(j, h * dh + e) += ds * c.Q(i, h * dh + e);
                    }
                }
            }
        }
        Tensor<T> dxq = wq_.backward_input(c.q, dQ, accumulate);
        Tensor<T> dxkv = wk_.backward_input(c.k, dK, accumulate);
        add_inplace(dxkv, wv_.backward_input(c.v, dV, accumulate));
        return {std::move(dxq), std::move(dxkv)};
    }

  private:
    Lin wq_, wk_, wv_, wo_;
    std::size_t heads_ = 1;
};

// ---------------------------------------------------------------------------
// SwiGLU feed-forward: down(swiglu(up(x))), up: d -> 2h, down: h -> d.

template <class T, class Lin>
struct FeedForwardCache {
    typename Lin::Cache up, down;
    Tensor<T> hidden;  // pre-activation, n x 2h
};

template <class T, class Lin>
class FeedForward {
  public:
    FeedForward() = default;
    FeedForward(Lin up, Lin down) : up_(std::move(up)), down_(std::move(down)) {
        require(up_.d_out() == 2 * down_.d_in(), Errc::ShapeMismatch, "FFN up width must be twice the down input");
    }

    Lin& up() noexcept { return up_; }
    Lin& down() noexcept { return down_; }
    const Lin& up() const noexcept { return up_; }
    const Lin& down() const noexcept { return down_; }

    Tensor<T> forward(const Tensor<T>& x, const StepContext& ctx, FeedForwardCache<T, Lin>* cache = nullptr) const {
        FeedForwardCache<T, Lin> local;
        auto& c = cache ? *cache : local;
        c.hidden = up_.forward(x, ctx, &c.up);
        return down_.forward(swiglu(c.hidden), ctx, &c.down);
    }

    Tensor<T> backward(const FeedForwardCache<T, Lin>& c, const Tensor<T>& dout, bool accumulate) {
        const Tensor<T> da = down_.backward_input(c.down, dout, accumulate);
        return up_.backward_input(c.up, swiglu_backward(c.hidden, da), accumulate);
    }

  private:
    Lin up_, down_;
};

}  // namespace maemi
