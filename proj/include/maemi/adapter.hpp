// SPDX-License-Identifier: Apache-2.0
//
// Dynamic-rank low-rank adapters over (optionally int8-quantized) frozen base
// weights. Row-vector convention throughout:
//
//     Y = X * W0 + alpha(b) * dropout(X * A[:, :b]) * B[:b, :]
//
// with X: n x d_in, W0: d_in x d_out, A: d_in x r_max, B: r_max x d_out.
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "maemi/error.hpp"
#include "maemi/tensor.hpp"

namespace maemi {

// ---------------------------------------------------------------------------
// Weight-only int8 quantization, symmetric, one scale per output column.

struct QuantizedMatrix {
    std::size_t rows = 0;  // d_in
    std::size_t cols = 0;  // d_out
    std::vector<std::int8_t> q;
    std::vector<float> scales;

    std::size_t payload_bytes() const noexcept { return q.size() * sizeof(std::int8_t) + scales.size() * sizeof(float); }
    bool operator==(const QuantizedMatrix&) const = default;
};

template <class T>
QuantizedMatrix quantize_woq(const Tensor<T>& w) {
    check_finite(w, "quantize_woq input");
    QuantizedMatrix qm;
    qm.rows = w.rows();
    qm.cols = w.cols();
    qm.q.resize(w.size());
    qm.scales.resize(qm.cols);
    for (std::size_t j = 0; j < qm.cols; ++j) {
        double mx = 0.0;
        for (std::size_t i = 0; i < qm.rows; ++i) mx = std::max(mx, std::abs(static_cast<double>(w(i, j))));
        if (mx == 0.0) {
            qm.scales[j] = 1.0f;
            continue;  // q stays zero
        }
        qm.scales[j] = static_cast<float>(mx / 127.0);
        for (std::size_t i = 0; i < qm.rows; ++i) {
            // std::round rounds half away from zero.
            double r = std::round(static_cast<double>(w(i, j)) * 127.0 / mx);
            r = std::clamp(r, -127.0, 127.0);
            qm.q[i * qm.cols + j] = static_cast<std::int8_t>(r);
        }
    }
    return qm;
}

template <class T>
Tensor<T> dequantize(const QuantizedMatrix& qm) {
    Tensor<T> w({qm.rows, qm.cols});
    for (std::size_t i = 0; i < qm.rows; ++i)
        for (std::size_t j = 0; j < qm.cols; ++j)
            w(i, j) = static_cast<T>(qm.q[i * qm.cols + j]) * static_cast<T>(qm.scales[j]);
    return w;
}

// ---------------------------------------------------------------------------

enum class AdapterMode { lora, lora_fa };
enum class AlphaMode { fixed, one_over_rank };

struct AdapterConfig {
    int r_min = 4;
    int r_max = 16;
    AdapterMode mode = AdapterMode::lora_fa;
    AlphaMode alpha_mode = AlphaMode::one_over_rank;
    double alpha = 1.0;  // used when alpha_mode == fixed
    double dropout = 0.05;
};

/// Per-call knobs shared by every layer in one forward pass.
struct StepContext {
    int rank = 0;
    bool training = false;
    Prng* prng = nullptr;  // required when training with dropout
};

template <class T>
struct AdapterCache {
    Tensor<T> X;      // only kept in lora mode (dA needs it)
    Tensor<T> XA;     // low-rank activation after dropout
    Tensor<T> mask;   // dropout multipliers, empty when no dropout was applied
    int rank = 0;
    std::uint64_t version = 0;
    bool valid = false;
};

template <class T>
struct AdapterGrads {
    int rank = 0;
    Tensor<T> dB;  // rank x d_out
    Tensor<T> dA;  // d_in x rank, empty in lora_fa mode
    Tensor<T> dX;
};

/// Sums adapter gradients across micro-steps; flush() returns the mean.
template <class T>
class GradAccumulator {
  public:
    void add(const AdapterGrads<T>& g) {
        if (count_ == 0) {
            sum_.rank = g.rank;
            sum_.dB = g.dB;
            sum_.dA = g.dA;
        } else {
            require(g.rank == sum_.rank, Errc::RankMismatch,
                    "accumulating rank " + std::to_string(g.rank) + " into rank " + std::to_string(sum_.rank));
            add_inplace(sum_.dB, g.dB);
            if (!g.dA.empty()) add_inplace(sum_.dA, g.dA);
        }
        ++count_;
    }

    AdapterGrads<T> flush() {
        require(count_ > 0, Errc::EmptyAccumulator, "flush of an empty gradient accumulator");
        AdapterGrads<T> out = std::move(sum_);
        const T inv = T{1} / static_cast<T>(count_);
        scale_inplace(out.dB, inv);
        scale_inplace(out.dA, inv);
        sum_ = {};
        count_ = 0;
        return out;
    }

    int count() const noexcept { return count_; }
    int rank() const noexcept { return sum_.rank; }

  private:
    AdapterGrads<T> sum_;
    int count_ = 0;
};

template <class T>
class AdapterLinear {
  public:
    using Cache = AdapterCache<T>;

    AdapterLinear() = default;

    /// Wraps a frozen base weight. A ~ N(0, 1/d_in), B = 0.
    AdapterLinear(Tensor<T> w0, const AdapterConfig& cfg, Prng& prng) : cfg_(cfg), w0_(std::move(w0)) {
        const auto d_in = w0_.rows(), d_out = w0_.cols();
        require(d_in > 0 && d_out > 0, Errc::BadRank, "adapter dimensions must be positive");
        require(cfg.r_min >= 1 && cfg.r_min <= cfg.r_max &&
                    static_cast<std::size_t>(cfg.r_max) <= std::min(d_in, d_out),
                Errc::BadRank,
                "need 1 <= r_min <= r_max <= min(d_in, d_out); got r_min=" + std::to_string(cfg.r_min) +
                    " r_max=" + std::to_string(cfg.r_max) + " for " + std::to_string(d_in) + "x" + std::to_string(d_out));
        require(cfg.dropout >= 0.0 && cfg.dropout < 1.0, Errc::InvalidArgument, "dropout must lie in [0,1)");
        a_ = randn<T>({d_in, static_cast<std::size_t>(cfg.r_max)}, 1.0 / std::sqrt(static_cast<double>(d_in)), prng);
        b_ = Tensor<T>({static_cast<std::size_t>(cfg.r_max), d_out});
        reset_optimizer(1e-3);
    }

    std::size_t d_in() const noexcept { return w0_.rows(); }
    std::size_t d_out() const noexcept { return w0_.cols(); }
    const AdapterConfig& config() const noexcept { return cfg_; }
    AdapterMode mode() const noexcept { return cfg_.mode; }

    const Tensor<T>& base() const noexcept { return w0_; }
    const std::optional<QuantizedMatrix>& quantized() const noexcept { return q_; }
    const Tensor<T>& A() const noexcept { return a_; }
    const Tensor<T>& B() const noexcept { return b_; }

    // Direct parameter access is for tests, checkpoint loading and gradient
    // checks. Any write invalidates outstanding caches.
    Tensor<T>& mutable_A() noexcept { ++version_; return a_; }
    Tensor<T>& mutable_B() noexcept { ++version_; return b_; }
    Tensor<T>& mutable_base() noexcept { ++version_; q_.reset(); return w0_; }

    /// Replaces the base with its int8 form; compute uses the dequantized copy.
    void quantize_base() {
        q_ = quantize_woq(w0_);
        w0_ = dequantize<T>(*q_);
        ++version_;
    }

    void set_quantized_base(QuantizedMatrix qm) {
        require(qm.rows == d_in() && qm.cols == d_out(), Errc::ShapeMismatch, "quantized base shape");
        w0_ = dequantize<T>(qm);
        q_ = std::move(qm);
        ++version_;
    }

    T alpha(int rank) const {
        return cfg_.alpha_mode == AlphaMode::one_over_rank ? T{1} / static_cast<T>(rank) : static_cast<T>(cfg_.alpha);
    }

    void check_rank(int rank) const {
        require(rank >= cfg_.r_min && rank <= cfg_.r_max, Errc::RankOutOfRange,
                "rank " + std::to_string(rank) + " outside [" + std::to_string(cfg_.r_min) + ", " +
                    std::to_string(cfg_.r_max) + "]");
    }

    /// When nonzero, overrides the context rank (per-layer rank draws).
    void set_layer_rank(int rank) {
        if (rank != 0) check_rank(rank);
        layer_rank_ = rank;
    }
    int layer_rank() const noexcept { return layer_rank_; }

    Tensor<T> forward(const Tensor<T>& x, const StepContext& ctx, AdapterCache<T>* cache = nullptr) const {
        const int rank = layer_rank_ ? layer_rank_ : ctx.rank;
        check_rank(rank);
        require(x.cols() == d_in(), Errc::ShapeMismatch,
                "adapter input " + shape_str(x.shape()) + " vs d_in " + std::to_string(d_in()));
        const auto b = static_cast<std::size_t>(rank);
        Tensor<T> y = matmul(x, w0_);
        Tensor<T> xa = matmul(x, slice_cols(a_, 0, b));
        Tensor<T> mask;
        if (ctx.training && cfg_.dropout > 0.0) {
            require(ctx.prng != nullptr, Errc::InvalidArgument, "training forward with dropout needs a Prng");
            mask = Tensor<T>(xa.shape());
            const T keep = static_cast<T>(1.0 / (1.0 - cfg_.dropout));
            for (std::size_t i = 0; i < mask.size(); ++i) {
                mask[i] = ctx.prng->uniform() < cfg_.dropout ? T{0} : keep;
                xa[i] *= mask[i];
            }
        }
        Tensor<T> low = matmul(xa, slice_rows(b_, 0, b));
        const T a = alpha(rank);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * low[i];
        if (cache) {
            cache->X = cfg_.mode == AdapterMode::lora ? x : Tensor<T>{};
            cache->XA = std::move(xa);
            cache->mask = std::move(mask);
            cache->rank = rank;
            cache->version = version_;
            cache->valid = true;
        }
        return y;
    }

    AdapterGrads<T> backward(const AdapterCache<T>& cache, const Tensor<T>& dy) const {
        require(cache.valid && cache.version == version_, Errc::StaleCache,
                "backward needs the cache of a forward pass over the current parameters");
        require(dy.rows() == cache.XA.rows() && dy.cols() == d_out(), Errc::ShapeMismatch,
                "adapter dY " + shape_str(dy.shape()));
        const int rank = cache.rank;
        const auto b = static_cast<std::size_t>(rank);
        const T a = alpha(rank);
        const Tensor<T> a_b = slice_cols(a_, 0, b);
        const Tensor<T> b_b = slice_rows(b_, 0, b);

        AdapterGrads<T> g;
        g.rank = rank;
        g.dB = matmul_tn(cache.XA, dy);
        scale_inplace(g.dB, a);

        Tensor<T> gxa = matmul_nt(dy, b_b);  // n x b
        if (!cache.mask.empty())
            for (std::size_t i = 0; i < gxa.size(); ++i) gxa[i] *= cache.mask[i];
        if (cfg_.mode == AdapterMode::lora) {
            g.dA = matmul_tn(cache.X, gxa);
            scale_inplace(g.dA, a);
        }
        g.dX = matmul_nt(dy, w0_);
        Tensor<T> low = matmul_nt(gxa, a_b);
        for (std::size_t i = 0; i < g.dX.size(); ++i) g.dX[i] += a * low[i];
        return g;
    }

    /// Rank-aware write-back: only rows [0,b) of B (and columns [0,b) of A in
    /// lora mode) move. rank_norm multiplies the gradient by r_max/b first.
    void apply_update(const AdapterGrads<T>& g, int rank, bool rank_norm) {
        check_rank(rank);
        const auto b = static_cast<std::size_t>(rank);
        require(g.rank == rank && g.dB.rows() == b && g.dB.cols() == d_out(), Errc::RankMismatch,
                "gradients at rank " + std::to_string(g.rank) + " applied at rank " + std::to_string(rank));
        const T scale = rank_norm ? static_cast<T>(cfg_.r_max) / static_cast<T>(rank) : T{1};
        opt_b_.begin_step();
        for (std::size_t i = 0; i < b * d_out(); ++i) opt_b_.update(i, b_[i], scale * g.dB[i]);
        if (cfg_.mode == AdapterMode::lora) {
            require(g.dA.rows() == d_in() && g.dA.cols() == b, Errc::RankMismatch, "dA shape does not match rank");
            opt_a_.begin_step();
            const auto rmax = static_cast<std::size_t>(cfg_.r_max);
            for (std::size_t r = 0; r < d_in(); ++r)
                for (std::size_t c = 0; c < b; ++c) opt_a_.update(r * rmax + c, a_[r * rmax + c], scale * g.dA(r, c));
        }
        ++version_;
    }

    // Training-loop conveniences: accumulate across samples, then step.
    Tensor<T> backward_accumulate(const AdapterCache<T>& cache, const Tensor<T>& dy) {
        AdapterGrads<T> g = backward(cache, dy);
        Tensor<T> dx = std::move(g.dX);
        accum_.add(g);
        return dx;
    }

    Tensor<T> backward_input(const Cache& cache, const Tensor<T>& dy, bool accumulate) {
        return accumulate ? backward_accumulate(cache, dy) : backward(cache, dy).dX;
    }

    /// Mean of the accumulated gradients, clearing the accumulator.
    AdapterGrads<T> take_gradients() { return accum_.flush(); }

    void step(bool rank_norm) {
        if (accum_.count() == 0) return;  // layer unused this step
        AdapterGrads<T> g = accum_.flush();
        apply_update(g, g.rank, rank_norm);
    }

    void reset_optimizer(double lr) {
        opt_b_ = AdamState<T>(b_.shape(), lr);
        opt_a_ = cfg_.mode == AdapterMode::lora ? AdamState<T>(a_.shape(), lr) : AdamState<T>{};
    }
    void set_learning_rate(double lr) {
        opt_b_.lr = lr;
        opt_a_.lr = lr;
    }

    const AdamState<T>& optimizer_B() const noexcept { return opt_b_; }
    const AdamState<T>& optimizer_A() const noexcept { return opt_a_; }
    const GradAccumulator<T>& accumulator() const noexcept { return accum_; }

    /// Bytes held for trainable parameters plus their optimizer moments.
    std::size_t trainable_state_bytes() const noexcept {
        std::size_t n = b_.size() + opt_b_.m.size() + opt_b_.v.size();
        if (cfg_.mode == AdapterMode::lora) n += a_.size() + opt_a_.m.size() + opt_a_.v.size();
        return n * sizeof(T);
    }

  private:
    AdapterConfig cfg_;
    Tensor<T> w0_;
    std::optional<QuantizedMatrix> q_;
    Tensor<T> a_;
    Tensor<T> b_;
    AdamState<T> opt_a_;
    AdamState<T> opt_b_;
    GradAccumulator<T> accum_;
    std::uint64_t version_ = 0;
    int layer_rank_ = 0;
};

/// Builds an adapter over a freshly drawn base W0 ~ N(0, 1/d_in).
template <class T>
AdapterLinear<T> init_adapter(std::size_t d_in, std::size_t d_out, const AdapterConfig& cfg, Prng& prng) {
    require(d_in > 0 && d_out > 0, Errc::BadRank, "adapter dimensions must be positive");
    Tensor<T> w0 = randn<T>({d_in, d_out}, 1.0 / std::sqrt(static_cast<double>(d_in)), prng);
    return AdapterLinear<T>(std::move(w0), cfg, prng);
}

// ---------------------------------------------------------------------------

/// Categorical distribution over the ranks [r_min, r_max].
class RankSampler {
  public:
    RankSampler() : RankSampler(4, 16) {}
    RankSampler(int r_min, int r_max) : r_min_(r_min), r_max_(r_max) {
        require(r_min >= 1 && r_min <= r_max, Errc::BadRank, "rank sampler needs 1 <= r_min <= r_max");
        weights_.assign(static_cast<std::size_t>(r_max - r_min + 1), 1.0 / (r_max - r_min + 1));
    }
    RankSampler(int r_min, int r_max, std::vector<double> weights) : RankSampler(r_min, r_max) {
        require(weights.size() == weights_.size(), Errc::InvalidArgument, "one weight per rank required");
        double sum = 0.0;
        for (double w : weights) {
            require(w >= 0.0 && std::isfinite(w), Errc::InvalidArgument, "rank weights must be finite and >= 0");
            sum += w;
        }
        require(std::abs(sum - 1.0) < 1e-9, Errc::InvalidArgument, "rank weights must sum to 1");
        weights_ = std::move(weights);
    }

    int r_min() const noexcept { return r_min_; }
    int r_max() const noexcept { return r_max_; }
    const std::vector<double>& weights() const noexcept { return weights_; }

    int sample(Prng& prng) const {
        const double u = prng.uniform();
        double acc = 0.0;
        for (std::size_t i = 0; i < weights_.size(); ++i) {
            acc += weights_[i];
            if (u < acc) return r_min_ + static_cast<int>(i);
        }
        // u landed in the rounding slack above the last cumulative sum.
        for (std::size_t i = weights_.size(); i-- > 0;)
            if (weights_[i] > 0.0) return r_min_ + static_cast<int>(i);
        return r_max_;
    }

  private:
    int r_min_;
    int r_max_;
    std::vector<double> weights_;
};

inline int sample_rank(const RankSampler& sampler, Prng& prng) { return sampler.sample(prng); }

}  // namespace maemi
