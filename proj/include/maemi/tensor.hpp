// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors and the handful of numeric kernels the rest of the
// library is built from. Every reduction runs in a single fixed order so that
// results are bitwise reproducible run to run.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "maemi/error.hpp"

namespace maemi {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <class T>
class Tensor {
  public:
    using value_type = T;

    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        require(shape_numel(shape_) == data_.size(), Errc::ShapeMismatch,
                "shape " + shape_str(shape_) + " does not hold " + std::to_string(data_.size()) + " elements");
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> data) {
        return Tensor({rows, cols}, std::move(data));
    }
    static Tensor zeros(std::size_t rows, std::size_t cols) { return Tensor({rows, cols}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t ndim() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // 2-D views; a 1-D tensor is treated as a single row.
    std::size_t rows() const noexcept { return shape_.size() >= 2 ? data_.size() / shape_.back() : 1; }
    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols(), cols()}; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    T* data() noexcept { return data_.data(); }
    const T* data() const noexcept { return data_.data(); }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <class U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& o) const = default;

  private:
    Shape shape_;
    std::vector<T> data_;
};

template <class T>
bool all_finite(const Tensor<T>& t) {
    return std::all_of(t.values().begin(), t.values().end(), [](T v) { return std::isfinite(v); });
}

template <class T>
void check_finite(const Tensor<T>& t, const char* where) {
    if (!all_finite(t)) fail(Errc::NonFinite, std::string("non-finite value in ") + where);
}

// ---------------------------------------------------------------------------
// Prng: xoshiro256** seeded through splitmix64.

class Prng {
  public:
    explicit Prng(std::uint64_t seed = 0) : seed_(seed) {
        std::uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
    }

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next() noexcept {
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n), rejection-sampled so there is no modulo bias.
    std::uint64_t below(std::uint64_t n) {
        require(n > 0, Errc::InvalidArgument, "Prng::below(0)");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                    std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x;
        do {
            x = next();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller (no cached second value, so the stream
    /// position is a simple function of the call count).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    /// Derives an independent stream; used to give subsystems their own
    /// generators without coupling their call counts.
    Prng fork(std::uint64_t stream) {
        std::uint64_t x = next() ^ (stream * 0x9E3779B97F4A7C15ULL);
        return Prng(splitmix64(x));
    }

    template <class It>
    void shuffle(It first, It last) {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) std::swap(first[i - 1], first[below(i)]);
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }
    static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
        std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::uint64_t state_[4]{};
};

template <class T>
Tensor<T> randn(Shape shape, double stddev, Prng& prng) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(prng.normal() * stddev);
    return t;
}

// ---------------------------------------------------------------------------
// Matrix products. C[i][j] always accumulates over k in ascending order.

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    require(k == b.rows(), Errc::ShapeMismatch, "matmul " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<T> c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c.data() + i * n;
        const T* ai = a.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ai[p];
            const T* bp = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
    check_finite(c, "matmul");
    return c;
}

/// a^T * b
template <class T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    require(k == b.rows(), Errc::ShapeMismatch, "matmul_tn " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<T> c({m, n});
    for (std::size_t p = 0; p < k; ++p) {
        const T* ap = a.data() + p * m;
        const T* bp = b.data() + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const T av = ap[i];
            T* ci = c.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
    check_finite(c, "matmul_tn");
    return c;
}

/// a * b^T
template <class T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    require(k == b.cols(), Errc::ShapeMismatch, "matmul_nt " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Tensor<T> c({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* bj = b.data() + j * k;
            T s{0};
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            c(i, j) = s;
        }
    }
    check_finite(c, "matmul_nt");
    return c;
}

template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
    Tensor<T> t({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

template <class T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    require(a.size() == b.size(), Errc::ShapeMismatch, "add " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <class T>
Tensor<T> add(Tensor<T> a, const Tensor<T>& b) {
    add_inplace(a, b);
    return a;
}

template <class T>
void scale_inplace(Tensor<T>& a, T s) {
    for (auto& v : a.values()) v *= s;
}

/// Rows [begin, end) as a new matrix.
template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
    const std::size_t c = a.cols();
    std::vector<T> d(a.data() + begin * c, a.data() + end * c);
    return Tensor<T>::matrix(end - begin, c, std::move(d));
}

/// Columns [begin, end) as a new matrix.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
    Tensor<T> out({a.rows(), end - begin});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = a(i, j);
    return out;
}

// ---------------------------------------------------------------------------
// Softmax

template <class T>
void softmax_row_inplace(std::span<T> x) {
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : x) mx = std::max(mx, v);
    T sum{0};
    for (T& v : x) {
        v = std::exp(v - mx);
        sum += v;
    }
    for (T& v : x) v /= sum;
}

/// Softmax along `axis` of a 1-D or 2-D tensor (axis -1 means the last one).
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
    check_finite(x, "softmax input");
    const int nd = static_cast<int>(std::max<std::size_t>(x.ndim(), 1));
    if (axis < 0) axis += nd;
    require(axis >= 0 && axis < nd && nd <= 2, Errc::InvalidArgument, "softmax axis out of range");
    if (axis == nd - 1) {
        Tensor<T> y = x;
        for (std::size_t r = 0; r < y.rows(); ++r) softmax_row_inplace(y.row(r));
        return y;
    }
    return transpose(softmax(transpose(x), 1));
}

// ---------------------------------------------------------------------------
// RMSNorm: y_i = g_i * x_i / sqrt(mean(x^2) + eps), applied per row.

inline constexpr double kRmsEps = 1e-6;

template <class T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, double eps = kRmsEps) {
    const std::size_t d = x.cols();
    require(gain.size() == d, Errc::ShapeMismatch, "rms_norm gain " + shape_str(gain.shape()) + " vs width " + std::to_string(d));
    Tensor<T> y(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        T ss{0};
        for (T v : xr) ss += v * v;
        const T inv = T{1} / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
        auto yr = y.row(r);
        for (std::size_t i = 0; i < d; ++i) yr[i] = gain[i] * xr[i] * inv;
    }
    return y;
}

/// dx for rms_norm with frozen gain.
template <class T>
Tensor<T> rms_norm_backward(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& dy, double eps = kRmsEps) {
    const std::size_t d = x.cols();
    require(dy.shape() == x.shape(), Errc::ShapeMismatch, "rms_norm_backward dy shape");
    Tensor<T> dx(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto gr = dy.row(r);
        T ss{0};
        for (T v : xr) ss += v * v;
        const T ms = ss / static_cast<T>(d) + static_cast<T>(eps);
        const T inv = T{1} / std::sqrt(ms);
        T dot{0};
        for (std::size_t i = 0; i < d; ++i) dot += gr[i] * gain[i] * xr[i];
        const T coef = dot * inv * inv * inv / static_cast<T>(d);
        auto dr = dx.row(r);
        for (std::size_t i = 0; i < d; ++i) dr[i] = gr[i] * gain[i] * inv - xr[i] * coef;
    }
    return dx;
}

// ---------------------------------------------------------------------------
// SwiGLU: the last dimension is split into (u, v); out = silu(u) * v.

template <class T>
T sigmoid(T z) {
    return T{1} / (T{1} + std::exp(-z));
}

template <class T>
T silu(T z) {
    return z * sigmoid(z);
}

template <class T>
Tensor<T> swiglu(const Tensor<T>& x) {
    const std::size_t w = x.cols();
    require(w % 2 == 0, Errc::OddWidth, "swiglu needs an even last dimension, got " + std::to_string(w));
    const std::size_t h = w / 2;
    Shape s = x.shape();
    s.back() = h;
    Tensor<T> y(s);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto yr = y.row(r);
        for (std::size_t i = 0; i < h; ++i) yr[i] = silu(xr[i]) * xr[h + i];
    }
    return y;
}

template <class T>
Tensor<T> swiglu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
    const std::size_t h = x.cols() / 2;
    require(x.cols() % 2 == 0 && dy.cols() == h && dy.rows() == x.rows(), Errc::ShapeMismatch, "swiglu_backward shapes");
    Tensor<T> dx(x.shape());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        auto xr = x.row(r);
        auto gr = dy.row(r);
        auto dr = dx.row(r);
        for (std::size_t i = 0; i < h; ++i) {
            const T u = xr[i], v = xr[h + i];
            const T s = sigmoid(u);
            dr[i] = gr[i] * v * (s + u * s * (T{1} - s));
            dr[h + i] = gr[i] * u * s;
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Cross-entropy over masked rows.

template <class T>
struct LossAndGrad {
    T loss{};
    Tensor<T> dlogits;
};

template <class T>
LossAndGrad<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets, std::span<const bool> mask) {
    const std::size_t n = logits.rows(), vocab = logits.cols();
    require(targets.size() == n && mask.size() == n, Errc::ShapeMismatch, "cross_entropy: targets/mask length != rows");
    check_finite(logits, "cross_entropy logits");
    const auto active = static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
    require(active > 0, Errc::AllMasked, "cross_entropy: every position is masked out");
    LossAndGrad<T> out{T{0}, Tensor<T>(logits.shape())};
    const T inv = T{1} / static_cast<T>(active);
    for (std::size_t r = 0; r < n; ++r) {
        if (!mask[r]) continue;
        const int t = targets[r];
        require(t >= 0 && static_cast<std::size_t>(t) < vocab, Errc::TargetOutOfRange,
                "target " + std::to_string(t) + " outside vocabulary of " + std::to_string(vocab));
        auto lr = logits.row(r);
        const T mx = *std::max_element(lr.begin(), lr.end());
        T sum{0};
        for (T v : lr) sum += std::exp(v - mx);
        const T log_z = mx + std::log(sum);
        out.loss += (log_z - lr[t]) * inv;
        auto gr = out.dlogits.row(r);
        for (std::size_t j = 0; j < vocab; ++j) gr[j] = std::exp(lr[j] - log_z) * inv;
        gr[t] -= inv;
    }
    if (!std::isfinite(out.loss)) fail(Errc::NonFinite, "cross_entropy loss");
    return out;
}

// ---------------------------------------------------------------------------
// Adam with bias correction.

template <class T>
struct AdamState {
    Tensor<T> m, v;
    std::int64_t t = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double lr = 1e-3;

    AdamState() = default;
    explicit AdamState(const Shape& shape, double learning_rate = 1e-3)
        : m(shape), v(shape), lr(learning_rate) {}

    bool initialized() const noexcept { return !m.empty(); }

    /// Starts a step: advances t. Follow with update() on every element that
    /// participates in this step.
    void begin_step() {
        require(beta1 > 0 && beta1 < 1 && beta2 > 0 && beta2 < 1, Errc::InvalidArgument, "Adam betas must lie in (0,1)");
        ++t;
        bc1_ = 1.0 - std::pow(beta1, static_cast<double>(t));
        bc2_ = 1.0 - std::pow(beta2, static_cast<double>(t));
    }

    void update(std::size_t i, T& param, T grad) {
        const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
        m[i] = b1 * m[i] + (T{1} - b1) * grad;
        v[i] = b2 * v[i] + (T{1} - b2) * grad * grad;
        const T mhat = m[i] / static_cast<T>(bc1_);
        const T vhat = v[i] / static_cast<T>(bc2_);
        param -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + static_cast<T>(eps));
    }

  private:
    double bc1_ = 1.0;
    double bc2_ = 1.0;
};

template <class T>
void adam_step(AdamState<T>& state, Tensor<T>& param, const Tensor<T>& grad) {
    require(param.shape() == grad.shape(), Errc::ShapeMismatch,
            "adam_step param " + shape_str(param.shape()) + " vs grad " + shape_str(grad.shape()));
    if (!state.initialized()) {
        state.m = Tensor<T>(param.shape());
        state.v = Tensor<T>(param.shape());
    }
    require(state.m.shape() == param.shape(), Errc::ShapeMismatch, "adam_step state shape");
    state.begin_step();
    for (std::size_t i = 0; i < param.size(); ++i) state.update(i, param[i], grad[i]);
}

}  // namespace maemi
