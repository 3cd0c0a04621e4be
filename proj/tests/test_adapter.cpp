// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>

#include "maemi/adapter.hpp"

using namespace maemi;

namespace {

AdapterConfig config(AdapterMode mode, int r_min = 4, int r_max = 16, double dropout = 0.0) {
    AdapterConfig c;
    c.mode = mode;
    c.r_min = r_min;
    c.r_max = r_max;
    c.dropout = dropout;
    return c;
}

Tensor<double> randm(std::size_t r, std::size_t c, Prng& p, double sd = 1.0) { return randn<double>({r, c}, sd, p); }

// Y computed from explicit dense matrices: X·W0 + α·X·(A·mask)·(mask·B).
Tensor<double> dense_oracle(const AdapterLinear<double>& layer, const Tensor<double>& x, int b) {
    const std::size_t rmax = layer.A().cols();
    Tensor<double> a = layer.A(), bm = layer.B();
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t c = static_cast<std::size_t>(b); c < rmax; ++c) a(i, c) = 0;
    for (std::size_t r = static_cast<std::size_t>(b); r < rmax; ++r)
        for (std::size_t c = 0; c < bm.cols(); ++c) bm(r, c) = 0;
    const Tensor<double> delta = matmul(a, bm);
    const double alpha = 1.0 / b;
    Tensor<double> y({x.rows(), layer.d_out()});
    for (std::size_t n = 0; n < x.rows(); ++n)
        for (std::size_t j = 0; j < layer.d_out(); ++j) {
            double s = 0;
            for (std::size_t i = 0; i < layer.d_in(); ++i) s += x(n, i) * (layer.base()(i, j) + alpha * delta(i, j));
            y(n, j) = s;
        }
    return y;
}

double half_sq(const Tensor<double>& y) {
    double s = 0;
    for (double v : y.values()) s += 0.5 * v * v;
    return s;
}

}  // namespace

TEST(Adapter, FreshAdapterIsBaseExactly) {
    Prng p(1);
    for (auto mode : {AdapterMode::lora, AdapterMode::lora_fa}) {
        auto layer = init_adapter<float>(24, 20, config(mode), p);
        const auto x = randn<float>({5, 24}, 1.0, p);
        const auto base = matmul(x, layer.base());
        for (int b = 4; b <= 16; ++b) EXPECT_EQ(layer.forward(x, {b, false, nullptr}), base) << "rank " << b;
    }
}

TEST(Adapter, ZeroInitAndNormalA) {
    Prng p(2);
    const auto layer = init_adapter<double>(400, 64, config(AdapterMode::lora_fa), p);
    for (double v : layer.B().values()) EXPECT_EQ(v, 0.0);
    double ss = 0;
    for (double v : layer.A().values()) ss += v * v;
    EXPECT_NEAR(ss / static_cast<double>(layer.A().size()), 1.0 / 400, 0.1 / 400);
}

TEST(Adapter, RankLargerThanLayerIsBadRank) {
    Prng p(3);
    try {
        (void)init_adapter<float>(8, 12, config(AdapterMode::lora_fa, 4, 9), p);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::BadRank);
    }
}

TEST(Adapter, SameSeedSameA) {
    Prng p1(9), p2(9);
    const auto a = init_adapter<float>(32, 32, config(AdapterMode::lora_fa), p1);
    const auto b = init_adapter<float>(32, 32, config(AdapterMode::lora_fa), p2);
    EXPECT_EQ(a.A(), b.A());
    EXPECT_EQ(a.base(), b.base());
}

TEST(Adapter, HandExample) {
    Prng p(4);
    AdapterConfig c = config(AdapterMode::lora, 1, 1);
    c.alpha_mode = AlphaMode::fixed;
    c.alpha = 1.0;
    AdapterLinear<double> layer(Tensor<double>::matrix(2, 2, {1, 0, 0, 1}), c, p);
    layer.mutable_A() = Tensor<double>::matrix(2, 1, {1, 0});
    layer.mutable_B() = Tensor<double>::matrix(1, 2, {2, 0});
    const auto y = layer.forward(Tensor<double>::matrix(1, 2, {1, 1}), {1, false, nullptr});
    EXPECT_DOUBLE_EQ(y[0], 3.0);
    EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(Adapter, TruncationMatchesMaskedDenseOracle) {
    Prng p(5);
    auto layer = init_adapter<double>(20, 18, config(AdapterMode::lora), p);
    layer.mutable_B() = randm(16, 18, p);
    const auto x = randm(3, 20, p);
    for (int b = 4; b <= 16; ++b) {
        const auto y = layer.forward(x, {b, false, nullptr});
        const auto ref = dense_oracle(layer, x, b);
        for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], ref[i], 1e-10) << "rank " << b;
    }
}

TEST(Adapter, RankOutOfRange) {
    Prng p(6);
    const auto layer = init_adapter<float>(16, 16, config(AdapterMode::lora_fa), p);
    const auto x = randn<float>({1, 16}, 1.0, p);
    for (int b : {3, 17}) {
        try {
            (void)layer.forward(x, {b, false, nullptr});
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), Errc::RankOutOfRange);
        }
    }
}

TEST(Adapter, ZeroUpstreamGradientGivesZeros) {
    Prng p(7);
    auto layer = init_adapter<double>(12, 10, config(AdapterMode::lora, 2, 8), p);
    layer.mutable_B() = randm(8, 10, p);
    AdapterCache<double> cache;
    (void)layer.forward(randm(4, 12, p), {5, false, nullptr}, &cache);
    const auto g = layer.backward(cache, Tensor<double>({4, 10}));
    for (const auto* t : {&g.dA, &g.dB, &g.dX})
        for (double v : t->values()) EXPECT_EQ(v, 0.0);
}

TEST(Adapter, GradientsMatchFiniteDifferences) {
    for (auto mode : {AdapterMode::lora, AdapterMode::lora_fa}) {
        Prng p(8);
        auto layer = init_adapter<double>(10, 9, config(mode, 2, 6), p);
        layer.mutable_B() = randm(6, 9, p, 0.5);
        auto x = randm(3, 10, p);
        const int b = 4;
        const StepContext ctx{b, false, nullptr};
        AdapterCache<double> cache;
        const auto y = layer.forward(x, ctx, &cache);
        const auto g = layer.backward(cache, y);  // dY of ½‖Y‖² is Y
        EXPECT_EQ(g.dA.empty(), mode == AdapterMode::lora_fa);
        const double h = 1e-6;
        auto check = [&](Tensor<double>& param, const Tensor<double>& grad, const char* what) {
            double worst = 0;
            for (std::size_t r = 0; r < grad.rows(); ++r)
                for (std::size_t c = 0; c < grad.cols(); ++c) {
                    const std::size_t idx = r * param.cols() + c;
                    const double keep = param[idx];
                    param[idx] = keep + h;
                    const double up = half_sq(layer.forward(x, ctx));
                    param[idx] = keep - h;
                    const double down = half_sq(layer.forward(x, ctx));
                    param[idx] = keep;
                    const double fd = (up - down) / (2 * h);
                    worst = std::max(worst, std::abs(fd - grad(r, c)) / std::max(1e-8, std::abs(fd) + std::abs(grad(r, c))));
                }
            EXPECT_LT(worst, 1e-5) << what;
        };
        check(x, g.dX, "dX");
        const Tensor<double> bcopy = layer.B();
        {
            double worst = 0;
            for (std::size_t r = 0; r < static_cast<std::size_t>(b); ++r)
                for (std::size_t c = 0; c < 9; ++c) {
                    const double keep = bcopy(r, c);
                    layer.mutable_B()(r, c) = keep + h;
                    const double up = half_sq(layer.forward(x, ctx));
                    layer.mutable_B()(r, c) = keep - h;
                    const double down = half_sq(layer.forward(x, ctx));
                    layer.mutable_B()(r, c) = keep;
                    const double fd = (up - down) / (2 * h);
                    worst = std::max(worst, std::abs(fd - g.dB(r, c)) / std::max(1e-8, std::abs(fd) + std::abs(g.dB(r, c))));
                }
            EXPECT_LT(worst, 1e-5) << "dB";
        }
        if (mode == AdapterMode::lora) {
            double worst = 0;
            for (std::size_t r = 0; r < 10; ++r)
                for (std::size_t c = 0; c < static_cast<std::size_t>(b); ++c) {
                    const double keep = layer.A()(r, c);
                    layer.mutable_A()(r, c) = keep + h;
                    const double up = half_sq(layer.forward(x, ctx));
                    layer.mutable_A()(r, c) = keep - h;
                    const double down = half_sq(layer.forward(x, ctx));
                    layer.mutable_A()(r, c) = keep;
                    const double fd = (up - down) / (2 * h);
                    worst = std::max(worst, std::abs(fd - g.dA(r, c)) / std::max(1e-8, std::abs(fd) + std::abs(g.dA(r, c))));
                }
            EXPECT_LT(worst, 1e-5) << "dA";
        }
    }
}

TEST(Adapter, StaleCacheRejected) {
    Prng p(10);
    auto layer = init_adapter<double>(8, 8, config(AdapterMode::lora_fa, 2, 4), p);
    AdapterCache<double> cache;
    const auto x = randm(2, 8, p);
    (void)layer.forward(x, {3, false, nullptr}, &cache);
    layer.mutable_B()[0] = 1.0;
    try {
        (void)layer.backward(cache, Tensor<double>({2, 8}, 1.0));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::StaleCache);
    }
}

TEST(Adapter, FrozenAAfterManySteps) {
    Prng p(11);
    auto layer = init_adapter<float>(16, 16, config(AdapterMode::lora_fa, 4, 16, 0.05), p);
    const auto a0 = layer.A();
    const auto w0 = layer.base();
    RankSampler sampler(4, 16);
    for (int step = 0; step < 100; ++step) {
        const int b = sampler.sample(p);
        AdapterCache<float> cache;
        const auto x = randn<float>({4, 16}, 1.0, p);
        const auto y = layer.forward(x, {b, true, &p}, &cache);
        layer.apply_update(layer.backward(cache, y), b, false);
    }
    EXPECT_EQ(layer.A(), a0);
    EXPECT_EQ(layer.base(), w0);
    bool moved = false;
    for (float v : layer.B().values()) moved = moved || v != 0.0f;
    EXPECT_TRUE(moved);
}

TEST(Adapter, UpdateTouchesOnlyActiveRows) {
    Prng p(12);
    auto layer = init_adapter<double>(16, 12, config(AdapterMode::lora, 4, 12), p);
    layer.mutable_B() = randm(12, 12, p);
    const auto a_before = layer.A();
    const auto b_before = layer.B();
    AdapterCache<double> cache;
    const auto y = layer.forward(randm(3, 16, p), {5, false, nullptr}, &cache);
    layer.apply_update(layer.backward(cache, y), 5, false);
    for (std::size_t r = 0; r < 12; ++r)
        for (std::size_t c = 0; c < 12; ++c) {
            if (r >= 5) EXPECT_EQ(layer.B()(r, c), b_before(r, c));
            else EXPECT_NE(layer.B()(r, c), b_before(r, c));
        }
    for (std::size_t r = 0; r < 16; ++r)
        for (std::size_t c = 5; c < 12; ++c) EXPECT_EQ(layer.A()(r, c), a_before(r, c));
}

TEST(Adapter, RankNormalization) {
    // Adam is scale-invariant in its first step, so compare the moments.
    auto run = [](int b, bool norm) {
        Prng p(13);
        auto layer = init_adapter<double>(16, 16, config(AdapterMode::lora_fa, 4, 16), p);
        layer.mutable_B() = randm(16, 16, p);
        AdapterCache<double> cache;
        const auto y = layer.forward(randm(2, 16, p), {b, false, nullptr}, &cache);
        const auto g = layer.backward(cache, y);
        layer.apply_update(g, b, norm);
        return std::make_pair(g, layer);
    };
    const auto [g16, off16] = run(16, false);
    const auto [g16n, on16] = run(16, true);
    EXPECT_EQ(off16.B(), on16.B());

    const auto [g4, on4] = run(4, true);
    const auto& m = on4.optimizer_B().m;
    for (std::size_t i = 0; i < g4.dB.size(); ++i) EXPECT_NEAR(m[i], 0.1 * 4.0 * g4.dB[i], 1e-12);
}

TEST(Adapter, RankMismatchOnUpdate) {
    Prng p(14);
    auto layer = init_adapter<double>(16, 16, config(AdapterMode::lora_fa), p);
    AdapterCache<double> cache;
    const auto y = layer.forward(randm(2, 16, p), {6, false, nullptr}, &cache);
    const auto g = layer.backward(cache, y);
    try {
        layer.apply_update(g, 7, false);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::RankMismatch);
    }
}

TEST(GradAccumulator, MeanAndEmptyFlush) {
    GradAccumulator<double> acc;
    EXPECT_THROW((void)acc.flush(), Error);
    AdapterGrads<double> a{4, Tensor<double>({4, 2}, 1.0), {}, {}}, b{4, Tensor<double>({4, 2}, 3.0), {}, {}};
    acc.add(a);
    acc.add(b);
    const auto m = acc.flush();
    for (double v : m.dB.values()) EXPECT_EQ(v, 2.0);
    EXPECT_EQ(acc.count(), 0);
}

TEST(RankSampler, DegenerateRange) {
    Prng p(15);
    RankSampler s(7, 7);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(s.sample(p), 7);
}

TEST(RankSampler, UniformFrequencies) {
    Prng p(16);
    const RankSampler s;
    EXPECT_EQ(s.r_min(), 4);
    EXPECT_EQ(s.r_max(), 16);
    std::map<int, int> counts;
    for (int i = 0; i < 10000; ++i) ++counts[sample_rank(s, p)];
    EXPECT_EQ(counts.size(), 13u);
    for (const auto& [rank, n] : counts) {
        EXPECT_GE(rank, 4);
        EXPECT_LE(rank, 16);
        EXPECT_NEAR(n / 10000.0, 1.0 / 13, 0.2 / 13) << "rank " << rank;
    }
}

TEST(RankSampler, WeightedSupport) {
    Prng p(17);
    RankSampler s(4, 6, {0.0, 1.0, 0.0});
    for (int i = 0; i < 50; ++i) EXPECT_EQ(s.sample(p), 5);
    EXPECT_THROW(RankSampler(4, 6, {0.5, 0.6, 0.0}), Error);
}

TEST(Quantization, ZeroMatrixRoundTrips) {
    const Tensor<float> w({5, 3});
    const auto q = quantize_woq(w);
    for (float s : q.scales) EXPECT_EQ(s, 1.0f);
    EXPECT_EQ(dequantize<float>(q), w);
}

TEST(Quantization, HandColumn) {
    const auto w = Tensor<double>::matrix(3, 1, {0.5, -1.0, 0.25});
    const auto q = quantize_woq(w);
    EXPECT_FLOAT_EQ(q.scales[0], static_cast<float>(1.0 / 127));
    EXPECT_EQ(q.q[0], 64);
    EXPECT_EQ(q.q[1], -127);
    EXPECT_EQ(q.q[2], 32);
    const auto d = dequantize<double>(q);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_LE(std::abs(d[i] - w[i]), 1.0 / 254 + 1e-9);
}

TEST(Quantization, ErrorBoundOnRandomMatrices) {
    Prng p(18);
    for (int trial = 0; trial < 20; ++trial) {
        const auto w = randn<float>({13, 7}, 0.3 + trial, p);
        const auto q = quantize_woq(w);
        const auto d = dequantize<float>(q);
        for (std::size_t i = 0; i < w.rows(); ++i)
            for (std::size_t j = 0; j < w.cols(); ++j) {
                const float s = q.scales[j];
                EXPECT_LE(std::abs(d(i, j) - w(i, j)), s / 2 + std::nextafter(std::abs(w(i, j)), INFINITY) - std::abs(w(i, j)));
            }
    }
}

TEST(Quantization, NonFiniteRejected) {
    Tensor<float> w({2, 2}, 1.0f);
    w[3] = std::numeric_limits<float>::infinity();
    EXPECT_THROW((void)quantize_woq(w), Error);
}

TEST(Quantization, QuantizedForwardBound) {
    Prng p(19);
    auto layer = init_adapter<double>(32, 16, config(AdapterMode::lora_fa), p);
    const auto full = layer.base();
    const auto x = randm(4, 32, p);
    const auto y_full = matmul(x, full);
    layer.quantize_base();
    const auto y_q = layer.forward(x, {8, false, nullptr});
    double max_scale = 0;
    for (float s : layer.quantized()->scales) max_scale = std::max<double>(max_scale, s);
    for (std::size_t n = 0; n < 4; ++n) {
        double l1 = 0;
        for (double v : x.row(n)) l1 += std::abs(v);
        for (std::size_t j = 0; j < 16; ++j) EXPECT_LE(std::abs(y_q(n, j) - y_full(n, j)), l1 * max_scale / 2 + 1e-9);
    }
    EXPECT_LT(layer.quantized()->payload_bytes(), full.size() * sizeof(float) * 3 / 10);
}
