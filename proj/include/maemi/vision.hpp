// SPDX-License-Identifier: Apache-2.0
//
// Patch encoder with a two-phase attention layer: patch tokens first attend
// among themselves (local phase), then the classification token attends over
// every token (global phase). The final classification state is the image
// summary used for fusion and similarity search.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "maemi/image.hpp"
#include "maemi/layers.hpp"
#include "maemi/tensor.hpp"

namespace maemi {

struct VisionConfig {
    std::size_t image_size = kImageSize;
    std::size_t patch = 32;
    std::size_t dim = 64;
    std::size_t layers = 4;
    std::size_t heads = 4;
    std::size_t ffn_hidden = 128;

    std::size_t num_patches() const noexcept { return (image_size / patch) * (image_size / patch); }
    std::size_t patch_width() const noexcept { return patch * patch * 3; }

    void validate() const {
        require(patch > 0 && image_size % patch == 0, Errc::NonDivisible, "image size must be a multiple of the patch size");
        require(heads > 0 && dim % heads == 0, Errc::ShapeMismatch, "vision dim must be divisible by heads");
        require(layers >= 1 && ffn_hidden >= 1, Errc::BadConfig, "vision encoder needs >= 1 layer");
    }
};

template <class T>
struct VisionOutput {
    Tensor<T> h_cls;   // 1 x d
    Tensor<T> states;  // (n+1) x d, row 0 is the classification token
};

template <class T>
struct VisionLayer {
    using Lin = DenseLinear<T>;
    Tensor<T> local_gain, global_gain, ffn_gain;
    MultiHeadAttention<T, Lin> local, global;
    FeedForward<T, Lin> ffn;
};

template <class T>
struct VisionLayerCache {
    using Lin = DenseLinear<T>;
    Tensor<T> x_in;      // (n+1) x d
    Tensor<T> patches;   // rows 1..n of x_in
    Tensor<T> patch_norm;
    AttentionCache<T, Lin> local;
    Tensor<T> x_mid;     // after the local phase
    Tensor<T> cls_norm, all_norm;
    AttentionCache<T, Lin> global;
    Tensor<T> x_glob;    // after the global phase
    FeedForwardCache<T, Lin> ffn;
};

template <class T>
struct VisionCache {
    std::vector<VisionLayerCache<T>> layers;
    Tensor<T> x_final;  // before the final norm
};

template <class T>
class VisionEncoder {
  public:
    using Lin = DenseLinear<T>;

    VisionEncoder() = default;

    static VisionEncoder init(const VisionConfig& cfg, Prng& prng) {
        cfg.validate();
        VisionEncoder enc;
        enc.cfg_ = cfg;
        const std::size_t d = cfg.dim;
        enc.patch_proj_ = Lin::random(cfg.patch_width(), d, prng);
        enc.cls_ = randn<T>({1, d}, 1.0, prng);
        enc.pos_ = randn<T>({cfg.num_patches() + 1, d}, 0.1, prng);
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            VisionLayer<T> layer;
            layer.local_gain = Tensor<T>({d}, T{1});
            layer.global_gain = Tensor<T>({d}, T{1});
            layer.ffn_gain = Tensor<T>({d}, T{1});
            auto attn = [&] {
                return MultiHeadAttention<T, Lin>(Lin::random(d, d, prng), Lin::random(d, d, prng),
                                                  Lin::random(d, d, prng), Lin::random(d, d, prng), cfg.heads);
            };
            layer.local = attn();
            layer.global = attn();
            layer.ffn = FeedForward<T, Lin>(Lin::random(d, 2 * cfg.ffn_hidden, prng), Lin::random(cfg.ffn_hidden, d, prng));
            enc.layers_.push_back(std::move(layer));
        }
        enc.final_gain_ = Tensor<T>({d}, T{1});
        return enc;
    }

    const VisionConfig& config() const noexcept { return cfg_; }
    Lin& patch_proj() noexcept { return patch_proj_; }
    Tensor<T>& cls() noexcept { return cls_; }
    Tensor<T>& pos() noexcept { return pos_; }
    Tensor<T>& final_gain() noexcept { return final_gain_; }
    std::vector<VisionLayer<T>>& layers() noexcept { return layers_; }
    const std::vector<VisionLayer<T>>& layers() const noexcept { return layers_; }

    VisionOutput<T> encode(const Tensor<T>& patches, VisionCache<T>* cache = nullptr) const {
        require(patches.rows() == cfg_.num_patches() && patches.cols() == cfg_.patch_width(), Errc::ShapeMismatch,
                "encoder expects " + std::to_string(cfg_.num_patches()) + "x" + std::to_string(cfg_.patch_width()) +
                    " patches, got " + shape_str(patches.shape()));
        const StepContext ctx{};
        const std::size_t n = cfg_.num_patches(), d = cfg_.dim;
        Tensor<T> proj = patch_proj_.forward(patches, ctx);
        Tensor<T> x({n + 1, d});
        for (std::size_t j = 0; j < d; ++j) x(0, j) = cls_[j] + pos_(0, j);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) x(i + 1, j) = proj(i, j) + pos_(i + 1, j);

        if (cache) cache->layers.assign(layers_.size(), VisionLayerCache<T>{});
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const auto& L = layers_[l];
            VisionLayerCache<T> local_cache;
            auto& c = cache ? cache->layers[l] : local_cache;
            c.x_in = x;
            // Local phase: patches attend among themselves.
            c.patches = slice_rows(x, 1, n + 1);
            c.patch_norm = rms_norm(c.patches, L.local_gain);
            Tensor<T> upd = L.local.forward(c.patch_norm, c.patch_norm, false, ctx, &c.local);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) x(i + 1, j) += upd(i, j);
            c.x_mid = x;
            // Global phase: the classification token attends over all tokens.
            c.cls_norm = rms_norm(slice_rows(x, 0, 1), L.global_gain);
            c.all_norm = rms_norm(x, L.global_gain);
            Tensor<T> g = L.global.forward(c.cls_norm, c.all_norm, false, ctx, &c.global);
            for (std::size_t j = 0; j < d; ++j) x(0, j) += g(0, j);
            c.x_glob = x;
            add_inplace(x, L.ffn.forward(rms_norm(x, L.ffn_gain), ctx, &c.ffn));
        }
        if (cache) cache->x_final = x;
        VisionOutput<T> out;
        out.states = rms_norm(x, final_gain_);
        out.h_cls = slice_rows(out.states, 0, 1);
        return out;
    }

    /// Gradient of the encoder inputs (patch pixels) given d(states).
    Tensor<T> backward(const VisionCache<T>& cache, const Tensor<T>& d_states) {
        const std::size_t n = cfg_.num_patches(), d = cfg_.dim;
        Tensor<T> dx = rms_norm_backward(cache.x_final, final_gain_, d_states);
        for (std::size_t l = layers_.size(); l-- > 0;) {
            auto& L = layers_[l];
            const auto& c = cache.layers[l];
            // FFN residual.
            Tensor<T> dn = L.ffn.backward(c.ffn, dx, false);
            add_inplace(dx, rms_norm_backward(c.x_glob, L.ffn_gain, dn));
            // Global phase.
            Tensor<T> dcls_out = slice_rows(dx, 0, 1);
            auto [dq, dkv] = L.global.backward(c.global, dcls_out, false);
            Tensor<T> dq_in = rms_norm_backward(slice_rows(c.x_mid, 0, 1), L.global_gain, dq);
            add_inplace(dx, rms_norm_backward(c.x_mid, L.global_gain, dkv));
            for (std::size_t j = 0; j < d; ++j) dx(0, j) += dq_in(0, j);
            // Local phase.
            Tensor<T> dupd = slice_rows(dx, 1, n + 1);
            auto [dlq, dlkv] = L.local.backward(c.local, dupd, false);
            add_inplace(dlq, dlkv);
            Tensor<T> dp = rms_norm_backward(c.patches, L.local_gain, dlq);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) dx(i + 1, j) += dp(i, j);
        }
        return patch_proj_.backward_input({}, slice_rows(dx, 1, n + 1), false);
    }

  private:
    VisionConfig cfg_;
    Lin patch_proj_;
    Tensor<T> cls_, pos_, final_gain_;
    std::vector<VisionLayer<T>> layers_;
};

/// Convenience: preprocess + patchify + encode.
template <class T>
VisionOutput<T> encode_image(const VisionEncoder<T>& enc, const RawImage& raw) {
    const auto& cfg = enc.config();
    return enc.encode(patchify<T>(preprocess(raw, cfg.image_size), cfg.patch));
}

// ---------------------------------------------------------------------------
// Cosine similarity search.

template <class T>
std::vector<double> cosine_similarities(std::span<const T> query, const Tensor<T>& corpus) {
    require(query.size() == corpus.cols(), Errc::ShapeMismatch, "query width differs from corpus width");
    auto norm = [](std::span<const T> v) {
        double s = 0.0;
        for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
        return std::sqrt(s);
    };
    const double qn = norm(query);
    require(qn > 0.0, Errc::ZeroNorm, "query has zero norm");
    std::vector<double> sims(corpus.rows());
    for (std::size_t i = 0; i < corpus.rows(); ++i) {
        auto row = corpus.row(i);
        const double rn = norm(row);
        require(rn > 0.0, Errc::ZeroNorm, "corpus row " + std::to_string(i) + " has zero norm");
        double dot = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) dot += static_cast<double>(query[j]) * static_cast<double>(row[j]);
        sims[i] = dot / (qn * rn);
    }
    return sims;
}

/// Indices of `candidates` ordered by similarity (descending unless
/// `ascending`), ties broken by lower index; truncated to k.
inline std::vector<std::size_t> rank_by_similarity(const std::vector<double>& sims, std::vector<std::size_t> candidates,
                                                   std::size_t k, bool ascending = false) {
    require(k <= candidates.size(), Errc::KTooLarge,
            "k=" + std::to_string(k) + " exceeds " + std::to_string(candidates.size()) + " candidates");
    auto better = [&](std::size_t a, std::size_t b) {
        if (sims[a] != sims[b]) return ascending ? sims[a] < sims[b] : sims[a] > sims[b];
        return a < b;
    };
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(), better);
    candidates.resize(k);
    return candidates;
}

template <class T>
std::vector<std::size_t> cosine_topk(std::span<const T> query, const Tensor<T>& corpus, std::size_t k) {
    require(k <= corpus.rows(), Errc::KTooLarge,
            "k=" + std::to_string(k) + " exceeds corpus size " + std::to_string(corpus.rows()));
    const auto sims = cosine_similarities(query, corpus);
    std::vector<std::size_t> idx(corpus.rows());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return rank_by_similarity(sims, std::move(idx), k);
}

}  // namespace maemi
