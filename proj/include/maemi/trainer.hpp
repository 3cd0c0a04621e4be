// SPDX-License-Identifier: Apache-2.0
//
// Supervised instruction tuning of the fusion decoder. Vision states come
// from the frozen encoder and are computed once per image. Each optimizer
// step draws one adapter rank (or one per layer), accumulates per-sample
// gradients over the batch, and applies Adam to the adapter factors and
// gates. Validation loss drives a plateau scheduler and early stopping; the
// best-validation weights are restored at the end.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "maemi/adapter.hpp"
#include "maemi/checkpoint.hpp"
#include "maemi/fusion.hpp"
#include "maemi/tokenizer.hpp"

namespace maemi {

struct TrainConfig {
    int epochs = 50;
    double lr = 1e-3;
    int batch = 32;
    int grad_accum = 1;
    int plateau_window = 5;
    int patience = 10;
    double min_rel_improvement = 1e-4;
    int r_min = 4;
    int r_max = 16;
    bool rank_norm = false;
    bool per_layer_ranks = false;
    int eval_rank = 16;
    std::uint64_t seed = 0;

    void validate() const {
        require(epochs >= 1, Errc::BadConfig, "epochs must be >= 1");
        require(batch >= 1 && grad_accum >= 1, Errc::BadConfig, "batch and grad_accum must be >= 1");
        require(plateau_window >= 1, Errc::BadConfig, "plateau window must be >= 1");
        require(patience >= plateau_window, Errc::BadConfig, "early-stop patience must be >= the scheduler window");
        require(lr > 0.0 && std::isfinite(lr), Errc::BadConfig, "learning rate must be positive");
        require(r_min >= 1 && r_min <= r_max, Errc::BadConfig, "rank range must satisfy 1 <= r_min <= r_max");
        require(eval_rank >= r_min && eval_rank <= r_max, Errc::BadConfig, "eval_rank outside the rank range");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"lr", c.lr},
            {"batch", c.batch},
            {"grad_accum", c.grad_accum},
            {"plateau_window", c.plateau_window},
            {"patience", c.patience},
            {"min_rel_improvement", c.min_rel_improvement},
            {"r_min", c.r_min},
            {"r_max", c.r_max},
            {"rank_norm", c.rank_norm},
            {"per_layer_ranks", c.per_layer_ranks},
            {"eval_rank", c.eval_rank},
            {"seed", c.seed}};
}

/// One teacher-forced sequence: prompt, answer and closing <eos>.
struct TrainExample {
    std::size_t vision = 0;  // index into TrainingSet::visions
    std::vector<int> ids;
    std::size_t slot = 0;
    std::size_t answer_start = 0;
};

template <class T>
struct TrainingSet {
    std::vector<Tensor<T>> visions;
    std::vector<TrainExample> examples;

    bool empty() const noexcept { return examples.empty(); }
    std::size_t size() const noexcept { return examples.size(); }
};

inline TrainExample make_example(const Vocabulary& vocab, std::size_t vision, const std::string& question,
                                 const std::string& answer) {
    const PromptTokens p = assemble_prompt(vocab, "", question);
    TrainExample ex;
    ex.vision = vision;
    ex.slot = p.image_slot;
    ex.ids = p.ids;
    ex.answer_start = ex.ids.size();
    for (int id : vocab.encode(answer)) ex.ids.push_back(id);
    ex.ids.push_back(kEos);
    return ex;
}

/// Masked loss of one example; fills `cache` when gradients are wanted.
template <class T>
double example_loss(const FusionModel<T>& model, const TrainingSet<T>& set, const TrainExample& ex,
                    const StepContext& ctx, FusionCache<T>* cache = nullptr, Tensor<T>* dlogits = nullptr,
                    std::pair<std::size_t, std::size_t>* hits = nullptr) {
    const VisualInput<T> vis{set.visions.at(ex.vision), ex.slot, {}};
    const Tensor<T> logits = model.forward(ex.ids, &vis, ctx, cache);
    const LmTargets t = lm_targets(ex.ids, ex.answer_start);
    auto lg = lm_loss(logits, t);
    if (dlogits) *dlogits = std::move(lg.dlogits);
    if (hits) {
        auto h = token_hits(logits, t);
        hits->first += h.first;
        hits->second += h.second;
    }
    return static_cast<double>(lg.loss);
}

/// Mean masked LM loss over the split at a fixed adapter rank (no dropout).
template <class T>
double evaluate_loss(const FusionModel<T>& model, const TrainingSet<T>& set, int rank) {
    require(!set.empty(), Errc::EmptySplit, "evaluate_loss on an empty split");
    model.blocks().front().cross.wq().check_rank(rank);
    const StepContext ctx{rank, false, nullptr};
    double sum = 0.0;
    for (const auto& ex : set.examples) sum += example_loss(model, set, ex, ctx);
    return sum / static_cast<double>(set.size());
}

/// Teacher-forced next-token accuracy over answer positions.
template <class T>
double token_accuracy(const FusionModel<T>& model, const TrainingSet<T>& set, int rank) {
    require(!set.empty(), Errc::EmptySplit, "token_accuracy on an empty split");
    const StepContext ctx{rank, false, nullptr};
    std::pair<std::size_t, std::size_t> hits{0, 0};
    for (const auto& ex : set.examples) example_loss<T>(model, set, ex, ctx, nullptr, nullptr, &hits);
    return static_cast<double>(hits.first) / static_cast<double>(hits.second);
}

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
    std::map<int, int> rank_histogram;
    bool lr_halved = false;

    nlohmann::json to_json() const {
        nlohmann::json hist = nlohmann::json::object();
        for (auto [r, n] : rank_histogram) hist[std::to_string(r)] = n;
        return {{"epoch", epoch}, {"train_loss", train_loss}, {"val_loss", val_loss},
                {"lr", lr},       {"rank_histogram", hist},   {"lr_halved", lr_halved}};
    }
};

struct TrainResult {
    std::vector<EpochRecord> history;
    int best_epoch = 0;
    double best_val = std::numeric_limits<double>::infinity();
    bool early_stopped = false;
    std::vector<int> halving_epochs;
};

/// Halves the learning rate after `window` consecutive epochs without a
/// relative improvement over the window's reference loss. The reference is
/// cleared after each halving, so the next epoch starts a fresh window.
class PlateauScheduler {
  public:
    PlateauScheduler(double lr, int window, double min_rel) : lr_(lr), window_(window), min_rel_(min_rel) {}

    /// Returns true when this epoch triggered a halving.
    bool observe(double val) {
        if (val < ref_ * (1.0 - min_rel_) || !std::isfinite(ref_)) {
            ref_ = val;
            bad_ = 0;
            return false;
        }
        if (++bad_ < window_) return false;
        lr_ *= 0.5;
        bad_ = 0;
        ref_ = std::numeric_limits<double>::infinity();
        return true;
    }

    double lr() const noexcept { return lr_; }

  private:
    double lr_;
    int window_;
    double min_rel_;
    double ref_ = std::numeric_limits<double>::infinity();
    int bad_ = 0;
};

/// Optional hooks, mainly for tests: per-epoch log sink and a replacement
/// validation function (used to script plateaus).
template <class T>
struct TrainHooks {
    std::ostream* log = nullptr;
    std::function<double(int epoch, const FusionModel<T>&)> validation;
    std::function<void(const EpochRecord&)> on_epoch;
};

template <class T>
TrainResult train(FusionModel<T>& model, const TrainingSet<T>& train_set, const TrainingSet<T>& val_set,
                  const TrainConfig& cfg, const TrainHooks<T>& hooks = {}) {
    cfg.validate();
    require(!train_set.empty(), Errc::EmptySplit, "training split is empty");
    require(!val_set.empty() || hooks.validation, Errc::EmptySplit, "validation split is empty");
    const auto& acfg = model.adapter_config();
    require(cfg.r_min >= acfg.r_min && cfg.r_max <= acfg.r_max, Errc::BadConfig,
            "training rank range exceeds the adapter range");

    Prng root(cfg.seed);
    Prng order_rng = root.fork(11);
    Prng rank_rng = root.fork(12);
    Prng dropout_rng = root.fork(13);
    const RankSampler sampler(cfg.r_min, cfg.r_max);

    model.reset_optimizers(cfg.lr);
    PlateauScheduler sched(cfg.lr, cfg.plateau_window, cfg.min_rel_improvement);
    TrainResult result;
    std::optional<FusionModel<T>> best;
    int since_best = 0;

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const std::size_t per_step = static_cast<std::size_t>(cfg.batch) * static_cast<std::size_t>(cfg.grad_accum);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochRecord rec;
        rec.epoch = epoch;
        order_rng.shuffle(order.begin(), order.end());
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += per_step) {
            const std::size_t end = std::min(order.size(), start + per_step);
            int rank = sampler.sample(rank_rng);
            if (cfg.per_layer_ranks) {
                model.set_layer_ranks([&] { return sampler.sample(rank_rng); });
            }
            ++rec.rank_histogram[rank];
            const StepContext ctx{rank, true, &dropout_rng};
            for (std::size_t k = start; k < end; ++k) {
                const auto& ex = train_set.examples[order[k]];
                FusionCache<T> cache;
                Tensor<T> dlogits;
                double loss;
                try {
                    loss = example_loss(model, train_set, ex, ctx, &cache, &dlogits);
                } catch (const Error& e) {
                    if (e.code() == Errc::NonFinite) fail(Errc::DivergedLoss, "epoch " + std::to_string(epoch) + ": " + e.what());
                    throw;
                }
                loss_sum += loss;
                model.backward(cache, dlogits, true);
            }
            model.step(cfg.rank_norm);
        }
        if (cfg.per_layer_ranks) model.set_layer_ranks(nullptr);
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        if (!std::isfinite(rec.train_loss)) fail(Errc::DivergedLoss, "training loss is not finite at epoch " + std::to_string(epoch));

        rec.val_loss = hooks.validation ? hooks.validation(epoch, model) : evaluate_loss(model, val_set, cfg.eval_rank);
        if (!std::isfinite(rec.val_loss)) fail(Errc::DivergedLoss, "validation loss is not finite at epoch " + std::to_string(epoch));

        rec.lr_halved = sched.observe(rec.val_loss);
        if (rec.lr_halved) {
            model.set_learning_rate(sched.lr());
            result.halving_epochs.push_back(epoch);
        }
        rec.lr = sched.lr();

        if (rec.val_loss < result.best_val * (1.0 - cfg.min_rel_improvement) || !best) {
            result.best_val = rec.val_loss;
            result.best_epoch = epoch;
            best = model;
            since_best = 0;
        } else {
            ++since_best;
        }
        if (hooks.log) *hooks.log << rec.to_json().dump() << '\n';
        if (hooks.on_epoch) hooks.on_epoch(rec);
        result.history.push_back(std::move(rec));
        if (since_best >= cfg.patience) {
            result.early_stopped = true;
            break;
        }
    }
    if (best) model = std::move(*best);
    return result;
}

/// Builds the checkpoint metadata block for a finished run.
inline nlohmann::json training_metadata(const TrainConfig& cfg, const TrainResult& r) {
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& e : r.history) hist.push_back(e.to_json());
    return {{"train", to_json(cfg)},
            {"epoch", r.best_epoch},
            {"best_val_loss", r.best_val},
            {"early_stopped", r.early_stopped},
            {"history", hist}};
}

}  // namespace maemi
