// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "maemi/checkpoint.hpp"
#include "maemi/synthetic.hpp"
#include "maemi/trainer.hpp"

using namespace maemi;

namespace {

const char* kQuestion = "describe the image .";

VisionConfig small_vision() {
    VisionConfig v;
    v.image_size = 32;
    v.patch = 8;
    v.dim = 16;
    v.layers = 1;
    v.heads = 2;
    v.ffn_hidden = 16;
    return v;
}

FusionConfig small_fusion() {
    FusionConfig f;
    f.d_model = 32;
    f.heads = 2;
    f.head_dim = 16;
    f.blocks = 2;
    f.ffn_hidden = 32;
    f.max_seq = 48;
    return f;
}

struct Toy {
    CaptionModel<float> model;
    TrainingSet<float> set;
};

/// The first `n` synthetic captions over a small encoder.
Toy toy(std::size_t n, std::uint64_t seed = 1) {
    const auto items = synthetic_corpus(32);
    std::vector<std::string> corpus{kQuestion};
    for (std::size_t i = 0; i < n; ++i) corpus.push_back(items[i * 4 % 16 + i / 4].caption);
    Toy t{CaptionModel<float>::init(small_vision(), small_fusion(), AdapterConfig{}, Vocabulary::build(corpus), seed), {}};
    for (std::size_t i = 0; i < n; ++i) {
        const auto& it = items[i * 4 % 16 + i / 4];
        t.set.visions.push_back(t.model.vision_states(it.image));
        t.set.examples.push_back(make_example(t.model.vocab, i, kQuestion, it.caption));
    }
    return t;
}

TrainConfig quick_config(int epochs) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch = 2;
    c.lr = 3e-3;
    c.patience = 1000;
    c.plateau_window = 1000;
    c.seed = 5;
    return c;
}

std::vector<nlohmann::json> parse_log(const std::string& text) {
    std::vector<nlohmann::json> out;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) out.push_back(nlohmann::json::parse(line));
    return out;
}

}  // namespace

TEST(PlateauScheduler, HalvesAfterFiveStagnantEpochs) {
    PlateauScheduler s(1e-3, 5, 1e-4);
    std::vector<int> halved;
    for (int epoch = 1; epoch <= 18; ++epoch)
        if (s.observe(2.0)) halved.push_back(epoch);
    EXPECT_EQ(halved, (std::vector<int>{6, 12, 18}));
    EXPECT_DOUBLE_EQ(s.lr(), 1e-3 / 8);
}

TEST(PlateauScheduler, FirstHalvingGivesFiveEMinusFour) {
    PlateauScheduler s(1e-3, 5, 1e-4);
    for (int epoch = 1; epoch <= 5; ++epoch) EXPECT_FALSE(s.observe(1.0));
    EXPECT_TRUE(s.observe(1.0));
    EXPECT_DOUBLE_EQ(s.lr(), 5e-4);
}

TEST(PlateauScheduler, ImprovementResetsWindow) {
    PlateauScheduler s(1.0, 3, 1e-4);
    const double vals[] = {5, 5, 5, 4, 4, 4, 4};
    std::vector<int> halved;
    for (int i = 0; i < 7; ++i)
        if (s.observe(vals[i])) halved.push_back(i + 1);
    EXPECT_EQ(halved, (std::vector<int>{7}));
    // A relative gain below the threshold counts as stagnation.
    PlateauScheduler t(1.0, 2, 1e-2);
    t.observe(1.0);
    EXPECT_FALSE(t.observe(0.995));
    EXPECT_TRUE(t.observe(0.994));
}

TEST(Train, ScriptedPlateauLogsHalvings) {
    auto t = toy(2);
    TrainConfig cfg = quick_config(13);
    cfg.plateau_window = 5;
    cfg.patience = 50;
    std::ostringstream log;
    TrainHooks<float> hooks;
    hooks.log = &log;
    hooks.validation = [](int, const FusionModel<float>&) { return 3.0; };
    const auto res = train(t.model.fusion, t.set, t.set, cfg, hooks);
    EXPECT_EQ(res.halving_epochs, (std::vector<int>{6, 12}));
    const auto recs = parse_log(log.str());
    ASSERT_EQ(recs.size(), 13u);
    for (const auto& r : recs) {
        for (const char* k : {"epoch", "train_loss", "val_loss", "lr", "rank_histogram"}) EXPECT_TRUE(r.contains(k)) << k;
        const int e = r["epoch"];
        EXPECT_EQ(r["lr_halved"].get<bool>(), e == 6 || e == 12);
        const double lr = r["lr"];
        EXPECT_DOUBLE_EQ(lr, e < 6 ? 3e-3 : e < 12 ? 1.5e-3 : 7.5e-4);
    }
}

TEST(Train, EarlyStopRestoresBestModel) {
    auto t = toy(2);
    TrainConfig cfg = quick_config(40);
    cfg.patience = 10;
    cfg.plateau_window = 5;
    std::optional<FusionModel<float>> at_epoch_2;
    TrainHooks<float> hooks;
    hooks.validation = [&](int epoch, const FusionModel<float>& m) {
        if (epoch == 2) at_epoch_2 = m;
        return epoch == 2 ? 1.0 : 2.0 + epoch;
    };
    const auto res = train(t.model.fusion, t.set, t.set, cfg, hooks);
    EXPECT_TRUE(res.early_stopped);
    EXPECT_EQ(res.best_epoch, 2);
    EXPECT_EQ(res.history.size(), 12u);
    ASSERT_TRUE(at_epoch_2);
    EXPECT_EQ(t.model.fusion.blocks()[1].ffn.up().B(), at_epoch_2->blocks()[1].ffn.up().B());
}

TEST(Train, DeterministicCheckpointBytes) {
    auto run = [] {
        auto t = toy(3);
        (void)train(t.model.fusion, t.set, t.set, quick_config(3));
        return serialize_checkpoint(t.model);
    };
    EXPECT_EQ(run(), run());
}

TEST(Train, FrozenTensorsUntouched) {
    auto t = toy(3);
    std::vector<Tensor<float>> frozen;
    t.model.fusion.for_each_adapter([&](const std::string&, AdapterLinear<float>& a) {
        frozen.push_back(a.A());
        frozen.push_back(a.base());
    });
    const auto embed = t.model.fusion.embed();
    (void)train(t.model.fusion, t.set, t.set, quick_config(4));
    std::size_t i = 0;
    t.model.fusion.for_each_adapter([&](const std::string& name, AdapterLinear<float>& a) {
        EXPECT_EQ(a.A(), frozen[i++]) << name;
        EXPECT_EQ(a.base(), frozen[i++]) << name;
    });
    EXPECT_EQ(t.model.fusion.embed(), embed);
}

TEST(Train, LossImprovesAtEveryRank) {
    auto t = toy(4);
    double before[4];
    const int ranks[4] = {4, 8, 12, 16};
    for (int k = 0; k < 4; ++k) before[k] = evaluate_loss(t.model.fusion, t.set, ranks[k]);
    TrainConfig cfg = quick_config(60);
    const auto res = train(t.model.fusion, t.set, t.set, cfg);
    EXPECT_LT(res.history.back().train_loss, res.history.front().train_loss);
    for (int k = 0; k < 4; ++k) EXPECT_LT(evaluate_loss(t.model.fusion, t.set, ranks[k]), before[k]) << ranks[k];
    for (int b = 4; b <= 16; ++b) EXPECT_TRUE(std::isfinite(evaluate_loss(t.model.fusion, t.set, b)));
}

TEST(Train, EvaluateLossRejectsRankOutsideRange) {
    auto t = toy(1);
    for (int b : {3, 17}) {
        try {
            (void)evaluate_loss(t.model.fusion, t.set, b);
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), Errc::RankOutOfRange);
        }
    }
}

TEST(Train, Errors) {
    auto t = toy(1);
    TrainingSet<float> empty;
    try {
        (void)train(t.model.fusion, empty, t.set, quick_config(1));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::EmptySplit);
    }
    TrainHooks<float> nan_hooks;
    nan_hooks.validation = [](int, const FusionModel<float>&) { return std::nan(""); };
    try {
        (void)train(t.model.fusion, t.set, t.set, quick_config(2), nan_hooks);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::DivergedLoss);
    }
    TrainConfig bad = quick_config(1);
    bad.patience = 2;
    bad.plateau_window = 5;
    EXPECT_THROW((void)train(t.model.fusion, t.set, t.set, bad), Error);
}

TEST(Train, GradAccumAndPerLayerRanks) {
    auto t = toy(4);
    TrainConfig cfg = quick_config(3);
    cfg.batch = 1;
    cfg.grad_accum = 2;
    cfg.per_layer_ranks = true;
    cfg.rank_norm = true;
    std::ostringstream log;
    TrainHooks<float> hooks;
    hooks.log = &log;
    (void)train(t.model.fusion, t.set, t.set, cfg, hooks);
    int steps = 0;
    for (const auto& r : parse_log(log.str()))
        for (const auto& [rank, n] : r["rank_histogram"].items()) steps += n.get<int>();
    EXPECT_EQ(steps, 3 * 2);
    t.model.fusion.for_each_adapter([](const std::string&, AdapterLinear<float>& a) { EXPECT_EQ(a.layer_rank(), 0); });
}

TEST(Checkpoint, RoundTripBytesAndGeneration) {
    auto t = toy(2);
    (void)train(t.model.fusion, t.set, t.set, quick_config(5));
    t.model.meta["note"] = "kept";
    const auto bytes = serialize_checkpoint(t.model);
    auto loaded = deserialize_checkpoint<float>(bytes);
    EXPECT_EQ(serialize_checkpoint(loaded), bytes);
    EXPECT_EQ(loaded.meta["note"], "kept");
    const auto prompt = assemble_prompt(t.model.vocab, "", kQuestion);
    const VisualInput<float> vis{t.set.visions[0], prompt.image_slot, {}};
    const auto a = generate_ids(t.model.fusion, prompt.ids, &vis, 12, DecodeStrategy::greedy(), 16);
    const VisualInput<float> vis2{loaded.vision_states(synthetic_corpus(32)[0].image), prompt.image_slot, {}};
    EXPECT_EQ(vis2.states, vis.states);
    EXPECT_EQ(generate_ids(loaded.fusion, prompt.ids, &vis2, 12, DecodeStrategy::greedy(), 16), a);
}

TEST(Checkpoint, QuantizedBaseRoundTrip) {
    auto t = toy(1);
    const std::size_t full = base_payload_bytes(t.model);
    t.model.fusion.quantize_base();
    EXPECT_LE(base_payload_bytes(t.model), full * 3 / 10);
    const auto bytes = serialize_checkpoint(t.model);
    auto loaded = deserialize_checkpoint<float>(bytes);
    EXPECT_EQ(serialize_checkpoint(loaded), bytes);
    EXPECT_EQ(loaded.fusion.blocks()[0].self.wq().base(), t.model.fusion.blocks()[0].self.wq().base());
}

TEST(Checkpoint, CorruptFilesFailCleanly) {
    auto t = toy(1);
    const auto bytes = serialize_checkpoint(t.model);
    auto code_of = [](const std::vector<std::uint8_t>& b) {
        try {
            (void)deserialize_checkpoint<float>(b);
        } catch (const Error& e) {
            return e.code();
        }
        return Errc::InvalidArgument;
    };
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_EQ(code_of(bad), Errc::BadMagic);
    EXPECT_EQ(code_of({}), Errc::BadMagic);
    for (std::size_t cut : {std::size_t{10}, bytes.size() / 2, bytes.size() - 1})
        EXPECT_EQ(code_of(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut))),
                  Errc::IoError)
            << cut;

    // Same tensors, metadata claiming a different FFN width.
    std::uint64_t meta_len;
    std::memcpy(&meta_len, bytes.data() + kMagicLen, 8);
    auto meta = nlohmann::json::parse(std::string(bytes.begin() + kMagicLen + 8, bytes.begin() + kMagicLen + 8 + meta_len));
    meta["fusion"]["ffn_hidden"] = 24;
    const std::string text = meta.dump();
    std::vector<std::uint8_t> forged(bytes.begin(), bytes.begin() + kMagicLen);
    const std::uint64_t len = text.size();
    forged.insert(forged.end(), reinterpret_cast<const std::uint8_t*>(&len), reinterpret_cast<const std::uint8_t*>(&len) + 8);
    forged.insert(forged.end(), text.begin(), text.end());
    forged.insert(forged.end(), bytes.begin() + kMagicLen + 8 + meta_len, bytes.end());
    EXPECT_EQ(code_of(forged), Errc::ShapeMismatchOnLoad);
}

TEST(Checkpoint, MissingFileIsIoError) {
    try {
        (void)load_checkpoint<float>("/nonexistent/dir/model.ckpt");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), Errc::IoError);
    }
}
