// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>

#include "maemi/config.hpp"

using namespace maemi;

namespace {

Errc code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return Errc::InvalidArgument;
}

}  // namespace

TEST(Config, ParsesSectionsAndComments) {
    AppConfig c;
    parse_config_text(c, "# comment\n[train]\nepochs = 7\nlr=0.002\nrank_norm = true\n\n; other\n[rank]\nr_min = 6\n"
                         "[teacher]\nmode = live\nsplits = 0.6, 0.2, 0.2\n[fusion]\nadapter_mode = lora\n");
    EXPECT_EQ(c.train.epochs, 7);
    EXPECT_DOUBLE_EQ(c.train.lr, 0.002);
    EXPECT_TRUE(c.train.rank_norm);
    EXPECT_EQ(c.train.r_min, 6);
    EXPECT_EQ(c.teacher.mode, TeacherConfig::Mode::live);
    EXPECT_EQ(c.datagen.fractions, (std::vector<double>{0.6, 0.2, 0.2}));
    EXPECT_EQ(c.adapter.mode, AdapterMode::lora);
}

TEST(Config, UnknownKeysAndSectionsAreErrors) {
    AppConfig c;
    EXPECT_EQ(code_of([&] { parse_config_text(c, "[train]\nepoch = 3\n"); }), Errc::BadConfig);
    EXPECT_EQ(code_of([&] { parse_config_text(c, "[model]\nx = 1\n"); }), Errc::BadConfig);
    EXPECT_EQ(code_of([&] { parse_config_text(c, "epochs = 1\n"); }), Errc::BadConfig);
    EXPECT_EQ(code_of([&] { parse_config_text(c, "[train\n"); }), Errc::BadConfig);
    EXPECT_EQ(code_of([&] { parse_config_text(c, "[train]\nepochs\n"); }), Errc::BadConfig);
    EXPECT_EQ(code_of([&] { parse_config_text(c, "[train]\nepochs = ten\n"); }), Errc::BadConfig);
    EXPECT_EQ(code_of([&] { parse_config_text(c, "[vision]\ndim = -4\n"); }), Errc::BadConfig);
    EXPECT_EQ(code_of([&] { parse_config_text(c, "[train]\nrank_norm = maybe\n"); }), Errc::BadConfig);
    try {
        parse_config_text(c, "[train]\n\nbogus = 1\n");
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    }
}

TEST(Config, OverridesWinOverFile) {
    AppConfig c;
    parse_config_text(c, "[train]\nepochs = 7\n");
    apply_override(c, "train.epochs=9");
    apply_override(c, " fusion.embed_std = 0.5 ");
    EXPECT_EQ(c.train.epochs, 9);
    EXPECT_DOUBLE_EQ(c.fusion.embed_std, 0.5);
    EXPECT_EQ(code_of([&] { apply_override(c, "train.epochs"); }), Errc::BadConfig);
    EXPECT_EQ(code_of([&] { apply_override(c, "nosuch.key=1"); }), Errc::BadConfig);
}

TEST(Config, DumpRoundTrips) {
    AppConfig c;
    apply_override(c, "train.epochs=11");
    apply_override(c, "teacher.mock_dir=/tmp/m");
    apply_override(c, "fusion.alpha_mode=fixed");
    const std::string text = dump_config(c);
    AppConfig d;
    parse_config_text(d, text);
    EXPECT_EQ(dump_config(d), text);
    EXPECT_NE(text.find("[train]\n"), std::string::npos);
    EXPECT_NE(text.find("epochs = 11\n"), std::string::npos);
}

TEST(Config, ValidateDerivesAndRejects) {
    AppConfig c;
    c.train.eval_rank = 0;
    validate_config(c);
    EXPECT_EQ(c.train.eval_rank, c.train.r_max);
    EXPECT_EQ(c.adapter.r_max, c.train.r_max);
    EXPECT_EQ(c.fusion.vision_dim, c.vision.dim);

    AppConfig small;
    apply_override(small, "vision.dim=8");
    apply_override(small, "vision.heads=2");
    EXPECT_EQ(code_of([&] { validate_config(small); }), Errc::BadConfig);

    AppConfig bad;
    apply_override(bad, "rank.r_min=12");
    apply_override(bad, "rank.r_max=8");
    EXPECT_THROW(validate_config(bad), Error);
}

TEST(Config, ShippedConfigLoads) {
    auto c = load_config(std::filesystem::path(MAEMI_SOURCE_DIR) / "configs" / "tiny.conf");
    validate_config(c);
    EXPECT_EQ(c.vision.image_size, 32u);
    EXPECT_EQ(c.fusion.blocks, 2u);
    EXPECT_EQ(code_of([] { (void)load_config("/nonexistent/x.conf"); }), Errc::IoError);
}
