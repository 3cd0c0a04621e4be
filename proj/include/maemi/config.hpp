// SPDX-License-Identifier: Apache-2.0
//
// `key = value` configuration files with [section] headers. Every key maps
// onto a field of the training, vision, fusion, rank or teacher settings;
// unknown sections and keys are errors. Command-line overrides use the same
// "section.key=value" spelling.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "maemi/adapter.hpp"
#include "maemi/checkpoint.hpp"
#include "maemi/datagen.hpp"
#include "maemi/fusion.hpp"
#include "maemi/trainer.hpp"
#include "maemi/vision.hpp"

namespace maemi {

struct AppConfig {
    TrainConfig train;
    VisionConfig vision;
    FusionConfig fusion;
    AdapterConfig adapter;
    TeacherConfig teacher;
    DatagenOptions datagen;
    bool quantize_base = false;
    std::string caption_question = "describe the image .";
    std::size_t min_freq = 1;
};

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

template <class V>
V parse_value(const std::string& key, const std::string& text) {
    std::istringstream is(text);
    V v{};
    if constexpr (std::is_same_v<V, bool>) {
        if (text == "true" || text == "1" || text == "yes") return true;
        if (text == "false" || text == "0" || text == "no") return false;
        fail(Errc::BadConfig, key + ": expected a boolean, got '" + text + "'");
    } else if constexpr (std::is_same_v<V, std::string>) {
        return text;
    } else {
        is >> v;
        if (!is || !(is >> std::ws).eof()) fail(Errc::BadConfig, key + ": cannot parse '" + text + "'");
        if constexpr (std::is_unsigned_v<V>)
            if (text.find('-') != std::string::npos) fail(Errc::BadConfig, key + ": must be non-negative");
        return v;
    }
}

inline std::vector<double> parse_fractions(const std::string& key, const std::string& text) {
    std::vector<double> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(parse_value<double>(key, trim(part)));
    return out;
}

struct ConfigKey {
    std::function<void(AppConfig&, const std::string&)> set;
    std::function<std::string(const AppConfig&)> get;
};

template <class V, class Field>
ConfigKey field_key(const std::string& name, Field field) {
    return {[name, field](AppConfig& c, const std::string& v) { field(c) = parse_value<V>(name, v); },
            [field](const AppConfig& c) {
                std::ostringstream os;
                if constexpr (std::is_same_v<V, bool>) os << (field(const_cast<AppConfig&>(c)) ? "true" : "false");
                else os << field(const_cast<AppConfig&>(c));
                return os.str();
            }};
}

inline const std::map<std::string, ConfigKey>& config_keys() {
    static const std::map<std::string, ConfigKey> keys = [] {
        std::map<std::string, ConfigKey> k;
#define MAEMI_KEY(type, name, expr) k.emplace(name, field_key<type>(name, [](AppConfig& c) -> type& { return expr; }))
        MAEMI_KEY(int, "train.epochs", c.train.epochs);
        MAEMI_KEY(double, "train.lr", c.train.lr);
        MAEMI_KEY(int, "train.batch", c.train.batch);
        MAEMI_KEY(int, "train.grad_accum", c.train.grad_accum);
        MAEMI_KEY(int, "train.plateau_window", c.train.plateau_window);
        MAEMI_KEY(int, "train.patience", c.train.patience);
        MAEMI_KEY(double, "train.min_rel_improvement", c.train.min_rel_improvement);
        MAEMI_KEY(bool, "train.rank_norm", c.train.rank_norm);
        MAEMI_KEY(bool, "train.per_layer_ranks", c.train.per_layer_ranks);
        MAEMI_KEY(int, "train.eval_rank", c.train.eval_rank);
        MAEMI_KEY(std::uint64_t, "train.seed", c.train.seed);
        MAEMI_KEY(std::string, "train.caption_question", c.caption_question);
        MAEMI_KEY(std::size_t, "train.min_freq", c.min_freq);
        MAEMI_KEY(std::size_t, "vision.image_size", c.vision.image_size);
        MAEMI_KEY(std::size_t, "vision.patch", c.vision.patch);
        MAEMI_KEY(std::size_t, "vision.dim", c.vision.dim);
        MAEMI_KEY(std::size_t, "vision.layers", c.vision.layers);
        MAEMI_KEY(std::size_t, "vision.heads", c.vision.heads);
        MAEMI_KEY(std::size_t, "vision.ffn_hidden", c.vision.ffn_hidden);
        MAEMI_KEY(std::size_t, "fusion.d_model", c.fusion.d_model);
        MAEMI_KEY(std::size_t, "fusion.heads", c.fusion.heads);
        MAEMI_KEY(std::size_t, "fusion.head_dim", c.fusion.head_dim);
        MAEMI_KEY(std::size_t, "fusion.blocks", c.fusion.blocks);
        MAEMI_KEY(std::size_t, "fusion.max_seq", c.fusion.max_seq);
        MAEMI_KEY(std::size_t, "fusion.ffn_hidden", c.fusion.ffn_hidden);
        MAEMI_KEY(double, "fusion.embed_std", c.fusion.embed_std);
        MAEMI_KEY(double, "fusion.pos_std", c.fusion.pos_std);
        MAEMI_KEY(double, "fusion.alpha", c.adapter.alpha);
        MAEMI_KEY(double, "fusion.dropout", c.adapter.dropout);
        MAEMI_KEY(bool, "fusion.quantize_base", c.quantize_base);
        MAEMI_KEY(int, "rank.r_min", c.train.r_min);
        MAEMI_KEY(int, "rank.r_max", c.train.r_max);
        MAEMI_KEY(std::string, "teacher.endpoint", c.teacher.endpoint);
        MAEMI_KEY(std::string, "teacher.model", c.teacher.model);
        MAEMI_KEY(std::string, "teacher.api_key_env", c.teacher.api_key_env);
        MAEMI_KEY(double, "teacher.timeout_s", c.teacher.timeout_s);
        MAEMI_KEY(int, "teacher.max_retries", c.teacher.max_retries);
        MAEMI_KEY(double, "teacher.backoff_s", c.teacher.backoff_s);
        MAEMI_KEY(int, "teacher.parallel", c.teacher.parallel);
        MAEMI_KEY(bool, "teacher.both_styles", c.datagen.both_styles);
#undef MAEMI_KEY
        k.emplace("fusion.adapter_mode",
                  ConfigKey{[](AppConfig& c, const std::string& v) { c.adapter.mode = parse_adapter_mode(v); },
                            [](const AppConfig& c) { return to_string(c.adapter.mode); }});
        k.emplace("fusion.alpha_mode",
                  ConfigKey{[](AppConfig& c, const std::string& v) { c.adapter.alpha_mode = parse_alpha_mode(v); },
                            [](const AppConfig& c) { return to_string(c.adapter.alpha_mode); }});
        k.emplace("teacher.mode", ConfigKey{[](AppConfig& c, const std::string& v) {
                                                if (v == "live") c.teacher.mode = TeacherConfig::Mode::live;
                                                else if (v == "mock") c.teacher.mode = TeacherConfig::Mode::mock;
                                                else fail(Errc::BadConfig, "teacher.mode must be live|mock");
                                            },
                                            [](const AppConfig& c) {
                                                return std::string(c.teacher.mode == TeacherConfig::Mode::live ? "live" : "mock");
                                            }});
        k.emplace("teacher.mock_dir",
                  ConfigKey{[](AppConfig& c, const std::string& v) { c.teacher.mock_dir = v; },
                            [](const AppConfig& c) { return c.teacher.mock_dir.string(); }});
        k.emplace("teacher.splits", ConfigKey{[](AppConfig& c, const std::string& v) {
                                                  c.datagen.fractions = parse_fractions("teacher.splits", v);
                                              },
                                              [](const AppConfig& c) {
                                                  std::ostringstream os;
                                                  for (std::size_t i = 0; i < c.datagen.fractions.size(); ++i)
                                                      os << (i ? "," : "") << c.datagen.fractions[i];
                                                  return os.str();
                                              }});
        return k;
    }();
    return keys;
}

}  // namespace detail

/// Applies one "section.key" assignment.
inline void set_config_value(AppConfig& cfg, const std::string& key, const std::string& value) {
    const auto& keys = detail::config_keys();
    auto it = keys.find(key);
    if (it == keys.end()) fail(Errc::BadConfig, "unknown config key '" + key + "'");
    it->second.set(cfg, detail::trim(value));
}

/// Applies "section.key=value".
inline void apply_override(AppConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) fail(Errc::BadConfig, "override '" + assignment + "' is not section.key=value");
    set_config_value(cfg, detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

inline void parse_config_text(AppConfig& cfg, const std::string& text) {
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string where = "config line " + std::to_string(lineno) + ": ";
        std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#' || s[0] == ';') continue;
        if (s.front() == '[') {
            if (s.back() != ']') fail(Errc::BadConfig, where + "unterminated section header");
            section = detail::trim(s.substr(1, s.size() - 2));
            static const std::set<std::string> known = {"train", "vision", "fusion", "rank", "teacher"};
            if (!known.count(section)) fail(Errc::BadConfig, where + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = s.find('=');
        if (eq == std::string::npos) fail(Errc::BadConfig, where + "expected key = value");
        if (section.empty()) fail(Errc::BadConfig, where + "key outside of a section");
        const std::string key = section + "." + detail::trim(s.substr(0, eq));
        try {
            set_config_value(cfg, key, s.substr(eq + 1));
        } catch (const Error& e) {
            fail(Errc::BadConfig, where + e.what());
        }
    }
}

inline AppConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Errc::IoError, "cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    AppConfig cfg;
    parse_config_text(cfg, ss.str());
    return cfg;
}

/// Checks cross-field constraints once all sources are merged.
inline void validate_config(AppConfig& cfg) {
    cfg.adapter.r_min = cfg.train.r_min;
    cfg.adapter.r_max = cfg.train.r_max;
    if (cfg.train.eval_rank > cfg.train.r_max || cfg.train.eval_rank < cfg.train.r_min) cfg.train.eval_rank = cfg.train.r_max;
    cfg.train.validate();
    cfg.vision.validate();
    cfg.fusion.vision_dim = cfg.vision.dim;
    cfg.fusion.validate();
    require(static_cast<std::size_t>(cfg.train.r_max) <= std::min(cfg.fusion.d_model, cfg.vision.dim), Errc::BadConfig,
            "r_max exceeds the narrowest adapted layer");
}

/// The merged configuration as a config file (echoed before any work).
inline std::string dump_config(const AppConfig& cfg) {
    std::string out, section;
    for (const auto& [key, k] : detail::config_keys()) {
        const auto dot = key.find('.');
        const std::string sec = key.substr(0, dot);
        if (sec != section) {
            out += (out.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
            section = sec;
        }
        out += key.substr(dot + 1) + " = " + k.get(cfg) + "\n";
    }
    return out;
}

}  // namespace maemi
