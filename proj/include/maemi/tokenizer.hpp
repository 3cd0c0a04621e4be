// SPDX-License-Identifier: Apache-2.0
//
// Word-level vocabulary with fixed special ids, and prompt assembly:
//
//     [<bos>, description..., <image>, question..., <Encode>]
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "maemi/error.hpp"

namespace maemi {

enum SpecialToken : int { kPad = 0, kUnk = 1, kBos = 2, kEos = 3, kImage = 4, kEncode = 5 };
inline constexpr int kNumSpecials = 6;
inline constexpr std::array<std::string_view, kNumSpecials> kSpecialStrings = {"<pad>", "<unk>", "<bos>",
                                                                                "<eos>", "<image>", "<Encode>"};

/// Lowercases, splits on whitespace, and emits every ASCII punctuation
/// character as its own token. Shared by the vocabulary and the metrics.
inline std::vector<std::string> normalize_tokens(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) out.push_back(std::move(cur));
        cur.clear();
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            flush();
        } else if (c < 0x80 && std::ispunct(c)) {
            flush();
            out.emplace_back(1, static_cast<char>(c));
        } else {
            cur.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
        }
    }
    flush();
    return out;
}

inline std::string join_tokens(const std::vector<std::string>& toks) {
    std::string s;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i) s.push_back(' ');
        s += toks[i];
    }
    return s;
}

inline std::string normalize_text(std::string_view text) { return join_tokens(normalize_tokens(text)); }

class Vocabulary {
  public:
    Vocabulary() {
        for (auto s : kSpecialStrings) add(std::string(s));
    }

    /// Frequency-descending, then lexicographic id order after the specials.
    static Vocabulary build(const std::vector<std::string>& corpus, std::size_t min_freq = 1) {
        require(!corpus.empty(), Errc::EmptyCorpus, "cannot build a vocabulary from an empty corpus");
        std::map<std::string, std::size_t> freq;
        for (const auto& line : corpus)
            for (auto& t : normalize_tokens(line)) ++freq[t];
        std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
        std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        Vocabulary v;
        for (auto& [tok, f] : items)
            if (f >= min_freq && !v.contains(tok)) v.add(tok);
        return v;
    }

    std::size_t size() const noexcept { return id_to_token_.size(); }
    bool contains(const std::string& tok) const { return token_to_id_.count(tok) != 0; }
    const std::string& token(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
    const std::vector<std::string>& tokens() const noexcept { return id_to_token_; }

    int id(const std::string& tok) const {
        auto it = token_to_id_.find(tok);
        return it == token_to_id_.end() ? kUnk : it->second;
    }

    /// Raw text never yields special ids: a literal "<image>" splits into
    /// "<", "image", ">".
    std::vector<int> encode(std::string_view text) const {
        std::vector<int> ids;
        for (auto& t : normalize_tokens(text)) {
            const int i = id(t);
            ids.push_back(i >= kNumSpecials || i == kUnk ? i : kUnk);
        }
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::vector<std::string> toks;
        for (int i : ids) toks.push_back(i >= 0 && static_cast<std::size_t>(i) < size() ? token(i) : std::string("<unk>"));
        return join_tokens(toks);
    }

    /// Words only: specials are dropped, generation stops at <eos>.
    std::string decode_answer(const std::vector<int>& ids) const {
        std::vector<std::string> toks;
        for (int i : ids) {
            if (i == kEos) break;
            if (i >= kNumSpecials) toks.push_back(token(i));
            else if (i == kUnk) toks.emplace_back("<unk>");
        }
        return join_tokens(toks);
    }

    /// UTF-8 lines "token\tid", specials first.
    std::string serialize() const {
        std::ostringstream os;
        for (std::size_t i = 0; i < size(); ++i) os << id_to_token_[i] << '\t' << i << '\n';
        return os.str();
    }

    static Vocabulary parse(std::string_view text) {
        Vocabulary v;
        v.id_to_token_.clear();
        v.token_to_id_.clear();
        std::istringstream is{std::string(text)};
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            if (line.empty()) continue;
            const auto tab = line.rfind('\t');
            require(tab != std::string::npos, Errc::MalformedRecord, "vocabulary line " + std::to_string(lineno) + " has no tab");
            const std::string tok = line.substr(0, tab);
            const int id = std::stoi(line.substr(tab + 1));
            require(id == static_cast<int>(v.size()), Errc::MalformedRecord,
                    "vocabulary ids must be dense and ordered (line " + std::to_string(lineno) + ")");
            v.add(tok);
        }
        require(v.size() >= kNumSpecials, Errc::MalformedRecord, "vocabulary is missing special tokens");
        for (int i = 0; i < kNumSpecials; ++i)
            require(v.token(i) == kSpecialStrings[static_cast<std::size_t>(i)], Errc::MalformedRecord,
                    "special token " + std::to_string(i) + " out of place");
        return v;
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) fail(Errc::IoError, "cannot write " + path.string());
        out << serialize();
    }

    static Vocabulary load(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) fail(Errc::IoError, "cannot open " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return parse(ss.str());
    }

    /// FNV-1a over the serialized form; recorded in checkpoints.
    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (unsigned char c : serialize()) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        return h;
    }

    bool operator==(const Vocabulary& o) const { return id_to_token_ == o.id_to_token_; }

  private:
    void add(const std::string& tok) {
        token_to_id_.emplace(tok, static_cast<int>(id_to_token_.size()));
        id_to_token_.push_back(tok);
    }

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

struct PromptTokens {
    std::vector<int> ids;
    std::size_t image_slot = 0;
};

inline PromptTokens assemble_prompt(const Vocabulary& vocab, std::string_view description, std::string_view question) {
    require(!normalize_tokens(question).empty(), Errc::EmptyQuestion, "prompt question is empty");
    PromptTokens p;
    p.ids.push_back(kBos);
    for (int id : vocab.encode(description)) p.ids.push_back(id);
    p.image_slot = p.ids.size();
    p.ids.push_back(kImage);
    for (int id : vocab.encode(question)) p.ids.push_back(id);
    p.ids.push_back(kEncode);
    return p;
}

struct Demonstration {
    std::string description;
    std::string label;
};

struct FewShotPrompt {
    std::vector<int> ids;
    std::vector<std::size_t> demo_slots;  // one <image> per demonstration, in order
    std::size_t image_slot = 0;           // the query image
};

/// Repeats [description, <image>, label] per demonstration, then appends the
/// ordinary query prompt body.
inline FewShotPrompt assemble_few_shot_prompt(const Vocabulary& vocab, const std::vector<Demonstration>& demos,
                                              std::string_view description, std::string_view question) {
    require(!normalize_tokens(question).empty(), Errc::EmptyQuestion, "prompt question is empty");
    FewShotPrompt p;
    p.ids.push_back(kBos);
    for (const auto& d : demos) {
        for (int id : vocab.encode(d.description)) p.ids.push_back(id);
        p.demo_slots.push_back(p.ids.size());
        p.ids.push_back(kImage);
        for (int id : vocab.encode(d.label)) p.ids.push_back(id);
    }
    for (int id : vocab.encode(description)) p.ids.push_back(id);
    p.image_slot = p.ids.size();
    p.ids.push_back(kImage);
    for (int id : vocab.encode(question)) p.ids.push_back(id);
    p.ids.push_back(kEncode);
    return p;
}

}  // namespace maemi
