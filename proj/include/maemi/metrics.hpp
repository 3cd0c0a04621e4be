// SPDX-License-Identifier: Apache-2.0
//
// Sentence-level BLEU-n, ROUGE-N / ROUGE-L (F1) and exact-match METEOR, plus
// corpus aggregation (mean and population standard deviation of per-pair
// scores). All metrics tokenize with normalize_tokens, the same routine the
// vocabulary uses.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "maemi/error.hpp"
#include "maemi/tokenizer.hpp"

namespace maemi {

using Tokens = std::vector<std::string>;

inline constexpr double kBleuEpsilon = 1e-9;

namespace detail {

inline std::map<std::vector<std::string>, int> ngram_counts(const Tokens& t, std::size_t n) {
    std::map<std::vector<std::string>, int> counts;
    if (t.size() < n) return counts;
    for (std::size_t i = 0; i + n <= t.size(); ++i) ++counts[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i),
                                                                 t.begin() + static_cast<std::ptrdiff_t>(i + n))];
    return counts;
}

inline int clipped_overlap(const std::map<std::vector<std::string>, int>& cand,
                           const std::map<std::vector<std::string>, int>& ref) {
    int m = 0;
    for (const auto& [g, c] : cand) {
        auto it = ref.find(g);
        if (it != ref.end()) m += std::min(c, it->second);
    }
    return m;
}

}  // namespace detail

/// Geometric mean of clipped 1..n-gram precisions times the brevity penalty
/// min(1, exp(1 - r/c)). A zero precision is replaced by 1e-9.
inline double bleu_n(const Tokens& cand, const Tokens& ref, std::size_t n) {
    require(n >= 1, Errc::InvalidArgument, "BLEU order must be >= 1");
    require(!cand.empty(), Errc::EmptyCandidate, "BLEU of an empty candidate");
    double log_sum = 0.0;
    for (std::size_t k = 1; k <= n; ++k) {
        const auto cc = detail::ngram_counts(cand, k);
        int total = 0;
        for (const auto& [g, c] : cc) total += c;
        const int m = detail::clipped_overlap(cc, detail::ngram_counts(ref, k));
        const double p = (total == 0 || m == 0) ? kBleuEpsilon : static_cast<double>(m) / total;
        log_sum += std::log(p);
    }
    const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
    const double bp = std::min(1.0, std::exp(1.0 - r / c));
    return bp * std::exp(log_sum / static_cast<double>(n));
}

inline double bleu_n(std::string_view cand, std::string_view ref, std::size_t n) {
    return bleu_n(normalize_tokens(cand), normalize_tokens(ref), n);
}

namespace detail {

inline double f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace detail

/// F1 of clipped n-gram overlap; 0 when either side has no n-grams.
inline double rouge_n(const Tokens& cand, const Tokens& ref, std::size_t n) {
    require(n >= 1, Errc::InvalidArgument, "ROUGE order must be >= 1");
    const auto cc = detail::ngram_counts(cand, n), rc = detail::ngram_counts(ref, n);
    int ct = 0, rt = 0;
    for (const auto& [g, c] : cc) ct += c;
    for (const auto& [g, c] : rc) rt += c;
    if (ct == 0 || rt == 0) return 0.0;
    const double m = detail::clipped_overlap(cc, rc);
    return detail::f1(m / ct, m / rt);
}

inline double rouge_n(std::string_view cand, std::string_view ref, std::size_t n) {
    return rouge_n(normalize_tokens(cand), normalize_tokens(ref), n);
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 0; i < a.size(); ++i) {
        for (std::size_t j = 0; j < b.size(); ++j)
            cur[j + 1] = a[i] == b[j] ? prev[j] + 1 : std::max(prev[j + 1], cur[j]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

/// LCS-based F1: P = LCS/|cand|, R = LCS/|ref|.
inline double rouge_l(const Tokens& cand, const Tokens& ref) {
    if (cand.empty() || ref.empty()) return 0.0;
    const double l = static_cast<double>(lcs_length(cand, ref));
    return detail::f1(l / static_cast<double>(cand.size()), l / static_cast<double>(ref.size()));
}

inline double rouge_l(std::string_view cand, std::string_view ref) {
    return rouge_l(normalize_tokens(cand), normalize_tokens(ref));
}

// ---------------------------------------------------------------------------
// METEOR (exact-match module only)

struct MeteorAlignment {
    int matches = 0;
    int chunks = 0;
    std::vector<int> ref_index;  // per candidate token, -1 when unmatched
};

namespace detail {

inline int count_chunks(const std::vector<int>& ref_index) {
    int chunks = 0;
    int prev_i = -2, prev_j = -2;
    for (int i = 0; i < static_cast<int>(ref_index.size()); ++i) {
        const int j = ref_index[static_cast<std::size_t>(i)];
        if (j < 0) continue;
        if (!(i == prev_i + 1 && j == prev_j + 1)) ++chunks;
        prev_i = i;
        prev_j = j;
    }
    return chunks;
}

/// Left to right: each candidate token takes the reference position right
/// after the previous match when possible, else the earliest free one.
inline std::vector<int> greedy_alignment(const Tokens& cand, const Tokens& ref, std::map<std::string, int> budget) {
    std::vector<int> idx(cand.size(), -1);
    std::vector<bool> used(ref.size(), false);
    int prev_j = -2;
    bool prev_matched = false;
    for (std::size_t i = 0; i < cand.size(); ++i) {
        auto& left = budget[cand[i]];
        if (left == 0) {
            prev_matched = false;
            continue;
        }
        int pick = -1;
        if (prev_matched && prev_j + 1 < static_cast<int>(ref.size()) && !used[static_cast<std::size_t>(prev_j + 1)] &&
            ref[static_cast<std::size_t>(prev_j + 1)] == cand[i])
            pick = prev_j + 1;
        for (std::size_t j = 0; pick < 0 && j < ref.size(); ++j)
            if (!used[j] && ref[j] == cand[i]) pick = static_cast<int>(j);
        if (pick < 0) {
            prev_matched = false;
            continue;
        }
        used[static_cast<std::size_t>(pick)] = true;
        idx[i] = pick;
        --left;
        prev_j = pick;
        prev_matched = true;
    }
    return idx;
}

class ChunkSearch {
  public:
    ChunkSearch(const Tokens& cand, const Tokens& ref, std::map<std::string, int> matches, std::size_t node_limit)
        : cand_(cand), ref_(ref), node_limit_(node_limit) {
        for (const auto& t : cand) ++cand_left_[t];
        skips_ = cand_left_;
        for (auto& [t, n] : skips_) n -= matches[t];
        used_.assign(ref.size(), false);
        cur_.assign(cand.size(), -1);
    }

    void run(std::vector<int>& best, int& best_chunks) {
        best_ = &best;
        best_chunks_ = &best_chunks;
        recurse(0, 0, -2, -2);
    }
    bool exhausted() const noexcept { return nodes_ > node_limit_; }

  private:
    void recurse(std::size_t i, int chunks, int prev_i, int prev_j) {
        if (++nodes_ > node_limit_ || chunks >= *best_chunks_) return;
        if (i == cand_.size()) {
            *best_chunks_ = chunks;
            *best_ = cur_;
            return;
        }
        const std::string& w = cand_[i];
        const int ii = static_cast<int>(i);
        // Continuing the current chunk first finds good bounds early.
        if (prev_i == ii - 1 && prev_j + 1 < static_cast<int>(ref_.size())) {
            const auto j = static_cast<std::size_t>(prev_j + 1);
            if (!used_[j] && ref_[j] == w && take_match(i, j)) {
                recurse(i + 1, chunks, ii, prev_j + 1);
                undo_match(i, j);
            }
        }
        for (std::size_t j = 0; j < ref_.size(); ++j) {
            if (static_cast<int>(j) == prev_j + 1 && prev_i == ii - 1) continue;
            if (used_[j] || ref_[j] != w) continue;
            if (take_match(i, j)) {
                recurse(i + 1, chunks + 1, ii, static_cast<int>(j));
                undo_match(i, j);
            }
        }
        if (skips_[w] > 0) {
            --skips_[w];
            recurse(i + 1, chunks, prev_i, prev_j);
            ++skips_[w];
        }
    }

    bool take_match(std::size_t i, std::size_t j) {
        used_[j] = true;
        cur_[i] = static_cast<int>(j);
        return true;
    }
    void undo_match(std::size_t i, std::size_t j) {
        used_[j] = false;
        cur_[i] = -1;
    }

    const Tokens& cand_;
    const Tokens& ref_;
    std::map<std::string, int> cand_left_, skips_;
    std::vector<bool> used_;
    std::vector<int> cur_;
    std::vector<int>* best_ = nullptr;
    int* best_chunks_ = nullptr;
    std::size_t nodes_ = 0;
    std::size_t node_limit_;
};

}  // namespace detail

/// Maximum-match exact alignment with the fewest chunks. The exhaustive
/// search is capped at `node_limit` nodes, after which the best alignment
/// found so far (at worst the greedy one) is returned.
inline MeteorAlignment meteor_align(const Tokens& cand, const Tokens& ref, std::size_t node_limit = 200000) {
    std::map<std::string, int> cc, rc, matches;
    for (const auto& t : cand) ++cc[t];
    for (const auto& t : ref) ++rc[t];
    MeteorAlignment a;
    for (const auto& [t, n] : cc) {
        auto it = rc.find(t);
        const int m = it == rc.end() ? 0 : std::min(n, it->second);
        matches[t] = m;
        a.matches += m;
    }
    if (a.matches == 0) {
        a.ref_index.assign(cand.size(), -1);
        return a;
    }
    a.ref_index = detail::greedy_alignment(cand, ref, matches);
    a.chunks = detail::count_chunks(a.ref_index);
    if (a.chunks > 1) {
        detail::ChunkSearch search(cand, ref, matches, node_limit);
        search.run(a.ref_index, a.chunks);
    }
    return a;
}

/// Fmean = 10PR/(R+9P), penalty = 0.5 (chunks/matches)^3.
inline double meteor(const Tokens& cand, const Tokens& ref) {
    if (cand.empty() || ref.empty()) return 0.0;
    const MeteorAlignment a = meteor_align(cand, ref);
    if (a.matches == 0) return 0.0;
    const double m = a.matches;
    const double p = m / static_cast<double>(cand.size()), r = m / static_cast<double>(ref.size());
    const double fmean = 10.0 * p * r / (r + 9.0 * p);
    const double penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / m, 3.0);
    return fmean * (1.0 - penalty);
}

inline double meteor(std::string_view cand, std::string_view ref) {
    return meteor(normalize_tokens(cand), normalize_tokens(ref));
}

// ---------------------------------------------------------------------------
// Corpus evaluation

inline constexpr std::array<const char*, 6> kMetricNames = {"bleu2", "bleu4", "rouge1", "rouge2", "rougeL", "meteor"};

struct PairScores {
    std::string id;
    std::array<double, 6> values{};  // ordered as kMetricNames
    bool empty_candidate = false;
};

inline PairScores score_pair(const std::string& id, std::string_view candidate, std::string_view reference) {
    const Tokens c = normalize_tokens(candidate), r = normalize_tokens(reference);
    PairScores s;
    s.id = id;
    if (c.empty()) {
        s.empty_candidate = true;  // every metric is 0 for an empty output
        return s;
    }
    s.values = {bleu_n(c, r, 2), bleu_n(c, r, 4), rouge_n(c, r, 1), rouge_n(c, r, 2), rouge_l(c, r), meteor(c, r)};
    return s;
}

struct MetricSummary {
    double mean = 0.0;
    double std = 0.0;  // population
};

struct MetricReport {
    std::vector<PairScores> pairs;
    std::array<MetricSummary, 6> corpus{};

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["count"] = pairs.size();
        std::size_t empties = 0;
        nlohmann::json per = nlohmann::json::array();
        for (const auto& p : pairs) {
            nlohmann::json row{{"id", p.id}};
            for (std::size_t k = 0; k < kMetricNames.size(); ++k) row[kMetricNames[k]] = p.values[k];
            if (p.empty_candidate) row["empty_candidate"] = true;
            empties += p.empty_candidate;
            per.push_back(std::move(row));
        }
        j["empty_candidates"] = empties;
        for (std::size_t k = 0; k < kMetricNames.size(); ++k)
            j["corpus"][kMetricNames[k]] = {{"mean", corpus[k].mean}, {"std", corpus[k].std}};
        j["pairs"] = std::move(per);
        return j;
    }

    std::string to_table() const {
        std::ostringstream os;
        os << std::left << std::setw(8) << "metric" << std::right << std::setw(10) << "mean" << std::setw(10) << "std"
           << '\n';
        os << std::fixed << std::setprecision(4);
        for (std::size_t k = 0; k < kMetricNames.size(); ++k)
            os << std::left << std::setw(8) << kMetricNames[k] << std::right << std::setw(10) << corpus[k].mean
               << std::setw(10) << corpus[k].std << '\n';
        os << "pairs: " << pairs.size() << '\n';
        return os.str();
    }
};

struct EvalPair {
    std::string id;
    std::string reference;
    std::string candidate;
};

inline MetricReport evaluate_pairs(const std::vector<EvalPair>& pairs) {
    require(!pairs.empty(), Errc::EmptyCorpus, "no pairs to evaluate");
    MetricReport rep;
    for (const auto& p : pairs) rep.pairs.push_back(score_pair(p.id, p.candidate, p.reference));
    const double n = static_cast<double>(rep.pairs.size());
    for (std::size_t k = 0; k < kMetricNames.size(); ++k) {
        double sum = 0.0;
        for (const auto& p : rep.pairs) sum += p.values[k];
        const double mean = sum / n;
        double sq = 0.0;
        for (const auto& p : rep.pairs) sq += (p.values[k] - mean) * (p.values[k] - mean);
        rep.corpus[k] = {mean, std::sqrt(sq / n)};
    }
    return rep;
}

/// Parses {"id", "reference", "candidate"} lines; blank lines are skipped.
inline std::vector<EvalPair> parse_pairs_jsonl(std::string_view text) {
    std::vector<EvalPair> out;
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = "line " + std::to_string(lineno) + ": ";
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception&) {
            fail(Errc::MalformedRecord, where + "not valid JSON");
        }
        if (!j.is_object()) fail(Errc::MalformedRecord, where + "expected an object");
        EvalPair p;
        for (auto [key, dst] : {std::pair{"id", &p.id}, std::pair{"reference", &p.reference},
                                std::pair{"candidate", &p.candidate}}) {
            auto it = j.find(key);
            if (it == j.end()) fail(Errc::MalformedRecord, where + "missing field '" + key + "'");
            if (it->is_string()) *dst = it->get<std::string>();
            else if (std::string_view(key) == "id" && it->is_number_integer()) *dst = std::to_string(it->get<long long>());
            else fail(Errc::MalformedRecord, where + "field '" + key + "' must be a string");
        }
        out.push_back(std::move(p));
    }
    return out;
}

inline MetricReport evaluate_corpus(const std::filesystem::path& pairs_jsonl) {
    std::ifstream in(pairs_jsonl, std::ios::binary);
    if (!in) fail(Errc::IoError, "cannot open " + pairs_jsonl.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return evaluate_pairs(parse_pairs_jsonl(ss.str()));
}

}  // namespace maemi
