// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace maemi {

enum class Errc {
    ShapeMismatch,
    NonFinite,
    OddWidth,
    AllMasked,
    TargetOutOfRange,
    BadRank,
    RankOutOfRange,
    RankMismatch,
    StaleCache,
    EmptyAccumulator,
    EmptyImage,
    BadChannelCount,
    NonDivisible,
    KTooLarge,
    ZeroNorm,
    EmptyCorpus,
    EmptyQuestion,
    EmptyVisual,
    SequenceTooLong,
    TooFewLabels,
    EmptySplit,
    DivergedLoss,
    IoError,
    BadMagic,
    ShapeMismatchOnLoad,
    EmptyCandidate,
    MalformedRecord,
    Timeout,
    HttpStatus,
    MissingApiKey,
    MockMiss,
    EmptyImageDir,
    MissingLabels,
    BadConfig,
    InvalidArgument,
};

constexpr std::string_view errc_name(Errc c) {
    switch (c) {
        case Errc::ShapeMismatch: return "ShapeMismatch";
        case Errc::NonFinite: return "NonFinite";
        case Errc::OddWidth: return "OddWidth";
        case Errc::AllMasked: return "AllMasked";
        case Errc::TargetOutOfRange: return "TargetOutOfRange";
        case Errc::BadRank: return "BadRank";
        case Errc::RankOutOfRange: return "RankOutOfRange";
        case Errc::RankMismatch: return "RankMismatch";
        case Errc::StaleCache: return "StaleCache";
        case Errc::EmptyAccumulator: return "EmptyAccumulator";
        case Errc::EmptyImage: return "EmptyImage";
        case Errc::BadChannelCount: return "BadChannelCount";
        case Errc::NonDivisible: return "NonDivisible";
        case Errc::KTooLarge: return "KTooLarge";
        case Errc::ZeroNorm: return "ZeroNorm";
        case Errc::EmptyCorpus: return "EmptyCorpus";
        case Errc::EmptyQuestion: return "EmptyQuestion";
        case Errc::EmptyVisual: return "EmptyVisual";
        case Errc::SequenceTooLong: return "SequenceTooLong";
        case Errc::TooFewLabels: return "TooFewLabels";
        case Errc::EmptySplit: return "EmptySplit";
        case Errc::DivergedLoss: return "DivergedLoss";
        case Errc::IoError: return "IoError";
        case Errc::BadMagic: return "BadMagic";
        case Errc::ShapeMismatchOnLoad: return "ShapeMismatchOnLoad";
        case Errc::EmptyCandidate: return "EmptyCandidate";
        case Errc::MalformedRecord: return "MalformedRecord";
        case Errc::Timeout: return "Timeout";
        case Errc::HttpStatus: return "HttpStatus";
        case Errc::MissingApiKey: return "MissingApiKey";
        case Errc::MockMiss: return "MockMiss";
        case Errc::EmptyImageDir: return "EmptyImageDir";
        case Errc::MissingLabels: return "MissingLabels";
        case Errc::BadConfig: return "BadConfig";
        case Errc::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

/// Every failure in the library surfaces as this exception; `code()` is the
/// stable, machine-checkable part and `what()` carries the detail.
class Error : public std::runtime_error {
  public:
    Error(Errc code, const std::string& detail)
        : std::runtime_error(std::string(errc_name(code)) + ": " + detail), code_(code) {}

    Errc code() const noexcept { return code_; }

  private:
    Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& detail) { throw Error(code, detail); }

inline void require(bool cond, Errc code, const std::string& detail) {
    if (!cond) fail(code, detail);
}

}  // namespace maemi
