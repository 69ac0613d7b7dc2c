#pragma once

// Fixed, position-only attention energy matrices.
//
// Every pattern is an n x n row-stochastic matrix: row i is the distribution
// query position i places over key positions. Positions are 0-based and the
// last token of a sentence of length n sits at n - 1. Whenever a pattern has no
// support for a row (e.g. the previous token of position 0), that row falls
// back to weight 1 on the query position itself.

#include <algorithm>
#include <array>
#include <cstddef>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fixattn/error.hpp"

namespace fixattn {

enum class PatternKind {
  CurrentToken,
  PrevToken,
  NextToken,
  LeftContext,
  RightContext,
  EndOfSentence,
  StartOfSentence,
  LastToken,
  Learned,
};

inline constexpr std::array<PatternKind, 8> kFixedKinds = {
    PatternKind::CurrentToken,  PatternKind::PrevToken,
    PatternKind::NextToken,     PatternKind::LeftContext,
    PatternKind::RightContext,  PatternKind::EndOfSentence,
    PatternKind::StartOfSentence, PatternKind::LastToken,
};

inline std::string_view to_string(PatternKind kind) {
  switch (kind) {
    case PatternKind::CurrentToken: return "CurrentToken";
    case PatternKind::PrevToken: return "PrevToken";
    case PatternKind::NextToken: return "NextToken";
    case PatternKind::LeftContext: return "LeftContext";
    case PatternKind::RightContext: return "RightContext";
    case PatternKind::EndOfSentence: return "EndOfSentence";
    case PatternKind::StartOfSentence: return "StartOfSentence";
    case PatternKind::LastToken: return "LastToken";
    case PatternKind::Learned: return "Learned";
  }
  return "?";
}

inline PatternKind parse_pattern_kind(std::string_view name) {
  for (auto kind : kFixedKinds) {
    if (to_string(kind) == name) return kind;
  }
  if (name == "Learned") return PatternKind::Learned;
  throw UsageError("unknown pattern kind '" + std::string(name) +
                   "' (expected one of CurrentToken, PrevToken, NextToken, "
                   "LeftContext, RightContext, EndOfSentence, StartOfSentence, "
                   "LastToken, Learned)");
}

// Dense row-major n x n matrix of attention energies.
struct PatternMatrix {
  std::size_t n = 0;
  std::vector<double> rows;

  PatternMatrix() = default;
  explicit PatternMatrix(std::size_t size) : n(size), rows(size * size, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return rows[i * n + j]; }
  double operator()(std::size_t i, std::size_t j) const { return rows[i * n + j]; }

  bool operator==(const PatternMatrix&) const = default;
};

// Maps each subword position to the index of the word it belongs to.
struct Segmentation {
  std::vector<std::size_t> word_of;
  std::size_t m = 0;

  std::size_t size() const { return word_of.size(); }

  bool valid() const {
    if (word_of.empty()) return m == 0;
    if (word_of.front() != 0) return false;
    for (std::size_t p = 1; p < word_of.size(); ++p) {
      const auto step = word_of[p] - word_of[p - 1];
      if (word_of[p] < word_of[p - 1] || step > 1) return false;
    }
    return word_of.back() + 1 == m;
  }

  static Segmentation identity(std::size_t n) {
    Segmentation seg;
    seg.m = n;
    seg.word_of.resize(n);
    for (std::size_t p = 0; p < n; ++p) seg.word_of[p] = p;
    return seg;
  }

  // Builds the segmentation of a subword sequence where every non-final piece
  // of a word carries a trailing "@@" continuation marker.
  static Segmentation from_subwords(const std::vector<std::string>& tokens) {
    Segmentation seg;
    seg.word_of.reserve(tokens.size());
    std::size_t word = 0;
    bool continuing = false;
    for (const auto& token : tokens) {
      if (!seg.word_of.empty() && !continuing) ++word;
      seg.word_of.push_back(word);
      continuing = token.size() >= 2 && token.ends_with("@@");
    }
    seg.m = tokens.empty() ? 0 : word + 1;
    return seg;
  }
};

// Normalized cubic weights over [lo, hi]. Ascending puts weight
// (j - lo + 1)^3 on j, descending mirrors it to (hi - j + 1)^3. The normalizer
// is accumulated in the same order for both directions so that the two
// results are exact mirror images.
inline std::vector<double> cubic_weights(std::ptrdiff_t lo, std::ptrdiff_t hi,
                                         bool ascending) {
  if (lo > hi) {
    throw EmptySupport("cubic weights over empty range [" + std::to_string(lo) +
                       ", " + std::to_string(hi) + "]");
  }
  const auto len = static_cast<std::size_t>(hi - lo + 1);
  double total = 0.0;
  for (std::size_t k = 1; k <= len; ++k) {
    const auto x = static_cast<double>(k);
    total += x * x * x;
  }
  std::vector<double> weights(len);
  for (std::size_t offset = 0; offset < len; ++offset) {
    const auto x = static_cast<double>(ascending ? offset + 1 : len - offset);
    weights[offset] = x * x * x / total;
  }
  return weights;
}

namespace detail {

inline void place(PatternMatrix& m, std::size_t row, std::ptrdiff_t lo,
                  std::ptrdiff_t hi, bool ascending) {
  const auto weights = cubic_weights(lo, hi, ascending);
  for (std::size_t k = 0; k < weights.size(); ++k) {
    m(row, static_cast<std::size_t>(lo) + k) = weights[k];
  }
}

}  // namespace detail

inline PatternMatrix build_token_pattern(PatternKind kind, std::size_t n) {
  if (kind == PatternKind::Learned) {
    throw InvalidKind("learned heads have no precomputed energy matrix");
  }
  if (n == 0) throw InvalidLength("pattern length must be at least 1");

  PatternMatrix m(n);
  const auto last = static_cast<std::ptrdiff_t>(n) - 1;
  for (std::size_t row = 0; row < n; ++row) {
    const auto i = static_cast<std::ptrdiff_t>(row);
    std::optional<std::ptrdiff_t> single;
    bool placed = false;
    switch (kind) {
      case PatternKind::CurrentToken:
        single = i;
        break;
      case PatternKind::PrevToken:
        if (i >= 1) single = i - 1;
        break;
      case PatternKind::NextToken:
        if (i + 1 <= last) single = i + 1;
        break;
      case PatternKind::LeftContext:
        if (i - 2 >= 0) {
          detail::place(m, row, 0, i - 2, true);
          placed = true;
        }
        break;
      case PatternKind::RightContext:
        if (i + 2 <= last) {
          detail::place(m, row, i + 2, last, false);
          placed = true;
        }
        break;
      case PatternKind::EndOfSentence:
        detail::place(m, row, 0, last, true);
        placed = true;
        break;
      case PatternKind::StartOfSentence:
        detail::place(m, row, 0, last, false);
        placed = true;
        break;
      case PatternKind::LastToken:
        single = last;
        break;
      case PatternKind::Learned:
        break;
    }
    if (single) {
      m(row, static_cast<std::size_t>(*single)) = 1.0;
    } else if (!placed) {
      m(row, row) = 1.0;
    }
  }
  return m;
}

// Word-level pattern expanded to subwords: subword p reads the row of its word,
// and the mass a word receives is split evenly across that word's subwords.
inline PatternMatrix build_word_pattern(PatternKind kind, const Segmentation& seg) {
  if (kind == PatternKind::Learned) {
    throw InvalidKind("learned heads have no precomputed energy matrix");
  }
  if (seg.size() == 0) throw InvalidLength("pattern length must be at least 1");
  if (!seg.valid()) throw SegmentationMismatch("invalid segmentation");

  const auto words = build_token_pattern(kind, seg.m);
  std::vector<std::size_t> pieces(seg.m, 0);
  for (auto w : seg.word_of) ++pieces[w];

  const std::size_t n = seg.size();
  PatternMatrix m(n);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t q = 0; q < n; ++q) {
      const auto wq = seg.word_of[q];
      m(p, q) = words(seg.word_of[p], wq) / static_cast<double>(pieces[wq]);
    }
  }
  return m;
}

// A batch of matrices for one head, padded to the longest sentence. Padded
// columns are zero and padded rows attend to themselves.
struct PatternBank {
  std::size_t width = 0;
  std::vector<PatternMatrix> matrices;
};

inline PatternBank pattern_bank(PatternKind kind, bool word_based,
                                const std::vector<std::size_t>& lengths,
                                const std::vector<Segmentation>* segs = nullptr) {
  if (word_based && segs == nullptr) {
    throw SegmentationMismatch("word-based patterns need a segmentation per sentence");
  }
  if (segs != nullptr && segs->size() != lengths.size()) {
    throw SegmentationMismatch("got " + std::to_string(segs->size()) +
                               " segmentations for " + std::to_string(lengths.size()) +
                               " sentences");
  }
  PatternBank bank;
  if (lengths.empty()) return bank;
  bank.width = *std::max_element(lengths.begin(), lengths.end());
  bank.matrices.reserve(lengths.size());
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    const auto n = lengths[b];
    if (segs != nullptr && (*segs)[b].size() != n) {
      throw SegmentationMismatch("sentence " + std::to_string(b) + " has length " +
                                 std::to_string(n) + " but its segmentation covers " +
                                 std::to_string((*segs)[b].size()) + " positions");
    }
    const auto core = word_based ? build_word_pattern(kind, (*segs)[b])
                                 : build_token_pattern(kind, n);
    PatternMatrix padded(bank.width);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) padded(i, j) = core(i, j);
    }
    for (std::size_t i = n; i < bank.width; ++i) padded(i, i) = 1.0;
    bank.matrices.push_back(std::move(padded));
  }
  return bank;
}

// Renders a matrix row-major, one row per line, comma separated. Values use
// 17 significant digits so the text round-trips to the same doubles.
inline std::string dump_pattern(const PatternMatrix& m, std::string_view format = "csv") {
  if (format != "csv") {
    throw UsageError("unsupported pattern dump format '" + std::string(format) + "'");
  }
  std::ostringstream out;
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (std::size_t i = 0; i < m.n; ++i) {
    for (std::size_t j = 0; j < m.n; ++j) {
      if (j > 0) out << ',';
      out << m(i, j);
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace fixattn
