#pragma once

// Corpus BLEU, length-bucketed BLEU, contrastive accuracy and paired
// bootstrap resampling.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "fixattn/data.hpp"
#include "fixattn/error.hpp"
#include "fixattn/parallel.hpp"

namespace fixattn {

inline constexpr std::size_t kBleuOrder = 4;

struct BleuOptions {
  bool lowercase = true;
  // Add-one smoothing of the n >= 2 precisions.
  bool smooth = false;
};

// Sufficient statistics of one or more sentence pairs.
struct BleuStats {
  std::array<std::size_t, kBleuOrder> matches{};
  std::array<std::size_t, kBleuOrder> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o) {
    for (std::size_t n = 0; n < kBleuOrder; ++n) {
      matches[n] += o.matches[n];
      totals[n] += o.totals[n];
    }
    hyp_len += o.hyp_len;
    ref_len += o.ref_len;
    return *this;
  }
};

struct BleuReport {
  double bleu = 0.0;
  std::array<double, kBleuOrder> precisions{};
  double brevity_penalty = 0.0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

namespace detail {

inline Sentence bleu_tokens(const Sentence& s, bool lowercase) {
  if (!lowercase) return s;
  Sentence out = s;
  for (auto& t : out) {
    for (auto& c : t) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const Sentence& s, std::size_t n) {
  std::map<std::vector<std::string>, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    ++counts[std::vector<std::string>(s.begin() + static_cast<std::ptrdiff_t>(i),
                                      s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace detail

inline BleuStats sentence_stats(const Sentence& hypothesis, const Sentence& reference,
                                const BleuOptions& options = {}) {
  const auto hyp = detail::bleu_tokens(hypothesis, options.lowercase);
  const auto ref = detail::bleu_tokens(reference, options.lowercase);
  BleuStats stats;
  stats.hyp_len = hyp.size();
  stats.ref_len = ref.size();
  for (std::size_t n = 1; n <= kBleuOrder; ++n) {
    const auto hyp_counts = detail::ngram_counts(hyp, n);
    const auto ref_counts = detail::ngram_counts(ref, n);
    for (const auto& [gram, count] : hyp_counts) {
      const auto it = ref_counts.find(gram);
      if (it != ref_counts.end()) stats.matches[n - 1] += std::min(count, it->second);
    }
    stats.totals[n - 1] = hyp.size() >= n ? hyp.size() - n + 1 : 0;
  }
  return stats;
}

inline BleuReport bleu_from_stats(const BleuStats& stats, const BleuOptions& options = {}) {
  BleuReport report;
  report.hyp_len = stats.hyp_len;
  report.ref_len = stats.ref_len;
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < kBleuOrder; ++n) {
    double matches = static_cast<double>(stats.matches[n]);
    double totals = static_cast<double>(stats.totals[n]);
    if (options.smooth && n > 0) {
      matches += 1.0;
      totals += 1.0;
    }
    const double p = totals > 0.0 ? matches / totals : 0.0;
    report.precisions[n] = p;
    if (p <= 0.0) zero = true;
    else log_sum += std::log(p);
  }
  if (stats.hyp_len == 0) {
    report.brevity_penalty = 0.0;
  } else if (stats.hyp_len < stats.ref_len) {
    report.brevity_penalty =
        std::exp(1.0 - static_cast<double>(stats.ref_len) / static_cast<double>(stats.hyp_len));
  } else {
    report.brevity_penalty = 1.0;
  }
  report.bleu = zero ? 0.0 : 100.0 * report.brevity_penalty * std::exp(log_sum / kBleuOrder);
  return report;
}

inline BleuReport corpus_bleu(const std::vector<Sentence>& hypotheses, const std::vector<Sentence>& references,
                              const BleuOptions& options = {}) {
  if (hypotheses.empty()) throw InvalidInput("BLEU over an empty corpus");
  if (hypotheses.size() != references.size()) {
    throw InvalidInput("BLEU: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                       std::to_string(references.size()) + " references");
  }
  BleuStats total;
  for (std::size_t k = 0; k < hypotheses.size(); ++k) total += sentence_stats(hypotheses[k], references[k], options);
  return bleu_from_stats(total, options);
}

// ---------------------------------------------------------------------------
// Length buckets
// ---------------------------------------------------------------------------

inline const std::vector<std::size_t> kDefaultBucketEdges = {10, 20, 30, 40, 50, 60};

struct BucketReport {
  std::string label;
  std::size_t lower = 0;
  std::optional<std::size_t> upper;  // exclusive; none for the last bucket
  std::size_t sentences = 0;
  BleuReport report;
};

inline std::string bucket_label(const std::vector<std::size_t>& edges, std::size_t b) {
  if (b == 0) return "<" + std::to_string(edges.front());
  if (b == edges.size()) return ">=" + std::to_string(edges.back());
  return "[" + std::to_string(edges[b - 1]) + "," + std::to_string(edges[b]) + ")";
}

// Groups sentences by reference length; buckets with no sentence are omitted.
inline std::vector<BucketReport> bucketed_bleu(const std::vector<Sentence>& hypotheses,
                                               const std::vector<Sentence>& references,
                                               const std::vector<std::size_t>& edges = kDefaultBucketEdges,
                                               const BleuOptions& options = {}) {
  if (hypotheses.empty()) throw InvalidInput("BLEU over an empty corpus");
  if (hypotheses.size() != references.size()) {
    throw InvalidInput("BLEU: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                       std::to_string(references.size()) + " references");
  }
  for (std::size_t k = 1; k < edges.size(); ++k) {
    if (edges[k] <= edges[k - 1]) throw UsageError("bucket edges must be strictly increasing");
  }
  std::vector<BleuStats> stats(edges.size() + 1);
  std::vector<std::size_t> counts(edges.size() + 1, 0);
  for (std::size_t k = 0; k < hypotheses.size(); ++k) {
    const auto len = references[k].size();
    const auto b = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), len) - edges.begin());
    stats[b] += sentence_stats(hypotheses[k], references[k], options);
    ++counts[b];
  }
  std::vector<BucketReport> out;
  for (std::size_t b = 0; b <= edges.size(); ++b) {
    if (counts[b] == 0) continue;
    BucketReport r;
    r.label = edges.empty() ? "all" : bucket_label(edges, b);
    r.lower = b == 0 ? 0 : edges[b - 1];
    if (b < edges.size()) r.upper = edges[b];
    r.sentences = counts[b];
    r.report = bleu_from_stats(stats[b], options);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Contrastive scoring
// ---------------------------------------------------------------------------

struct ScoredPair {
  double reference = 0.0;
  double contrastive = 0.0;
  std::optional<long> attribute;
};

struct AccuracyCell {
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

struct ContrastiveReport {
  AccuracyCell overall;
  std::map<long, AccuracyCell> by_attribute;

  double accuracy() const { return overall.accuracy(); }
};

// A decision is correct only when the reference scores strictly higher; ties
// count as failures.
inline ContrastiveReport contrastive_accuracy(const std::vector<ScoredPair>& pairs, bool bucket_by_attribute = false) {
  if (pairs.empty()) throw InvalidInput("contrastive accuracy over no pairs");
  ContrastiveReport report;
  for (const auto& p : pairs) {
    if (!std::isfinite(p.reference) || !std::isfinite(p.contrastive)) {
      throw NumericalError("contrastive scores must be finite");
    }
    const bool correct = p.reference > p.contrastive;
    report.overall.total += 1;
    report.overall.correct += correct ? 1 : 0;
    if (bucket_by_attribute && p.attribute) {
      auto& cell = report.by_attribute[*p.attribute];
      cell.total += 1;
      cell.correct += correct ? 1 : 0;
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Paired bootstrap resampling
// ---------------------------------------------------------------------------

struct BootstrapReport {
  std::size_t resamples = 0;
  std::size_t wins_a = 0;
  std::size_t wins_b = 0;
  std::size_t ties = 0;
  double bleu_a = 0.0;
  double bleu_b = 0.0;

  double win_rate_a() const { return static_cast<double>(wins_a) / static_cast<double>(resamples); }
  double win_rate_b() const { return static_cast<double>(wins_b) / static_cast<double>(resamples); }
  // p-value for the hypothesis "A is not better than B".
  double p_value() const { return 1.0 - win_rate_a(); }
};

// Each resample draws its indices from a generator seeded with
// (seed, resample index), so the outcome does not depend on thread count.
inline BootstrapReport paired_bootstrap(const std::vector<Sentence>& hyps_a, const std::vector<Sentence>& hyps_b,
                                        const std::vector<Sentence>& references, std::size_t n_resamples = 1000,
                                        std::uint64_t seed = 12345, std::size_t threads = 1,
                                        const BleuOptions& options = {}) {
  if (hyps_a.empty()) throw InvalidInput("bootstrap over an empty corpus");
  if (hyps_a.size() != references.size() || hyps_b.size() != references.size()) {
    throw InvalidInput("bootstrap needs aligned corpora (" + std::to_string(hyps_a.size()) + ", " +
                       std::to_string(hyps_b.size()) + ", " + std::to_string(references.size()) + ")");
  }
  if (n_resamples == 0) throw UsageError("bootstrap needs at least one resample");
  const std::size_t n = references.size();
  std::vector<BleuStats> stats_a(n), stats_b(n);
  BleuStats total_a, total_b;
  for (std::size_t k = 0; k < n; ++k) {
    stats_a[k] = sentence_stats(hyps_a[k], references[k], options);
    stats_b[k] = sentence_stats(hyps_b[k], references[k], options);
    total_a += stats_a[k];
    total_b += stats_b[k];
  }

  std::vector<signed char> outcome(n_resamples, 0);
  auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                        static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(r >> 32)};
      std::mt19937_64 rng(seq);
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      BleuStats a, b;
      for (std::size_t k = 0; k < n; ++k) {
        const auto idx = pick(rng);
        a += stats_a[idx];
        b += stats_b[idx];
      }
      const double bleu_a = bleu_from_stats(a, options).bleu;
      const double bleu_b = bleu_from_stats(b, options).bleu;
      outcome[r] = bleu_a > bleu_b ? 1 : (bleu_b > bleu_a ? -1 : 0);
    }
  };
  parallel_blocks(n_resamples, threads, run);

  BootstrapReport report;
  report.resamples = n_resamples;
  report.bleu_a = bleu_from_stats(total_a, options).bleu;
  report.bleu_b = bleu_from_stats(total_b, options).bleu;
  for (auto o : outcome) {
    if (o > 0) ++report.wins_a;
    else if (o < 0) ++report.wins_b;
    else ++report.ties;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Machine-readable reports
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const BleuReport& r) {
  return {{"bleu", r.bleu},
          {"precisions", r.precisions},
          {"bp", r.brevity_penalty},
          {"hyp_len", r.hyp_len},
          {"ref_len", r.ref_len}};
}

inline nlohmann::json to_json(const std::vector<BucketReport>& buckets) {
  auto out = nlohmann::json::array();
  for (const auto& b : buckets) {
    auto j = to_json(b.report);
    j["label"] = b.label;
    j["sentences"] = b.sentences;
    out.push_back(std::move(j));
  }
  return out;
}

inline nlohmann::json to_json(const ContrastiveReport& r) {
  nlohmann::json j{{"accuracy", r.accuracy()}, {"correct", r.overall.correct}, {"total", r.overall.total}};
  if (!r.by_attribute.empty()) {
    auto buckets = nlohmann::json::array();
    for (const auto& [attr, cell] : r.by_attribute) {
      buckets.push_back({{"attribute", attr}, {"accuracy", cell.accuracy()}, {"correct", cell.correct},
                         {"total", cell.total}});
    }
    j["buckets"] = std::move(buckets);
  }
  return j;
}

inline nlohmann::json to_json(const BootstrapReport& r) {
  return {{"p_value", r.p_value()},   {"resamples", r.resamples},   {"wins_a", r.wins_a},
          {"wins_b", r.wins_b},       {"ties", r.ties},             {"win_rate_a", r.win_rate_a()},
          {"win_rate_b", r.win_rate_b()}, {"bleu_a", r.bleu_a},    {"bleu_b", r.bleu_b}};
}

}  // namespace fixattn
