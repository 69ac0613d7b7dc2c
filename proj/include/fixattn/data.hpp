#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fixattn/error.hpp"
#include "fixattn/patterns.hpp"

namespace fixattn {

using TokenId = std::int32_t;
using Sentence = std::vector<std::string>;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kBosId = 1;
inline constexpr TokenId kEosId = 2;
inline constexpr TokenId kUnkId = 3;
inline constexpr std::size_t kReservedIds = 4;

inline Sentence tokenize(std::string_view line) {
  Sentence out;
  std::size_t pos = 0;
  while (pos < line.size()) {
    while (pos < line.size() && std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
    const auto start = pos;
    while (pos < line.size() && !std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
    if (pos > start) out.emplace_back(line.substr(start, pos - start));
  }
  return out;
}

inline std::string join(const Sentence& tokens) {
  std::string out;
  for (std::size_t k = 0; k < tokens.size(); ++k) {
    if (k > 0) out += ' ';
    out += tokens[k];
  }
  return out;
}

inline bool valid_utf8(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size()) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t extra = 0;
    std::uint32_t cp = 0;
    if (c < 0x80) {
      ++i;
      continue;
    } else if ((c & 0xe0) == 0xc0) {
      extra = 1;
      cp = c & 0x1f;
    } else if ((c & 0xf0) == 0xe0) {
      extra = 2;
      cp = c & 0x0f;
    } else if ((c & 0xf8) == 0xf0) {
      extra = 3;
      cp = c & 0x07;
    } else {
      return false;
    }
    if (i + extra >= s.size()) return false;
    for (std::size_t k = 1; k <= extra; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc & 0xc0) != 0x80) return false;
      cp = (cp << 6) | (cc & 0x3f);
    }
    static constexpr std::uint32_t kMin[] = {0, 0x80, 0x800, 0x10000};
    if (cp < kMin[extra] || cp > 0x10ffff || (cp >= 0xd800 && cp <= 0xdfff)) return false;
    i += extra + 1;
  }
  return true;
}

// Reads a UTF-8 text file line by line; a trailing newline does not produce an
// extra empty line.
inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorpusError("cannot open '" + path + "'");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!valid_utf8(line)) {
      throw EncodingError("invalid UTF-8 in '" + path + "' at line " +
                          std::to_string(lines.size() + 1));
    }
    lines.push_back(std::move(line));
  }
  return lines;
}

inline void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CorpusError("cannot write '" + path + "'");
  for (const auto& line : lines) out << line << '\n';
}

// ---------------------------------------------------------------------------
// Subwords
// ---------------------------------------------------------------------------

inline constexpr std::string_view kContinuation = "@@";

namespace detail {
inline std::vector<std::string> utf8_chars(std::string_view word) {
  std::vector<std::string> chars;
  for (std::size_t i = 0; i < word.size();) {
    std::size_t len = 1;
    const auto c = static_cast<unsigned char>(word[i]);
    if ((c & 0xe0) == 0xc0) len = 2;
    else if ((c & 0xf0) == 0xe0) len = 3;
    else if ((c & 0xf8) == 0xf0) len = 4;
    chars.emplace_back(word.substr(i, len));
    i += len;
  }
  return chars;
}
}  // namespace detail

// Deterministic stand-in for a learned subword model: words longer than six
// characters are cut into chunks of four, non-final chunks marked with "@@".
inline Sentence toy_subword_split(std::string_view word) {
  const auto chars = detail::utf8_chars(word);
  if (chars.size() <= 6) return {std::string(word)};
  Sentence pieces;
  for (std::size_t start = 0; start < chars.size(); start += 4) {
    std::string piece;
    const auto end = std::min(start + 4, chars.size());
    for (auto k = start; k < end; ++k) piece += chars[k];
    if (end < chars.size()) piece += kContinuation;
    pieces.push_back(std::move(piece));
  }
  return pieces;
}

inline Sentence split_subwords(const Sentence& words) {
  Sentence out;
  for (const auto& w : words) {
    auto pieces = toy_subword_split(w);
    out.insert(out.end(), pieces.begin(), pieces.end());
  }
  return out;
}

inline Sentence merge_subwords(const Sentence& tokens) {
  Sentence out;
  std::string current;
  bool open = false;
  for (const auto& t : tokens) {
    if (t.size() >= 2 && t.ends_with(kContinuation)) {
      current += t.substr(0, t.size() - 2);
      open = true;
    } else {
      out.push_back(current + t);
      current.clear();
      open = false;
    }
  }
  if (open) out.push_back(current);
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class Vocabulary {
 public:
  Vocabulary() : tokens_{"<pad>", "<s>", "</s>", "<unk>"} {
    for (std::size_t k = 0; k < tokens_.size(); ++k) index_[tokens_[k]] = static_cast<TokenId>(k);
  }

  // Orders tokens by descending corpus frequency, ties broken lexicographically.
  static Vocabulary build(const std::vector<Sentence>& sentences) {
    std::map<std::string, std::size_t> counts;
    for (const auto& s : sentences) {
      for (const auto& t : s) ++counts[t];
    }
    std::vector<std::pair<std::string, std::size_t>> entries(counts.begin(), counts.end());
    std::stable_sort(entries.begin(), entries.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocabulary vocab;
    for (const auto& [token, count] : entries) vocab.add(token);
    return vocab;
  }

  static Vocabulary from_tokens(const std::vector<std::string>& tokens) {
    Vocabulary vocab;
    for (const auto& t : tokens) {
      if (vocab.index_.contains(t)) throw CorpusError("duplicate vocabulary entry '" + t + "'");
      vocab.add(t);
    }
    return vocab;
  }

  static Vocabulary load(const std::string& path) { return from_tokens(read_lines(path)); }

  void save(const std::string& path) const {
    write_lines(path, std::vector<std::string>(tokens_.begin() + kReservedIds, tokens_.end()));
  }

  std::size_t size() const { return tokens_.size(); }

  TokenId id(const std::string& token) const {
    const auto it = index_.find(token);
    return it == index_.end() ? kUnkId : it->second;
  }

  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::vector<TokenId> encode(const Sentence& tokens) const {
    std::vector<TokenId> ids;
    ids.reserve(tokens.size());
    for (const auto& t : tokens) ids.push_back(id(t));
    return ids;
  }

  // Maps ids back to tokens, stopping at the first end-of-sentence and
  // dropping padding and begin markers.
  Sentence decode(const std::vector<TokenId>& ids) const {
    Sentence out;
    for (auto id : ids) {
      if (id == kEosId) break;
      if (id == kPadId || id == kBosId) continue;
      out.push_back(token(id));
    }
    return out;
  }

  std::vector<std::string> entries() const {
    return {tokens_.begin() + kReservedIds, tokens_.end()};
  }

 private:
  void add(const std::string& token) {
    index_[token] = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(token);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// ---------------------------------------------------------------------------
// Corpora
// ---------------------------------------------------------------------------

struct SentencePair {
  Sentence source;
  Sentence target;
};

using ParallelCorpus = std::vector<SentencePair>;

inline ParallelCorpus load_parallel(const std::string& source_path, const std::string& target_path) {
  const auto src = read_lines(source_path);
  const auto tgt = read_lines(target_path);
  if (src.size() != tgt.size()) {
    throw CorpusError("line count mismatch: '" + source_path + "' has " + std::to_string(src.size()) +
                      " lines, '" + target_path + "' has " + std::to_string(tgt.size()));
  }
  ParallelCorpus corpus;
  corpus.reserve(src.size());
  for (std::size_t k = 0; k < src.size(); ++k) corpus.push_back({tokenize(src[k]), tokenize(tgt[k])});
  return corpus;
}

struct ContrastiveItem {
  Sentence source;
  Sentence reference;
  Sentence contrastive;
  std::optional<long> attribute;
};

inline void write_contrastive_fixture(const std::string& path, const std::vector<ContrastiveItem>& items) {
  std::vector<std::string> lines;
  for (const auto& item : items) {
    lines.push_back(join(item.source) + '\t' + join(item.reference) + '\t' + join(item.contrastive) +
                    '\t' + (item.attribute ? std::to_string(*item.attribute) : std::string()));
  }
  write_lines(path, lines);
}

inline std::vector<ContrastiveItem> read_contrastive_fixture(const std::string& path) {
  std::vector<ContrastiveItem> items;
  const auto lines = read_lines(path);
  for (std::size_t k = 0; k < lines.size(); ++k) {
    std::vector<std::string> fields;
    std::stringstream stream(lines[k]);
    std::string field;
    while (std::getline(stream, field, '\t')) fields.push_back(field);
    if (!lines[k].empty() && lines[k].back() == '\t') fields.emplace_back();
    if (fields.size() != 4) {
      throw CorpusError("contrastive fixture '" + path + "' line " + std::to_string(k + 1) +
                        ": expected 4 tab-separated fields, got " + std::to_string(fields.size()));
    }
    ContrastiveItem item{tokenize(fields[0]), tokenize(fields[1]), tokenize(fields[2]), std::nullopt};
    if (!tokenize(fields[3]).empty()) {
      try {
        item.attribute = std::stol(fields[3]);
      } catch (const std::exception&) {
        throw CorpusError("contrastive fixture '" + path + "' line " + std::to_string(k + 1) +
                          ": attribute '" + fields[3] + "' is not an integer");
      }
    }
    items.push_back(std::move(item));
  }
  return items;
}

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

enum class SyntheticTask { Copy, Reverse, LexicalTranslate };

inline SyntheticTask parse_task(std::string_view name) {
  if (name == "copy") return SyntheticTask::Copy;
  if (name == "reverse") return SyntheticTask::Reverse;
  if (name == "lexical-translate") return SyntheticTask::LexicalTranslate;
  throw UsageError("unknown task '" + std::string(name) + "' (expected copy, reverse, lexical-translate)");
}

// Word k of the synthetic source language: a..z, then a1..z1, a2.. and so on.
inline std::string synthetic_word(std::size_t k, bool upper = false) {
  std::string w(1, static_cast<char>((upper ? 'A' : 'a') + k % 26));
  if (k >= 26) w += std::to_string(k / 26);
  return w;
}

struct SyntheticCorpus {
  ParallelCorpus pairs;
  // One corrupted target per pair, attribute = corrupted position.
  std::vector<ContrastiveItem> contrastive;
  std::vector<std::string> source_words;
  std::vector<std::string> target_words;
  // source word index -> target word index
  std::vector<std::size_t> mapping;
};

inline SyntheticCorpus make_synthetic(SyntheticTask task, std::size_t vocab_size, std::size_t n_sentences,
                                      std::size_t min_len, std::size_t max_len, std::uint64_t seed) {
  if (vocab_size < 5) throw UsageError("synthetic vocabulary needs at least 5 words");
  if (min_len == 0 || min_len > max_len) {
    throw UsageError("invalid synthetic length range [" + std::to_string(min_len) + ", " +
                     std::to_string(max_len) + "]");
  }
  std::mt19937_64 rng(seed);
  SyntheticCorpus out;
  out.mapping.resize(vocab_size);
  std::iota(out.mapping.begin(), out.mapping.end(), std::size_t{0});
  const bool lexical = task == SyntheticTask::LexicalTranslate;
  if (lexical) std::shuffle(out.mapping.begin(), out.mapping.end(), rng);
  for (std::size_t k = 0; k < vocab_size; ++k) {
    out.source_words.push_back(synthetic_word(k));
    out.target_words.push_back(synthetic_word(k, lexical));
  }

  std::uniform_int_distribution<std::size_t> length(min_len, max_len);
  std::uniform_int_distribution<std::size_t> word(0, vocab_size - 1);
  std::uniform_int_distribution<std::size_t> other(1, vocab_size - 1);
  for (std::size_t s = 0; s < n_sentences; ++s) {
    const auto n = length(rng);
    std::vector<std::size_t> src(n);
    for (auto& w : src) w = word(rng);
    std::vector<std::size_t> tgt = src;
    if (task == SyntheticTask::Reverse) std::reverse(tgt.begin(), tgt.end());
    for (auto& w : tgt) w = out.mapping[w];

    SentencePair pair;
    for (auto w : src) pair.source.push_back(out.source_words[w]);
    for (auto w : tgt) pair.target.push_back(out.target_words[w]);

    const auto position = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    auto corrupted = tgt;
    corrupted[position] = (corrupted[position] + other(rng)) % vocab_size;
    Sentence contrastive;
    for (auto w : corrupted) contrastive.push_back(out.target_words[w]);
    out.contrastive.push_back({pair.source, pair.target, std::move(contrastive),
                               static_cast<long>(position)});
    out.pairs.push_back(std::move(pair));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoding and batching
// ---------------------------------------------------------------------------

struct EncodedPair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;
  Segmentation segmentation;
};

using EncodedCorpus = std::vector<EncodedPair>;

inline EncodedPair encode_pair(const SentencePair& pair, const Vocabulary& src_vocab,
                               const Vocabulary& tgt_vocab) {
  return {src_vocab.encode(pair.source), tgt_vocab.encode(pair.target),
          Segmentation::from_subwords(pair.source)};
}

inline EncodedCorpus encode_corpus(const ParallelCorpus& corpus, const Vocabulary& src_vocab,
                                   const Vocabulary& tgt_vocab) {
  EncodedCorpus out;
  out.reserve(corpus.size());
  for (const auto& pair : corpus) out.push_back(encode_pair(pair, src_vocab, tgt_vocab));
  return out;
}

// Padded, immutable view of a group of sentence pairs. Targets are laid out for
// teacher forcing: decoder input is <s> y1..yk, expected output y1..yk </s>.
struct Batch {
  std::vector<std::size_t> indices;
  std::vector<std::vector<TokenId>> sources;
  std::vector<std::size_t> source_lengths;
  std::vector<std::size_t> target_lengths;  // including </s>
  std::size_t source_width = 0;
  std::size_t target_width = 0;
  std::vector<TokenId> target_in;
  std::vector<TokenId> target_out;
  std::vector<double> loss_mask;
  std::vector<Segmentation> segmentations;

  std::size_t size() const { return sources.size(); }
};

inline Batch make_batch(const EncodedCorpus& corpus, const std::vector<std::size_t>& indices) {
  Batch batch;
  batch.indices = indices;
  for (auto k : indices) {
    const auto& pair = corpus.at(k);
    batch.sources.push_back(pair.source);
    batch.source_lengths.push_back(pair.source.size());
    batch.target_lengths.push_back(pair.target.size() + 1);
    batch.segmentations.push_back(pair.segmentation);
    batch.source_width = std::max(batch.source_width, pair.source.size());
    batch.target_width = std::max(batch.target_width, pair.target.size() + 1);
  }
  const auto cells = indices.size() * batch.target_width;
  batch.target_in.assign(cells, kPadId);
  batch.target_out.assign(cells, kPadId);
  batch.loss_mask.assign(cells, 0.0);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& tgt = corpus[indices[b]].target;
    const auto row = b * batch.target_width;
    batch.target_in[row] = kBosId;
    for (std::size_t t = 0; t < tgt.size(); ++t) {
      batch.target_in[row + t + 1] = tgt[t];
      batch.target_out[row + t] = tgt[t];
    }
    batch.target_out[row + tgt.size()] = kEosId;
    for (std::size_t t = 0; t <= tgt.size(); ++t) batch.loss_mask[row + t] = 1.0;
  }
  return batch;
}

// Token-capped batches over one shuffled pass of a corpus. Each pair costs its
// source length; a pair longer than the cap forms a batch of its own. Pairs
// that are empty or exceed max_len are skipped and counted.
class BatchIterator {
 public:
  using WarningSink = std::function<void(const std::string&)>;

  BatchIterator(const EncodedCorpus& corpus, std::size_t batch_tokens, std::uint64_t shuffle_seed,
                std::size_t max_len, WarningSink warn = {})
      : corpus_(corpus), batch_tokens_(batch_tokens), max_len_(max_len) {
    if (batch_tokens == 0) throw UsageError("batch token cap must be positive");
    order_.resize(corpus.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::mt19937_64 rng(shuffle_seed);
    std::shuffle(order_.begin(), order_.end(), rng);
    for (std::size_t k = 0; k < corpus.size(); ++k) {
      const auto& pair = corpus[k];
      std::string reason;
      if (pair.source.empty() || pair.target.empty()) reason = "empty sentence";
      else if (pair.source.size() > max_len_ || pair.target.size() + 1 > max_len_) reason = "longer than max_len " + std::to_string(max_len_);
      if (!reason.empty()) {
        ++skipped_;
        if (warn) warn("skipping sentence pair " + std::to_string(k + 1) + ": " + reason);
      }
    }
  }

  std::optional<Batch> next() {
    std::vector<std::size_t> chosen;
    std::size_t tokens = 0;
    while (cursor_ < order_.size()) {
      const auto k = order_[cursor_];
      if (!usable(k)) {
        ++cursor_;
        continue;
      }
      const auto cost = corpus_[k].source.size();
      if (!chosen.empty() && tokens + cost > batch_tokens_) break;
      chosen.push_back(k);
      tokens += cost;
      ++cursor_;
    }
    if (chosen.empty()) return std::nullopt;
    return make_batch(corpus_, chosen);
  }

  std::size_t skipped() const { return skipped_; }

 private:
  bool usable(std::size_t k) const {
    const auto& pair = corpus_[k];
    return !pair.source.empty() && !pair.target.empty() && pair.source.size() <= max_len_ &&
           pair.target.size() + 1 <= max_len_;
  }

  const EncodedCorpus& corpus_;
  std::size_t batch_tokens_;
  std::size_t max_len_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t skipped_ = 0;
};

}  // namespace fixattn
