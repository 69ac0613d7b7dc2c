#pragma once

// Text-level decoding and scoring on top of a trained model. Work is cut into
// fixed-size chunks before being spread over threads, so results do not
// depend on the thread count.

#include <algorithm>
#include <cstddef>
#include <vector>

#include "fixattn/data.hpp"
#include "fixattn/eval.hpp"
#include "fixattn/model.hpp"
#include "fixattn/parallel.hpp"

namespace fixattn {

inline constexpr std::size_t kWorkChunk = 64;

struct TextCodec {
  const Vocabulary& source;
  const Vocabulary& target;
  bool subword_split = false;

  Sentence prepare_source(const Sentence& words) const { return subword_split ? split_subwords(words) : words; }
};

inline std::size_t default_max_steps(std::size_t source_len, std::size_t max_len) {
  return std::min(2 * source_len + 10, max_len - 1);
}

// Greedy translation of tokenized sentences. Empty inputs translate to empty
// outputs.
template <class T>
std::vector<Sentence> translate(const Transformer<T>& model, const TextCodec& codec,
                                const std::vector<Sentence>& sentences, std::size_t threads = 1) {
  std::vector<Sentence> outputs(sentences.size());
  std::vector<std::size_t> live;
  for (std::size_t k = 0; k < sentences.size(); ++k) {
    if (!sentences[k].empty()) live.push_back(k);
  }
  const std::size_t chunks = (live.size() + kWorkChunk - 1) / kWorkChunk;
  parallel_blocks(chunks, threads, [&](std::size_t first, std::size_t last) {
    for (std::size_t c = first; c < last; ++c) {
      std::vector<std::vector<TokenId>> ids;
      std::vector<Segmentation> segs;
      std::size_t longest = 0;
      const auto end = std::min(live.size(), (c + 1) * kWorkChunk);
      for (auto k = c * kWorkChunk; k < end; ++k) {
        const auto source = codec.prepare_source(sentences[live[k]]);
        ids.push_back(codec.source.encode(source));
        segs.push_back(Segmentation::from_subwords(source));
        longest = std::max(longest, source.size());
      }
      const auto decoded = model.greedy_decode(ids, default_max_steps(longest, model.config().max_len), &segs);
      for (std::size_t k = 0; k < decoded.size(); ++k) {
        outputs[live[c * kWorkChunk + k]] = codec.target.decode(decoded[k]);
      }
    }
  });
  return outputs;
}

// Sequence log-probabilities of reference and contrastive targets.
template <class T>
std::vector<ScoredPair> score_contrastive(const Transformer<T>& model, const TextCodec& codec,
                                          const std::vector<ContrastiveItem>& items, std::size_t threads = 1) {
  std::vector<ScoredPair> pairs(items.size());
  const std::size_t chunks = (items.size() + kWorkChunk - 1) / kWorkChunk;
  parallel_blocks(chunks, threads, [&](std::size_t first, std::size_t last) {
    for (std::size_t c = first; c < last; ++c) {
      std::vector<std::vector<TokenId>> sources, targets;
      std::vector<Segmentation> segs;
      const auto begin = c * kWorkChunk;
      const auto end = std::min(items.size(), begin + kWorkChunk);
      for (auto k = begin; k < end; ++k) {
        const auto source = codec.prepare_source(items[k].source);
        const auto ids = codec.source.encode(source);
        const auto seg = Segmentation::from_subwords(source);
        for (const auto* target : {&items[k].reference, &items[k].contrastive}) {
          sources.push_back(ids);
          targets.push_back(codec.target.encode(*target));
          segs.push_back(seg);
        }
      }
      const auto scores = model.score(sources, targets, &segs);
      for (auto k = begin; k < end; ++k) {
        const auto local = 2 * (k - begin);
        pairs[k] = {scores[local].total, scores[local + 1].total, items[k].attribute};
      }
    }
  });
  return pairs;
}

}  // namespace fixattn
