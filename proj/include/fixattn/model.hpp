#pragma once

// Transformer encoder-decoder whose encoder self-attention heads draw their
// energies either from learned scaled dot products or from fixed positional
// patterns. Fixed heads own no query/key projections; they keep their value
// projection and share the output projection with the learned heads.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fixattn/data.hpp"
#include "fixattn/error.hpp"
#include "fixattn/patterns.hpp"
#include "fixattn/tensor.hpp"

namespace fixattn {

struct HeadSpec {
  PatternKind kind = PatternKind::Learned;
  bool word_based = false;

  bool learned() const { return kind == PatternKind::Learned; }
  bool operator==(const HeadSpec&) const = default;
};

inline constexpr std::array<std::string_view, 5> kHeadShorthands = {
    "8L", "7Ftoken+1L", "7Fword+1L", "8Ftoken", "1L"};

// Head assignments named after the encoder configurations they reproduce.
// The fixed heads come first in pattern order; the learnable head is last.
inline std::vector<HeadSpec> head_specs_from_shorthand(std::string_view name) {
  std::vector<HeadSpec> specs;
  auto fixed = [&](std::size_t count, bool word) {
    for (std::size_t k = 0; k < count; ++k) specs.push_back({kFixedKinds[k], word});
  };
  if (name == "8L") {
    specs.assign(8, HeadSpec{});
  } else if (name == "7Ftoken+1L") {
    fixed(7, false);
    specs.push_back({});
  } else if (name == "7Fword+1L") {
    fixed(7, true);
    specs.push_back({});
  } else if (name == "8Ftoken") {
    fixed(8, false);
  } else if (name == "1L") {
    specs.push_back({});
  } else {
    std::string valid;
    for (auto s : kHeadShorthands) valid += (valid.empty() ? "" : ", ") + std::string(s);
    throw UsageError("invalid head spec '" + std::string(name) + "'; valid specs: {" + valid + "}");
  }
  return specs;
}

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 8;
  std::size_t d_ff = 256;
  std::size_t enc_layers = 2;
  std::size_t dec_layers = 1;
  std::vector<HeadSpec> enc_head_specs;  // empty means all learned
  std::size_t src_vocab = 0;
  std::size_t tgt_vocab = 0;
  double dropout = 0.1;
  std::size_t max_len = 128;
  std::uint64_t seed = 1;

  std::size_t d_k() const { return d_model / n_heads; }

  std::vector<HeadSpec> head_specs() const {
    return enc_head_specs.empty() ? std::vector<HeadSpec>(n_heads) : enc_head_specs;
  }

  bool uses_word_patterns() const {
    return std::any_of(enc_head_specs.begin(), enc_head_specs.end(),
                       [](const HeadSpec& s) { return !s.learned() && s.word_based; });
  }

  void apply_shorthand(std::string_view name) {
    enc_head_specs = head_specs_from_shorthand(name);
    n_heads = enc_head_specs.size();
  }

  void validate() const {
    if (d_model == 0 || n_heads == 0) throw ConfigError("d_model and n_heads must be positive");
    if (d_model % n_heads != 0) {
      throw ConfigError("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
    }
    if (d_ff == 0) throw ConfigError("d_ff must be positive");
    if (!enc_head_specs.empty() && enc_head_specs.size() != n_heads) {
      throw ConfigError("enc_head_specs lists " + std::to_string(enc_head_specs.size()) +
                        " heads but n_heads is " + std::to_string(n_heads));
    }
    for (const auto& s : enc_head_specs) {
      if (s.learned() && s.word_based) throw ConfigError("enc_head_specs: a learned head cannot be word-based");
    }
    if (src_vocab <= kReservedIds || tgt_vocab <= kReservedIds) {
      throw ConfigError("src_vocab and tgt_vocab must exceed the " + std::to_string(kReservedIds) +
                        " reserved ids");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (max_len == 0) throw ConfigError("max_len must be positive");
  }
};

// ---------------------------------------------------------------------------
// Parameter accounting
// ---------------------------------------------------------------------------

// Weights are matrices (projections and embeddings); biases are every vector
// parameter, layer-norm gains included.
struct ParamCount {
  std::size_t total = 0;
  std::size_t weights = 0;
  std::size_t biases = 0;
  std::vector<std::pair<std::string, std::size_t>> components;

  void add(const std::string& component, std::size_t w, std::size_t b) {
    weights += w;
    biases += b;
    total += w + b;
    for (auto& [name, count] : components) {
      if (name == component) {
        count += w + b;
        return;
      }
    }
    components.emplace_back(component, w + b);
  }
};

inline ParamCount param_count(const ModelConfig& config) {
  const auto d = config.d_model;
  const auto dk = config.d_k();
  const auto h = config.n_heads;
  const auto specs = config.head_specs();
  const auto learned = static_cast<std::size_t>(
      std::count_if(specs.begin(), specs.end(), [](const HeadSpec& s) { return s.learned(); }));

  ParamCount c;
  c.add("source embedding", config.src_vocab * d, 0);
  c.add("target embedding", config.tgt_vocab * d, 0);
  for (std::size_t l = 0; l < config.enc_layers; ++l) {
    c.add("encoder attention query/key", learned * 2 * d * dk, learned * 2 * dk);
    c.add("encoder attention value", h * d * dk, h * dk);
    c.add("encoder attention output", d * d, d);
    c.add("encoder feed-forward", 2 * d * config.d_ff, config.d_ff + d);
    c.add("encoder layer norm", 0, 4 * d);
  }
  for (std::size_t l = 0; l < config.dec_layers; ++l) {
    c.add("decoder self-attention", 3 * h * d * dk + d * d, 3 * h * dk + d);
    c.add("decoder cross-attention", 3 * h * d * dk + d * d, 3 * h * dk + d);
    c.add("decoder feed-forward", 2 * d * config.d_ff, config.d_ff + d);
    c.add("decoder layer norm", 0, 6 * d);
  }
  c.add("output projection", d * config.tgt_vocab, config.tgt_vocab);
  return c;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <class T>
struct HeadParams {
  // Undefined for fixed heads.
  Tensor<T> wq, bq, wk, bk;
  Tensor<T> wv, bv;
};

template <class T>
struct AttentionParams {
  std::vector<HeadParams<T>> heads;
  Tensor<T> wo, bo;
};

template <class T>
struct LayerNormParams {
  Tensor<T> gain, bias;
};

template <class T>
struct FeedForwardParams {
  Tensor<T> w1, b1, w2, b2;
};

template <class T>
struct EncoderLayer {
  AttentionParams<T> attention;
  LayerNormParams<T> norm1;
  FeedForwardParams<T> ffn;
  LayerNormParams<T> norm2;
};

template <class T>
struct DecoderLayer {
  AttentionParams<T> self_attention;
  LayerNormParams<T> norm1;
  AttentionParams<T> cross_attention;
  LayerNormParams<T> norm2;
  FeedForwardParams<T> ffn;
  LayerNormParams<T> norm3;
};

// Per-head energy sources for one attention call. banks[h] is a constant
// [batch, n, n] tensor for a fixed head and undefined for a learned one.
template <class T>
struct HeadEnergies {
  std::vector<HeadSpec> specs;
  std::vector<Tensor<T>> banks;
  std::vector<char> masked;  // empty means no head is masked
};

struct DropoutContext {
  std::mt19937_64* rng = nullptr;
  double probability = 0.0;

  bool active() const { return rng != nullptr && probability > 0.0; }
};

template <class T>
Tensor<T> apply_dropout(const Tensor<T>& x, const DropoutContext& ctx) {
  return ctx.active() ? dropout(x, ctx.probability, *ctx.rng) : x;
}

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

// Multi-head attention over packed rows. queries is [batch * n_q, d_model],
// keys is [batch * n_k, d_model]; score_mask, when defined, is an additive
// [batch, n_q, n_k] constant (0 or -inf) applied to learned heads before the
// softmax. Fixed heads use their bank rows verbatim as energies.
template <class T>
Tensor<T> multi_head_attention(const AttentionParams<T>& params, const Tensor<T>& queries,
                               const Tensor<T>& keys, std::size_t batch, const Tensor<T>& score_mask,
                               const HeadEnergies<T>& energies, const DropoutContext& ctx = {}) {
  const std::size_t heads = params.heads.size();
  if (energies.specs.size() != heads) {
    throw ConfigError("attention has " + std::to_string(heads) + " heads but " +
                      std::to_string(energies.specs.size()) + " head specs");
  }
  const std::size_t n_q = queries.dim(0) / batch;
  const std::size_t n_k = keys.dim(0) / batch;
  std::vector<Tensor<T>> outputs;
  outputs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto& p = params.heads[h];
    const std::size_t dk = p.wv.dim(1);
    if (!energies.masked.empty() && energies.masked[h]) {
      outputs.push_back(Tensor<T>::zeros({batch * n_q, dk}));
      continue;
    }
    const auto values = reshape(linear(keys, p.wv, p.bv), {batch, n_k, dk});
    Tensor<T> weights;
    if (energies.specs[h].learned()) {
      const auto q = reshape(linear(queries, p.wq, p.bq), {batch, n_q, dk});
      const auto k = reshape(linear(keys, p.wk, p.bk), {batch, n_k, dk});
      auto scores = scale(matmul(q, transpose(k)), T(1) / std::sqrt(static_cast<T>(dk)));
      if (score_mask.defined()) scores = add(scores, score_mask);
      weights = apply_dropout(row_softmax(scores), ctx);
    } else {
      if (h >= energies.banks.size() || !energies.banks[h].defined()) {
        throw ConfigError("no pattern bank supplied for fixed head " + std::to_string(h) + " (" +
                          std::string(to_string(energies.specs[h].kind)) + ")");
      }
      weights = energies.banks[h];
      if (weights.shape() != Shape{batch, n_q, n_k}) {
        throw ShapeError("pattern bank for head " + std::to_string(h) + " has shape " +
                         to_string(weights.shape()) + ", expected " +
                         to_string(Shape{batch, n_q, n_k}));
      }
    }
    outputs.push_back(reshape(matmul(weights, values), {batch * n_q, dk}));
  }
  return linear(concat_last_dim(outputs), params.wo, params.bo);
}

inline std::vector<double> sinusoidal_encoding(std::size_t length, std::size_t width) {
  std::vector<double> pe(length * width);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < width; ++i) {
      const double rate = std::pow(10000.0, static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
      const double angle = static_cast<double>(pos) / rate;
      pe[pos * width + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

template <class T>
struct EncoderOutput {
  Tensor<T> states;  // [batch * width, d_model]
  std::size_t batch = 0;
  std::size_t width = 0;
  std::vector<std::size_t> lengths;
};

template <class T>
struct LossResult {
  Tensor<T> loss;
  std::size_t correct = 0;
  std::size_t counted = 0;
};

struct SequenceScore {
  // log p of each target token followed by </s>
  std::vector<double> token_logprobs;
  double total = 0.0;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

template <class T>
class Transformer {
 public:
  explicit Transformer(ModelConfig config) : config_(std::move(config)), dropout_rng_(config_.seed ^ 0x5eedULL) {
    config_.validate();
    specs_ = config_.head_specs();
    head_mask_.assign(config_.enc_layers, std::vector<char>(config_.n_heads, 0));
    std::mt19937_64 rng(config_.seed);
    const auto d = config_.d_model;
    src_embedding_ = weight("src_embed", {config_.src_vocab, d}, rng);
    tgt_embedding_ = weight("tgt_embed", {config_.tgt_vocab, d}, rng);
    for (std::size_t l = 0; l < config_.enc_layers; ++l) {
      const auto prefix = "enc." + std::to_string(l) + ".";
      EncoderLayer<T> layer;
      layer.attention = attention(prefix + "self_attn", specs_, rng);
      layer.norm1 = norm(prefix + "norm1");
      layer.ffn = feed_forward(prefix + "ffn", rng);
      layer.norm2 = norm(prefix + "norm2");
      encoder_.push_back(std::move(layer));
    }
    const std::vector<HeadSpec> learned(config_.n_heads);
    for (std::size_t l = 0; l < config_.dec_layers; ++l) {
      const auto prefix = "dec." + std::to_string(l) + ".";
      DecoderLayer<T> layer;
      layer.self_attention = attention(prefix + "self_attn", learned, rng);
      layer.norm1 = norm(prefix + "norm1");
      layer.cross_attention = attention(prefix + "cross_attn", learned, rng);
      layer.norm2 = norm(prefix + "norm2");
      layer.ffn = feed_forward(prefix + "ffn", rng);
      layer.norm3 = norm(prefix + "norm3");
      decoder_.push_back(std::move(layer));
    }
    out_weight_ = weight("out.w", {d, config_.tgt_vocab}, rng);
    out_bias_ = bias("out.b", config_.tgt_vocab);
  }

  Transformer(const Transformer&) = delete;
  Transformer& operator=(const Transformer&) = delete;
  Transformer(Transformer&&) noexcept = default;
  Transformer& operator=(Transformer&&) noexcept = default;

  const ModelConfig& config() const { return config_; }
  ParameterList<T>& parameters() { return params_; }
  const ParameterList<T>& parameters() const { return params_; }

  const std::vector<EncoderLayer<T>>& encoder_layers() const { return encoder_; }
  std::vector<EncoderLayer<T>>& encoder_layers() { return encoder_; }

  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  // Disables one encoder head in layers [first_layer, last_layer). Masking is
  // an evaluation-time switch: the head's output slice is replaced by zeros
  // before the output projection.
  void mask_head(std::size_t head, std::size_t first_layer = 0,
                 std::size_t last_layer = std::numeric_limits<std::size_t>::max()) {
    set_head_mask(head, first_layer, last_layer, 1);
  }

  void unmask_head(std::size_t head, std::size_t first_layer = 0,
                   std::size_t last_layer = std::numeric_limits<std::size_t>::max()) {
    set_head_mask(head, first_layer, last_layer, 0);
  }

  void clear_head_masks() {
    for (auto& layer : head_mask_) std::fill(layer.begin(), layer.end(), 0);
  }

  bool head_masked(std::size_t layer, std::size_t head) const { return head_mask_.at(layer).at(head) != 0; }

  // Constant [batch, width, width] energy tensors for every fixed encoder
  // head (undefined entries for learned heads), built once per batch.
  std::vector<Tensor<T>> pattern_tensors(const std::vector<std::size_t>& lengths,
                                         const std::vector<Segmentation>* segs) const {
    std::vector<Tensor<T>> banks(specs_.size());
    std::map<std::pair<PatternKind, bool>, Tensor<T>> built;
    for (std::size_t h = 0; h < specs_.size(); ++h) {
      const auto& spec = specs_[h];
      if (spec.learned()) continue;
      const auto key = std::make_pair(spec.kind, spec.word_based);
      auto it = built.find(key);
      if (it == built.end()) {
        if (spec.word_based && segs == nullptr) {
          throw ConfigError("word-based head " + std::to_string(h) + " needs source segmentations");
        }
        const auto bank = pattern_bank(spec.kind, spec.word_based, lengths, spec.word_based ? segs : nullptr);
        const auto width = bank.width;
        std::vector<T> values;
        values.reserve(lengths.size() * width * width);
        for (const auto& m : bank.matrices) {
          for (double v : m.rows) values.push_back(static_cast<T>(v));
        }
        it = built.emplace(key, Tensor<T>({lengths.size(), width, width}, std::move(values))).first;
      }
      banks[h] = it->second;
    }
    return banks;
  }

  EncoderOutput<T> encode(const std::vector<std::vector<TokenId>>& sources,
                          const std::vector<Segmentation>* segs = nullptr) const {
    return encode_impl(sources, segs, {});
  }

  // Teacher-forced loss over a batch. Uses dropout when in training mode.
  LossResult<T> loss(const Batch& batch) {
    return loss_impl(batch, {training_ ? &dropout_rng_ : nullptr, config_.dropout});
  }

  // Teacher-forced loss and token accuracy without dropout or graph recording.
  LossResult<T> evaluate(const Batch& batch) const {
    NoGradGuard no_grad;
    return loss_impl(batch, {});
  }

  // Logits [batch * width, tgt_vocab] for padded decoder inputs.
  Tensor<T> decode(const EncoderOutput<T>& memory, const std::vector<TokenId>& target_in, std::size_t width,
                   const std::vector<std::size_t>& lengths) const {
    return decode_impl(memory, target_in, width, lengths, {});
  }

  std::vector<SequenceScore> score(const std::vector<std::vector<TokenId>>& sources,
                                   const std::vector<std::vector<TokenId>>& targets,
                                   const std::vector<Segmentation>* segs = nullptr) const {
    if (sources.size() != targets.size()) {
      throw InvalidInput("score: " + std::to_string(sources.size()) + " sources but " +
                         std::to_string(targets.size()) + " targets");
    }
    if (segs == nullptr && config_.uses_word_patterns()) {
      throw ConfigError("word-based heads need source segmentations");
    }
    EncodedCorpus corpus;
    for (std::size_t k = 0; k < sources.size(); ++k) {
      if (targets[k].empty()) throw InvalidInput("cannot score an empty target (pair " + std::to_string(k) + ")");
      corpus.push_back({sources[k], targets[k],
                        segs ? (*segs)[k] : Segmentation::identity(sources[k].size())});
    }
    NoGradGuard no_grad;
    std::vector<SequenceScore> scores;
    for (std::size_t start = 0; start < corpus.size(); start += kInferenceChunk) {
      std::vector<std::size_t> indices;
      for (auto k = start; k < std::min(corpus.size(), start + kInferenceChunk); ++k) indices.push_back(k);
      const auto batch = make_batch(corpus, indices);
      const auto memory = encode_impl(batch.sources, &batch.segmentations, {});
      const auto logits = decode_impl(memory, batch.target_in, batch.target_width, batch.target_lengths, {});
      const auto values = logits.data();
      const auto vocab = config_.tgt_vocab;
      for (std::size_t b = 0; b < batch.size(); ++b) {
        SequenceScore s;
        for (std::size_t t = 0; t < batch.target_lengths[b]; ++t) {
          const auto row = b * batch.target_width + t;
          const auto lp = log_softmax_at(values.subspan(row * vocab, vocab),
                                         static_cast<std::size_t>(batch.target_out[row]));
          s.token_logprobs.push_back(lp);
          s.total += lp;
        }
        scores.push_back(std::move(s));
      }
    }
    return scores;
  }

  // Argmax decoding until </s> or max_steps tokens; the result excludes </s>.
  std::vector<std::vector<TokenId>> greedy_decode(const std::vector<std::vector<TokenId>>& sources,
                                                  std::size_t max_steps,
                                                  const std::vector<Segmentation>* segs = nullptr) const {
    NoGradGuard no_grad;
    std::vector<std::vector<TokenId>> results(sources.size());
    max_steps = std::min(max_steps, config_.max_len - 1);
    for (std::size_t start = 0; start < sources.size(); start += kInferenceChunk) {
      const auto end = std::min(sources.size(), start + kInferenceChunk);
      const std::vector<std::vector<TokenId>> chunk(sources.begin() + static_cast<std::ptrdiff_t>(start),
                                                    sources.begin() + static_cast<std::ptrdiff_t>(end));
      std::vector<Segmentation> chunk_segs;
      if (segs) chunk_segs.assign(segs->begin() + static_cast<std::ptrdiff_t>(start), segs->begin() + static_cast<std::ptrdiff_t>(end));
      const auto memory = encode_impl(chunk, segs ? &chunk_segs : nullptr, {});
      const std::size_t batch = chunk.size();
      std::vector<std::vector<TokenId>> prefix(batch, std::vector<TokenId>{kBosId});
      std::vector<char> done(batch, 0);
      for (std::size_t step = 0; step < max_steps; ++step) {
        const std::size_t width = step + 1;
        std::vector<TokenId> target_in(batch * width, kPadId);
        for (std::size_t b = 0; b < batch; ++b) std::copy(prefix[b].begin(), prefix[b].end(), target_in.begin() + static_cast<std::ptrdiff_t>(b * width));
        const std::vector<std::size_t> lengths(batch, width);
        const auto logits = decode_impl(memory, target_in, width, lengths, {});
        const auto values = logits.data();
        const auto vocab = config_.tgt_vocab;
        bool all_done = true;
        for (std::size_t b = 0; b < batch; ++b) {
          TokenId next = kEosId;
          if (!done[b]) {
            const auto row = values.subspan((b * width + step) * vocab, vocab);
            auto best = static_cast<std::size_t>(kEosId);
            for (std::size_t v = kEosId; v < vocab; ++v) {
              if (row[v] > row[best]) best = v;
            }
            next = static_cast<TokenId>(best);
            if (next == kEosId) done[b] = 1;
            else results[start + b].push_back(next);
          }
          prefix[b].push_back(next);
          all_done = all_done && done[b];
        }
        if (all_done) break;
      }
    }
    return results;
  }

 private:
  static constexpr std::size_t kInferenceChunk = 64;

  static double log_softmax_at(std::span<const T> row, std::size_t target) {
    const double peak = static_cast<double>(*std::max_element(row.begin(), row.end()));
    double total = 0.0;
    for (auto v : row) total += std::exp(static_cast<double>(v) - peak);
    return static_cast<double>(row[target]) - peak - std::log(total);
  }

  LossResult<T> loss_impl(const Batch& batch, const DropoutContext& ctx) const {
    const auto memory = encode_impl(batch.sources, &batch.segmentations, ctx);
    const auto logits = decode_impl(memory, batch.target_in, batch.target_width, batch.target_lengths, ctx);
    const std::vector<T> mask(batch.loss_mask.begin(), batch.loss_mask.end());
    CrossEntropyStats stats;
    LossResult<T> result;
    result.loss = cross_entropy_with_mask<T, TokenId>(logits, batch.target_out, mask, &stats);
    result.correct = stats.correct;
    result.counted = stats.counted;
    return result;
  }

  void set_head_mask(std::size_t head, std::size_t first, std::size_t last, char value) {
    if (head >= config_.n_heads) {
      throw ConfigError("head index " + std::to_string(head) + " out of range for " +
                        std::to_string(config_.n_heads) + " heads");
    }
    last = std::min(last, config_.enc_layers);
    if (first > last) throw ConfigError("empty layer range for head mask");
    for (auto l = first; l < last; ++l) head_mask_[l][head] = value;
  }

  Tensor<T> weight(const std::string& name, Shape shape, std::mt19937_64& rng) {
    auto t = xavier_uniform<T>(std::move(shape), rng);
    params_.push_back({name, t});
    return t;
  }

  Tensor<T> bias(const std::string& name, std::size_t width, T value = T(0)) {
    auto t = Tensor<T>::filled({width}, value, true);
    params_.push_back({name, t});
    return t;
  }

  LayerNormParams<T> norm(const std::string& prefix) {
    return {bias(prefix + ".gain", config_.d_model, T(1)), bias(prefix + ".bias", config_.d_model)};
  }

  FeedForwardParams<T> feed_forward(const std::string& prefix, std::mt19937_64& rng) {
    FeedForwardParams<T> f;
    f.w1 = weight(prefix + ".w1", {config_.d_model, config_.d_ff}, rng);
    f.b1 = bias(prefix + ".b1", config_.d_ff);
    f.w2 = weight(prefix + ".w2", {config_.d_ff, config_.d_model}, rng);
    f.b2 = bias(prefix + ".b2", config_.d_model);
    return f;
  }

  AttentionParams<T> attention(const std::string& prefix, const std::vector<HeadSpec>& specs,
                               std::mt19937_64& rng) {
    AttentionParams<T> a;
    const auto d = config_.d_model;
    const auto dk = config_.d_k();
    for (std::size_t h = 0; h < specs.size(); ++h) {
      const auto hp = prefix + ".head" + std::to_string(h);
      HeadParams<T> head;
      if (specs[h].learned()) {
        head.wq = weight(hp + ".wq", {d, dk}, rng);
        head.bq = bias(hp + ".bq", dk);
        head.wk = weight(hp + ".wk", {d, dk}, rng);
        head.bk = bias(hp + ".bk", dk);
      }
      head.wv = weight(hp + ".wv", {d, dk}, rng);
      head.bv = bias(hp + ".bv", dk);
      a.heads.push_back(std::move(head));
    }
    a.wo = weight(prefix + ".wo", {d, d}, rng);
    a.bo = bias(prefix + ".bo", d);
    return a;
  }

  Tensor<T> embed(const Tensor<T>& table, const std::vector<TokenId>& ids, std::size_t batch,
                  std::size_t width) const {
    const auto d = config_.d_model;
    auto x = scale(embedding_lookup<T, TokenId>(table, ids), std::sqrt(static_cast<T>(d)));
    const auto pe = sinusoidal_encoding(width, d);
    std::vector<T> tiled(batch * width * d);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < width * d; ++i) tiled[b * width * d + i] = static_cast<T>(pe[i]);
    }
    return add(x, Tensor<T>({batch * width, d}, std::move(tiled)));
  }

  Tensor<T> feed_forward_block(const FeedForwardParams<T>& f, const Tensor<T>& x, const DropoutContext& ctx) const {
    return linear(apply_dropout(relu(linear(x, f.w1, f.b1)), ctx), f.w2, f.b2);
  }

  static Tensor<T> add_norm(const Tensor<T>& residual, const Tensor<T>& update, const LayerNormParams<T>& n,
                            const DropoutContext& ctx) {
    return layer_norm(add(residual, apply_dropout(update, ctx)), n.gain, n.bias);
  }

  // Additive mask [batch, n_q, n_k]: -inf on padded keys and, when causal, on
  // keys after the query position.
  static Tensor<T> score_mask(std::size_t batch, std::size_t n_q, std::size_t n_k,
                              const std::vector<std::size_t>& key_lengths, bool causal) {
    const T blocked = -std::numeric_limits<T>::infinity();
    std::vector<T> mask(batch * n_q * n_k, T(0));
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < n_q; ++i) {
        for (std::size_t j = 0; j < n_k; ++j) {
          if (j >= key_lengths[b] || (causal && j > i)) mask[(b * n_q + i) * n_k + j] = blocked;
        }
      }
    }
    return Tensor<T>({batch, n_q, n_k}, std::move(mask));
  }

  EncoderOutput<T> encode_impl(const std::vector<std::vector<TokenId>>& sources,
                               const std::vector<Segmentation>* segs, const DropoutContext& ctx) const {
    EncoderOutput<T> out;
    out.batch = sources.size();
    if (out.batch == 0) throw InvalidInput("encode of an empty batch");
    for (const auto& s : sources) {
      if (s.empty()) throw InvalidInput("cannot encode an empty source sentence");
      if (s.size() > config_.max_len) {
        throw LengthError("source length " + std::to_string(s.size()) + " exceeds max_len " +
                          std::to_string(config_.max_len));
      }
      for (auto id : s) {
        if (id < 0 || static_cast<std::size_t>(id) >= config_.src_vocab) {
          throw InvalidInput("source token id " + std::to_string(id) + " outside vocabulary of " +
                             std::to_string(config_.src_vocab));
        }
      }
      out.lengths.push_back(s.size());
      out.width = std::max(out.width, s.size());
    }
    std::vector<TokenId> ids(out.batch * out.width, kPadId);
    for (std::size_t b = 0; b < out.batch; ++b) {
      std::copy(sources[b].begin(), sources[b].end(), ids.begin() + static_cast<std::ptrdiff_t>(b * out.width));
    }
    auto x = apply_dropout(embed(src_embedding_, ids, out.batch, out.width), ctx);
    if (!encoder_.empty()) {
      HeadEnergies<T> energies{specs_, pattern_tensors(out.lengths, segs), {}};
      const auto mask = score_mask(out.batch, out.width, out.width, out.lengths, false);
      for (std::size_t l = 0; l < encoder_.size(); ++l) {
        const auto& layer = encoder_[l];
        energies.masked = head_mask_[l];
        const auto attended = multi_head_attention(layer.attention, x, x, out.batch, mask, energies, ctx);
        x = add_norm(x, attended, layer.norm1, ctx);
        x = add_norm(x, feed_forward_block(layer.ffn, x, ctx), layer.norm2, ctx);
      }
    }
    out.states = x;
    return out;
  }

  Tensor<T> decode_impl(const EncoderOutput<T>& memory, const std::vector<TokenId>& target_in, std::size_t width,
                        const std::vector<std::size_t>& lengths, const DropoutContext& ctx) const {
    const std::size_t batch = memory.batch;
    if (target_in.size() != batch * width || lengths.size() != batch) {
      throw ShapeError("decoder input of " + std::to_string(target_in.size()) + " ids for batch " +
                       std::to_string(batch) + " x width " + std::to_string(width));
    }
    if (width > config_.max_len) {
      throw LengthError("target length " + std::to_string(width) + " exceeds max_len " +
                        std::to_string(config_.max_len));
    }
    for (auto id : target_in) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.tgt_vocab) {
        throw InvalidInput("target token id " + std::to_string(id) + " outside vocabulary of " +
                           std::to_string(config_.tgt_vocab));
      }
    }
    auto y = apply_dropout(embed(tgt_embedding_, target_in, batch, width), ctx);
    const HeadEnergies<T> learned{std::vector<HeadSpec>(config_.n_heads), {}, {}};
    const auto self_mask = score_mask(batch, width, width, lengths, true);
    const auto cross_mask = score_mask(batch, width, memory.width, memory.lengths, false);
    for (const auto& layer : decoder_) {
      y = add_norm(y, multi_head_attention(layer.self_attention, y, y, batch, self_mask, learned, ctx), layer.norm1, ctx);
      y = add_norm(y, multi_head_attention(layer.cross_attention, y, memory.states, batch, cross_mask, learned, ctx),
                   layer.norm2, ctx);
      y = add_norm(y, feed_forward_block(layer.ffn, y, ctx), layer.norm3, ctx);
    }
    return linear(y, out_weight_, out_bias_);
  }

  ModelConfig config_;
  std::vector<HeadSpec> specs_;
  ParameterList<T> params_;
  Tensor<T> src_embedding_, tgt_embedding_;
  std::vector<EncoderLayer<T>> encoder_;
  std::vector<DecoderLayer<T>> decoder_;
  Tensor<T> out_weight_, out_bias_;
  std::vector<std::vector<char>> head_mask_;
  bool training_ = false;
  std::mt19937_64 dropout_rng_;
};

}  // namespace fixattn
