#pragma once

// JSON form of ModelConfig and the on-disk layout of a trained model:
//
//   DIR/config.json   model configuration
//   DIR/model.fxat    parameters (see checkpoint.hpp)
//   DIR/src.vocab     source vocabulary, one token per line after reserved ids
//   DIR/tgt.vocab     target vocabulary

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "json.hpp"

#include "fixattn/checkpoint.hpp"
#include "fixattn/data.hpp"
#include "fixattn/error.hpp"
#include "fixattn/model.hpp"

namespace fixattn {

using Json = nlohmann::json;

inline Json to_json(const HeadSpec& spec) {
  return Json{{"kind", std::string(to_string(spec.kind))}, {"word_based", spec.word_based}};
}

inline Json to_json(const ModelConfig& c) {
  Json specs = Json::array();
  for (const auto& s : c.head_specs()) specs.push_back(to_json(s));
  return Json{{"d_model", c.d_model},     {"n_heads", c.n_heads},       {"d_ff", c.d_ff},
              {"enc_layers", c.enc_layers}, {"dec_layers", c.dec_layers}, {"enc_head_specs", specs},
              {"dropout", c.dropout},     {"max_len", c.max_len},       {"seed", c.seed},
              {"src_vocab", c.src_vocab}, {"tgt_vocab", c.tgt_vocab}};
}

namespace detail {

inline void reject_unknown(const Json& j, const std::set<std::string>& known, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& item : j.items()) {
    if (!known.contains(item.key())) throw ConfigError(path + "." + item.key() + ": unknown field");
  }
}

template <class V>
void read_field(const Json& j, const char* key, V& out, const std::string& path) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(path + "." + key + ": wrong type (" + j.at(key).dump() + ")");
  }
}

}  // namespace detail

// Fields absent from the document keep the values already in `config`.
inline ModelConfig model_config_from_json(const Json& j, ModelConfig config = {},
                                          const std::string& path = "model") {
  detail::reject_unknown(j, {"d_model", "n_heads", "d_ff", "enc_layers", "dec_layers", "enc_head_specs",
                             "dropout", "max_len", "seed", "src_vocab", "tgt_vocab"},
                         path);
  detail::read_field(j, "d_model", config.d_model, path);
  detail::read_field(j, "n_heads", config.n_heads, path);
  detail::read_field(j, "d_ff", config.d_ff, path);
  detail::read_field(j, "enc_layers", config.enc_layers, path);
  detail::read_field(j, "dec_layers", config.dec_layers, path);
  detail::read_field(j, "dropout", config.dropout, path);
  detail::read_field(j, "max_len", config.max_len, path);
  detail::read_field(j, "seed", config.seed, path);
  detail::read_field(j, "src_vocab", config.src_vocab, path);
  detail::read_field(j, "tgt_vocab", config.tgt_vocab, path);
  if (j.contains("enc_head_specs")) {
    const auto& specs = j.at("enc_head_specs");
    const auto spec_path = path + ".enc_head_specs";
    if (specs.is_string()) {
      try {
        config.apply_shorthand(specs.get<std::string>());
      } catch (const UsageError& e) {
        throw ConfigError(spec_path + ": " + e.what());
      }
    } else if (specs.is_array()) {
      config.enc_head_specs.clear();
      for (std::size_t k = 0; k < specs.size(); ++k) {
        const auto item_path = spec_path + "[" + std::to_string(k) + "]";
        detail::reject_unknown(specs[k], {"kind", "word_based"}, item_path);
        HeadSpec spec;
        std::string kind = "Learned";
        detail::read_field(specs[k], "kind", kind, item_path);
        detail::read_field(specs[k], "word_based", spec.word_based, item_path);
        try {
          spec.kind = parse_pattern_kind(kind);
        } catch (const UsageError& e) {
          throw ConfigError(item_path + ".kind: " + e.what());
        }
        config.enc_head_specs.push_back(spec);
      }
    } else {
      throw ConfigError(spec_path + ": expected a shorthand string or an array of head specs");
    }
  }
  return config;
}

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("'" + path + "' is not valid JSON: " + e.what());
  }
}

inline void write_json_file(const std::string& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

struct ModelFiles {
  std::filesystem::path dir;

  std::string config() const { return (dir / "config.json").string(); }
  std::string checkpoint() const { return (dir / "model.fxat").string(); }
  std::string source_vocab() const { return (dir / "src.vocab").string(); }
  std::string target_vocab() const { return (dir / "tgt.vocab").string(); }
};

template <class T>
void save_model(const ModelFiles& files, const Transformer<T>& model, const Vocabulary& src_vocab,
                const Vocabulary& tgt_vocab) {
  std::filesystem::create_directories(files.dir);
  write_json_file(files.config(), to_json(model.config()));
  write_checkpoint(files.checkpoint(), to_records(model.parameters()));
  src_vocab.save(files.source_vocab());
  tgt_vocab.save(files.target_vocab());
}

struct LoadedModel {
  Transformer<double> model;
  Vocabulary source_vocab;
  Vocabulary target_vocab;
};

inline LoadedModel load_model(const ModelFiles& files) {
  auto config = model_config_from_json(read_json_file(files.config()));
  auto src = Vocabulary::load(files.source_vocab());
  auto tgt = Vocabulary::load(files.target_vocab());
  if (src.size() != config.src_vocab || tgt.size() != config.tgt_vocab) {
    throw ConfigError("vocabulary files (" + std::to_string(src.size()) + ", " + std::to_string(tgt.size()) +
                      " entries) do not match config.json (" + std::to_string(config.src_vocab) + ", " +
                      std::to_string(config.tgt_vocab) + ")");
  }
  Transformer<double> model(config);
  assign_records(model.parameters(), read_checkpoint(files.checkpoint()));
  return {std::move(model), std::move(src), std::move(tgt)};
}

}  // namespace fixattn
