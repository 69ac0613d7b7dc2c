#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixattn/cli.hpp"

using namespace fixattn;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "fixattn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

void spit(const fs::path& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("fixattn_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::vector<std::string> tiny_train(const fs::path& out, const std::string& heads, const std::string& seed = "4") {
  return {"train", "--task", "copy", "--heads", heads, "--d-model", "16", "--d-ff", "32", "--sentences", "60",
          "--test-sentences", "12", "--steps", "6", "--batch-tokens", "60", "--log-every", "3", "--dropout",
          "0.1", "--seed", seed, "--out", out.string()};
}

std::size_t checkpoint_weights(const fs::path& dir) {
  std::size_t total = 0;
  for (const auto& r : read_checkpoint((dir / "model.fxat").string())) {
    if (r.shape.size() == 2) total += r.values.size();
  }
  return total;
}

}  // namespace

TEST(Cli, ParamsReportsBaseShapeDeltas) {
  const auto r = invoke({"params", "--d-model", "512", "--d-ff", "2048", "--enc-layers", "6", "--dec-layers", "6"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("2752512"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("3145728"), std::string::npos) << r.out;  // 8L to 8Ftoken
  EXPECT_NE(r.out.find("7Fword+1L"), std::string::npos);
}

TEST(Cli, ParamsFromConfigFile) {
  const auto dir = scratch("params");
  spit(dir / "c.json", R"({"d_model": 16, "n_heads": 2, "enc_layers": 1, "dec_layers": 0,
        "enc_head_specs": [{"kind": "CurrentToken"}, {"kind": "Learned"}], "src_vocab": 10, "tgt_vocab": 10})");
  const auto r = invoke({"params", "--config", (dir / "c.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  Transformer<double> model(model_config_from_json(read_json_file((dir / "c.json").string())));
  std::size_t brute = 0;
  for (const auto& p : model.parameters()) brute += p.tensor.size();
  EXPECT_NE(r.out.find(std::to_string(brute)), std::string::npos) << r.out;
}

TEST(Cli, InvalidHeadSpecIsUsageError) {
  const auto dir = scratch("badheads");
  const auto r = invoke({"train", "--task", "copy", "--heads", "9F", "--out", dir.string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("{8L, 7Ftoken+1L, 7Fword+1L, 8Ftoken, 1L}"), std::string::npos) << r.err;
}

TEST(Cli, UnknownConfigFieldNamesItsPath) {
  const auto dir = scratch("badconfig");
  spit(dir / "c.json", R"({"model": {"d_model": 16, "n_layers": 3}})");
  const auto r = invoke({"train", "--config", (dir / "c.json").string(), "--out", (dir / "m").string()});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("config.model.n_layers"), std::string::npos) << r.err;
}

TEST(Cli, MissingArgumentsAndUnknownCommand) {
  EXPECT_EQ(invoke({}).code, 1);
  EXPECT_EQ(invoke({"frobnicate"}).code, 1);
  EXPECT_EQ(invoke({"translate", "--checkpoint", "/nonexistent"}).code, 1);
  EXPECT_EQ(invoke({"--help"}).code, 0);
}

TEST(Cli, DumpPatternsMatchesGoldens) {
  const std::string golden = FIXATTN_GOLDEN_DIR;
  auto r = invoke({"dump-patterns", "--kind", "PrevToken", "--length", "7"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, slurp(golden + "/prev_token_n7.csv"));
  r = invoke({"dump-patterns", "--kind", "LeftContext", "--length", "7"});
  EXPECT_EQ(r.out, slurp(golden + "/left_context_n7.csv"));
  r = invoke({"dump-patterns", "--kind", "CurrentToken", "--sentence", "a master of science fic@@ tion .",
           "--word-based"});
  EXPECT_EQ(r.out, slurp(golden + "/current_token_word_subwords.csv"));
  const auto dir = scratch("dump");
  r = invoke({"dump-patterns", "--kind", "LastToken", "--length", "1", "--out", (dir / "p.csv").string()});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(slurp(dir / "p.csv"), "1\n");
}

TEST(Cli, DumpPatternsErrors) {
  EXPECT_EQ(invoke({"dump-patterns", "--kind", "Learned", "--length", "3"}).code, 1);
  EXPECT_EQ(invoke({"dump-patterns", "--kind", "Diagonal", "--length", "3"}).code, 1);
  EXPECT_EQ(invoke({"dump-patterns", "--kind", "PrevToken", "--length", "0"}).code, 1);
  EXPECT_EQ(invoke({"dump-patterns", "--kind", "PrevToken", "--length", "3", "--format", "tsv"}).code, 1);
  EXPECT_EQ(invoke({"dump-patterns", "--kind", "PrevToken"}).code, 1);
}

TEST(Cli, TrainEvaluateAblateCompose) {
  const auto dir = scratch("compose");
  const auto model = dir / "m";
  auto r = invoke(tiny_train(model, "7Ftoken+1L"));
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"config.json", "model.fxat", "src.vocab", "tgt.vocab", "run.json", "train_log.csv",
                        "test.src", "test.tgt", "contrastive.tsv"}) {
    EXPECT_TRUE(fs::exists(model / f)) << f;
  }
  const auto log = slurp(model / "train_log.csv");
  EXPECT_EQ(log.substr(0, log.find('\n')), "step,loss,token_accuracy,seconds");
  EXPECT_EQ(std::count(log.begin(), log.end(), '\n'), 3);

  const auto src = (model / "test.src").string(), ref = (model / "test.tgt").string();
  r = invoke({"evaluate", "--checkpoint", model.string(), "--src", src, "--ref", ref, "--by-length", "--json",
           (dir / "eval.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("BLEU = ", 0), 0u) << r.out;
  const auto report = read_json_file((dir / "eval.json").string());
  EXPECT_TRUE(report.contains("bleu") && report.contains("precisions") && report.contains("bp") &&
              report.contains("buckets"));
  EXPECT_EQ(invoke({"evaluate", "--checkpoint", model.string(), "--src", src, "--ref", ref}).out,
            invoke({"evaluate", "--checkpoint", model.string(), "--src", src, "--ref", ref}).out);

  const auto first = invoke({"ablate", "--checkpoint", model.string(), "--src", src, "--ref", ref});
  const auto second = invoke({"ablate", "--checkpoint", model.string(), "--src", src, "--ref", ref});
  ASSERT_EQ(first.code, 0) << first.err;
  EXPECT_EQ(first.out, second.out);
  std::istringstream rows(first.out);
  std::string header, full;
  std::getline(rows, header);
  std::getline(rows, full);
  EXPECT_EQ(full.substr(0, 4), "full");
  EXPECT_EQ(full.substr(full.size() - 4), "0.00");
  EXPECT_EQ(std::count(first.out.begin(), first.out.end(), '\n'), 10);

  r = invoke({"score-contrastive", "--checkpoint", model.string(), "--fixture", (model / "contrastive.tsv").string(),
           "--by-attribute", "--json", (dir / "c.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("accuracy = ", 0), 0u);
  EXPECT_TRUE(read_json_file((dir / "c.json").string()).contains("accuracy"));
}

TEST(Cli, TranslateEdgeCases) {
  const auto dir = scratch("translate");
  const auto model = dir / "m";
  ASSERT_EQ(invoke(tiny_train(model, "8L")).code, 0);
  spit(dir / "empty.txt", "");
  auto r = invoke({"translate", "--checkpoint", model.string(), "--input", (dir / "empty.txt").string(), "--output",
                (dir / "out.txt").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir / "out.txt"), "");
  spit(dir / "unk.txt", "a zzz b\n\nqqq\n");
  r = invoke({"translate", "--checkpoint", model.string(), "--input", (dir / "unk.txt").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(std::count(r.out.begin(), r.out.end(), '\n'), 3);
}

TEST(Cli, TrainingIsReproducible) {
  const auto dir = scratch("repro");
  ASSERT_EQ(invoke(tiny_train(dir / "a", "7Ftoken+1L")).code, 0);
  ASSERT_EQ(invoke(tiny_train(dir / "b", "7Ftoken+1L")).code, 0);
  ASSERT_EQ(invoke(tiny_train(dir / "c", "7Ftoken+1L", "5")).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "model.fxat"), slurp(dir / "b" / "model.fxat"));
  EXPECT_NE(slurp(dir / "a" / "model.fxat"), slurp(dir / "c" / "model.fxat"));
}

TEST(Cli, FixedHeadsDropQueryKeyWeightsFromCheckpoint) {
  const auto dir = scratch("delta");
  ASSERT_EQ(invoke(tiny_train(dir / "l", "8L")).code, 0);
  ASSERT_EQ(invoke(tiny_train(dir / "f", "7Ftoken+1L")).code, 0);
  // 2 x d_model x d_k x enc_layers x 7 fixed heads
  EXPECT_EQ(checkpoint_weights(dir / "l") - checkpoint_weights(dir / "f"), 2u * 16 * 2 * 2 * 7);
}

TEST(Cli, DataErrorsExitWithTwo) {
  const auto dir = scratch("dataerr");
  spit(dir / "s", "a b\nc\n");
  spit(dir / "t", "a b\n");
  auto r = invoke({"train", "--train-src", (dir / "s").string(), "--train-tgt", (dir / "t").string(), "--steps", "1",
                "--out", (dir / "m").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("2 lines"), std::string::npos) << r.err;
  spit(dir / "t", "a b\n\xff\n");
  r = invoke({"train", "--train-src", (dir / "s").string(), "--train-tgt", (dir / "t").string(), "--steps", "1",
           "--out", (dir / "m").string()});
  EXPECT_EQ(r.code, 2);
}

TEST(Cli, TrainsFromFilesWithSubwordSplitting) {
  const auto dir = scratch("files");
  spit(dir / "s", "the extraordinary cat\nscience fiction\na cat\n");
  spit(dir / "t", "die katze\nwissenschaft\neine katze\n");
  const auto model = dir / "m";
  auto r = invoke({"train", "--train-src", (dir / "s").string(), "--train-tgt", (dir / "t").string(), "--heads",
                "7Fword+1L", "--d-model", "16", "--d-ff", "16", "--steps", "3", "--subword-split", "--out",
                model.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_FALSE(fs::exists(model / "test.src"));
  r = invoke({"translate", "--checkpoint", model.string(), "--input", (dir / "s").string()});
  EXPECT_EQ(r.code, 0) << r.err;
}

TEST(Cli, DivergenceExitsWithThreeAndNamesStep) {
  const auto dir = scratch("diverge");
  auto args = tiny_train(dir / "m", "8L");
  args.insert(args.end(), {"--lr", "1e300"});
  const auto r = invoke(args);
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(r.err.find("step"), std::string::npos) << r.err;
}
