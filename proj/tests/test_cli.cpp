#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>
#include <string>
#include <vector>

#include "cem/cli.hpp"
#include "support.hpp"

namespace cem {
namespace {

using testing::read_file;
using testing::TempDir;
using testing::write_file;

struct CliResult {
  int status = 0;
  std::string out;
  std::string log;
};

CliResult run(const std::vector<std::string>& args, const std::string& stdin_text = "") {
  std::vector<const char*> argv{"cem"};
  for (const auto& a : args) argv.push_back(a.c_str());
  std::istringstream in(stdin_text);
  std::ostringstream out, log;
  CliResult r;
  r.status = run_cli(static_cast<int>(argv.size()), argv.data(), in, out, log);
  r.out = out.str();
  r.log = log.str();
  return r;
}

std::vector<std::string> error_lines(const std::string& log) {
  std::vector<std::string> lines;
  std::istringstream ss(log);
  std::string line;
  while (std::getline(ss, line))
    if (line.rfind("error: ", 0) == 0) lines.push_back(line);
  return lines;
}

// Small enough that a full train/evaluate cycle takes well under a second.
std::vector<std::string> tiny_flags(const TempDir& dir) {
  return {"--train", dir.file("data/train.jsonl"), "--valid", dir.file("data/valid.jsonl"),
          "--test",  dir.file("data/test.jsonl"),  "--knowledge-cache", dir.file("data/knowledge.jsonl"),
          "--d-model", "16", "--layers", "1", "--heads", "2", "--batch-size", "8", "--max-epochs", "1",
          "--max-knowledge-tokens", "12", "--max-context-tokens", "48", "--warmup", "4", "--lr-cap", "0.001",
          "--seed", "3"};
}

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

void make_corpus(const TempDir& dir) {
  auto r = run({"synth-data", "--out", dir.file("data"), "--synth-dialogues", "12", "--seed", "5"});
  ASSERT_EQ(r.status, 0) << r.log;
  r = run(with(tiny_flags(dir), {"precompute-knowledge", "--knowledge-provider", "synthetic"}));
  ASSERT_EQ(r.status, 0) << r.log;
}

TEST(Config, FlagOverridesFile) {
  TempDir dir("cli");
  write_file(dir.file("run.cfg"), "# model size\nd_model=300\nheads=4\n");
  RunConfig cfg = parse_config(dir.file("run.cfg"), {{"d_model", "64"}}, nullptr);
  EXPECT_EQ(cfg.d_model, 64);
  EXPECT_EQ(cfg.heads, 4);
  EXPECT_EQ(cfg.layers, RunConfig{}.layers);
}

TEST(Config, FlagOverridesFileThroughCommandLine) {
  TempDir dir("cli");
  write_file(dir.file("run.cfg"), "d_model=300\n");
  // The resolved config is echoed before the command runs, so it is visible
  // even though synth-data then fails for lack of --out.
  auto r = run({"synth-data", "--config", dir.file("run.cfg"), "--d-model=64"});
  EXPECT_NE(r.log.find("d_model=64\n"), std::string::npos) << r.log;
  EXPECT_EQ(r.log.find("d_model=300\n"), std::string::npos);
}

TEST(Config, EmptyFilePlusFlagsIsValid) {
  TempDir dir("cli");
  write_file(dir.file("empty.cfg"), "");
  std::vector<std::pair<std::string, std::string>> flags;
  for (const auto& k : config_schema()) flags.emplace_back(k.key, k.get(RunConfig{}));
  flags.emplace_back("fallback", "neutral");
  RunConfig cfg = parse_config(dir.file("empty.cfg"), flags, nullptr);
  EXPECT_EQ(cfg.fallback, "neutral");
  EXPECT_EQ(format_config(cfg), [] {
    RunConfig c;
    c.fallback = "neutral";
    return format_config(c);
  }());
}

TEST(Config, FormatRoundTripsThroughFile) {
  TempDir dir("cli");
  RunConfig c;
  c.d_model = 48;
  c.lr_cap = std::numeric_limits<double>::infinity();
  c.ablation = {"no-div"};
  c.allow_degenerate_frequencies = true;
  c.gamma3 = 0.25;
  write_file(dir.file("round.cfg"), format_config(c));
  EXPECT_EQ(format_config(parse_config(dir.file("round.cfg"), {}, nullptr)), format_config(c));
}

TEST(Config, MutuallyExclusiveAblationsAreUsageErrors) {
  EXPECT_THROW(parse_config("", {{"ablation", "no-aff"}, {"ablation", "no-cog"}}, nullptr), UsageError);
  auto r = run({"synth-data", "--ablation=no-aff", "--ablation=no-cog", "--out", "/nonexistent/never"});
  EXPECT_EQ(r.status, 2);
  auto errs = error_lines(r.log);
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_EQ(errs[0].rfind("error: usage: ", 0), 0u);
}

TEST(Config, FlagAblationsReplaceFileAblations) {
  TempDir dir("cli");
  write_file(dir.file("a.cfg"), "ablation=no-aff\n");
  RunConfig cfg = parse_config(dir.file("a.cfg"), {{"ablation", "no-cog"}}, nullptr);
  EXPECT_EQ(cfg.ablation, std::vector<std::string>{"no-cog"});
  EXPECT_THROW(parse_config(dir.file("a.cfg"), {{"ablation", "no-cog"}, {"ablation", "no-aff"}}, nullptr),
               UsageError);
}

TEST(Config, UnknownKeyNamesTheKey) {
  TempDir dir("cli");
  write_file(dir.file("bad.cfg"), "d_model=32\nhidden_size=64\n");
  try {
    parse_config(dir.file("bad.cfg"), {}, nullptr);
    FAIL() << "unknown key accepted";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("hidden_size"), std::string::npos);
  }
  auto r = run({"train", "--config", dir.file("bad.cfg")});
  EXPECT_EQ(r.status, 2);
  auto errs = error_lines(r.log);
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_NE(errs[0].find("hidden_size"), std::string::npos);
}

TEST(Config, UnknownFlagIsUsageError) {
  auto r = run({"train", "--hidden-size", "64"});
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(error_lines(r.log).size(), 1u);
}

TEST(Config, TypeMismatchNamesTheKey) {
  try {
    parse_config("", {{"d_model", "wide"}}, nullptr);
    FAIL() << "non-integer accepted";
  } catch (const UsageError& e) {
    EXPECT_NE(std::string(e.what()).find("d_model"), std::string::npos);
  }
  EXPECT_THROW(parse_config("", {{"gamma3", "1.5x"}}, nullptr), UsageError);
  EXPECT_THROW(parse_config("", {{"allow_degenerate_frequencies", "yes"}}, nullptr), UsageError);
  EXPECT_THROW(parse_config("", {{"fallback", "ignore"}}, nullptr), UsageError);
  TempDir dir("cli");
  write_file(dir.file("noeq.cfg"), "d_model 32\n");
  EXPECT_THROW(parse_config(dir.file("noeq.cfg"), {}, nullptr), UsageError);
  EXPECT_THROW(parse_config(dir.file("missing.cfg"), {}, nullptr), UsageError);
}

TEST(Config, KnowledgeUrlDefaultsToEnvironment) {
  EXPECT_EQ(parse_config("", {}, "http://127.0.0.1:9/infer").knowledge_url, "http://127.0.0.1:9/infer");
  EXPECT_EQ(parse_config("", {{"knowledge_url", "http://flag"}}, "http://env").knowledge_url, "http://flag");
  EXPECT_EQ(parse_config("", {}, nullptr).knowledge_url, "");

  ::setenv("CEM_KNOWLEDGE_URL", "http://from-env:1234/", 1);
  auto r = run({"synth-data"});
  ::unsetenv("CEM_KNOWLEDGE_URL");
  EXPECT_NE(r.log.find("knowledge_url=http://from-env:1234/\n"), std::string::npos) << r.log;
}

TEST(Help, EnumeratesEveryConfigKey) {
  auto r = run({"--help"});
  ASSERT_EQ(r.status, 0);
  for (const auto& k : config_schema()) {
    EXPECT_NE(r.out.find("--" + k.flag), std::string::npos) << k.flag;
    EXPECT_NE(r.out.find("[" + k.key + "]"), std::string::npos) << k.key;
  }
  for (const auto& c : cli_commands()) EXPECT_NE(r.out.find(c), std::string::npos) << c;
}

TEST(Help, BinaryHelpMatchesInProcessHelp) {
  TempDir dir("cli");
  std::string cmd = std::string(CEM_CLI_PATH) + " --help > " + dir.file("help.txt") + " 2>&1";
  ASSERT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_EQ(read_file(dir.file("help.txt")), run({"--help"}).out);
}

TEST(Commands, MissingCommandAndUnknownCommand) {
  EXPECT_EQ(run({}).status, 2);
  EXPECT_EQ(run({"serve"}).status, 2);
  auto r = run({"train"});
  EXPECT_EQ(r.status, 2);
  auto errs = error_lines(r.log);
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_NE(errs[0].find("--out"), std::string::npos);
}

TEST(Commands, PrepareDataConvertsCsv) {
  TempDir dir("cli");
  write_file(dir.file("raw.csv"),
             "conv_id,utterance_idx,context,prompt,speaker_idx,utterance,selfeval,tags\n"
             "hit:1_conv:2,2,proud,p,1,That is great_comma_ well done!,,\n"
             "hit:1_conv:2,1,proud,p,0,I won the race today.,,\n"
             "hit:3_conv:4,1,afraid,p,0,There is a noise downstairs.,,\n"
             "hit:3_conv:4,2,afraid,p,1,Call someone you trust.,,\n");
  auto r = run({"prepare-data", "--input", dir.file("raw.csv"), "--out", dir.file("out/dialogues.jsonl")});
  ASSERT_EQ(r.status, 0) << r.log;
  auto dialogues = load_dialogues(dir.file("out/dialogues.jsonl"), Split::train, EmotionSet::standard());
  ASSERT_EQ(dialogues.size(), 2u);
  EXPECT_EQ(dialogues[0].conv_id, "hit:1_conv:2");
  EXPECT_EQ(dialogues[0].emotion, "proud");
  ASSERT_EQ(dialogues[0].utterances.size(), 2u);
  EXPECT_EQ(dialogues[0].utterances[0].role, Role::speaker);
  EXPECT_EQ(dialogues[0].utterances[0].text, "I won the race today.");
  EXPECT_EQ(dialogues[0].utterances[1].text, "That is great, well done!");
}

TEST(Commands, PrepareDataRejectsMalformedCsv) {
  TempDir dir("cli");
  write_file(dir.file("raw.csv"), "conv_id,utterance_idx,context\nx,1,proud\n");
  auto r = run({"prepare-data", "--input", dir.file("raw.csv"), "--out", dir.file("d.jsonl")});
  EXPECT_EQ(r.status, 3);
  auto errs = error_lines(r.log);
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_EQ(errs[0].rfind("error: data: ", 0), 0u);
  EXPECT_NE(errs[0].find("utterance"), std::string::npos);
}

TEST(Commands, TrainWithoutCacheAndErrorFallbackExitsWithKnowledgeStatus) {
  TempDir dir("cli");
  ASSERT_EQ(run({"synth-data", "--out", dir.file("data"), "--synth-dialogues", "12"}).status, 0);
  auto r = run(with(tiny_flags(dir), {"train", "--out", dir.file("run"), "--fallback", "error"}));
  EXPECT_EQ(r.status, 4);
  auto errs = error_lines(r.log);
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_EQ(errs[0].rfind("error: knowledge: ", 0), 0u);

  // The same through the binary: status 4 and exactly one stderr error line.
  std::string cmd = std::string(CEM_CLI_PATH) + " train --out " + dir.file("run2") + " --train " +
                    dir.file("data/train.jsonl") + " --knowledge-cache " + dir.file("absent.jsonl") + " 2> " +
                    dir.file("stderr.txt");
  int raw = std::system(cmd.c_str());
  ASSERT_TRUE(WIFEXITED(raw));
  EXPECT_EQ(WEXITSTATUS(raw), 4);
  errs = error_lines(read_file(dir.file("stderr.txt")));
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_EQ(errs[0].rfind("error: knowledge: ", 0), 0u);
}

TEST(Commands, PartialCacheMissNamesTheKey) {
  TempDir dir("cli");
  make_corpus(dir);
  // Drop one record so the cache no longer covers the corpus.
  std::string cache = read_file(dir.file("data/knowledge.jsonl"));
  write_file(dir.file("data/knowledge.jsonl"), cache.substr(cache.find('\n') + 1));
  auto r = run(with(tiny_flags(dir), {"train", "--out", dir.file("run")}));
  EXPECT_EQ(r.status, 4);
  auto errs = error_lines(r.log);
  ASSERT_EQ(errs.size(), 1u);
  EXPECT_EQ(errs[0].rfind("error: knowledge: ", 0), 0u);
}

TEST(Commands, PrecomputeWithCacheFallbackFillsNeutralRecords) {
  TempDir dir("cli");
  ASSERT_EQ(run({"synth-data", "--out", dir.file("data"), "--synth-dialogues", "12"}).status, 0);
  auto r = run(with(tiny_flags(dir), {"precompute-knowledge", "--knowledge-provider", "cache", "--fallback",
                                      "neutral"}));
  ASSERT_EQ(r.status, 0) << r.log;
  KnowledgeCache cache = read_cache(dir.file("data/knowledge.jsonl"));
  EXPECT_FALSE(cache.empty());
  for (const auto& [key, b] : cache)
    for (const auto& inf : b.relations)
      for (const auto& s : inf) EXPECT_EQ(s, "none");
  // Rerunning finds nothing new and leaves the file unchanged.
  std::string before = read_file(dir.file("data/knowledge.jsonl"));
  r = run(with(tiny_flags(dir), {"precompute-knowledge", "--knowledge-provider", "cache", "--fallback", "error"}));
  ASSERT_EQ(r.status, 0) << r.log;
  EXPECT_NE(r.out.find("(0 new"), std::string::npos) << r.out;
  EXPECT_EQ(read_file(dir.file("data/knowledge.jsonl")), before);
}

TEST(Commands, PrecomputeRemoteWithoutUrlIsUsageError) {
  TempDir dir("cli");
  ASSERT_EQ(run({"synth-data", "--out", dir.file("data"), "--synth-dialogues", "12"}).status, 0);
  auto r = run(with(tiny_flags(dir), {"precompute-knowledge", "--knowledge-provider", "remote"}));
  EXPECT_EQ(r.status, 2);
  EXPECT_NE(r.log.find("knowledge-url"), std::string::npos);
}

TEST(Commands, TrainEvaluateGenerateAreByteReproducible) {
  TempDir a("cli"), b("cli");
  std::vector<std::string> reports{"train_report.json", "progress.jsonl", "eval_report.json", "trigrams.tsv",
                                   "responses.txt", "vocab.tsv", "frequencies.tsv"};
  std::vector<std::string> generated;
  for (TempDir* dir : {&a, &b}) {
    make_corpus(*dir);
    auto r = run(with(tiny_flags(*dir), {"train", "--out", dir->file("run")}));
    ASSERT_EQ(r.status, 0) << r.log;
    EXPECT_NE(r.log.find("progress {"), std::string::npos);
    r = run(with(tiny_flags(*dir), {"evaluate", "--out", dir->file("run"), "--checkpoint", dir->file("run/model.ckpt")}));
    ASSERT_EQ(r.status, 0) << r.log;
    EvalReport rep = read_report(dir->file("run/eval_report.json"));
    EXPECT_GT(rep.ppl, 1.0);
    EXPECT_EQ(r.out, rep.to_json().dump() + "\n");
    r = run(with(tiny_flags(*dir), {"generate", "--checkpoint", dir->file("run/model.ckpt"), "--input",
                                    dir->file("data/test.jsonl"), "--fallback", "neutral"}));
    ASSERT_EQ(r.status, 0) << r.log;
    generated.push_back(r.out);
  }
  for (const auto& name : reports) {
    std::string x = read_file(a.file("run/" + name));
    EXPECT_FALSE(x.empty()) << name;
    EXPECT_EQ(x, read_file(b.file("run/" + name))) << name;
  }
  EXPECT_EQ(generated[0], generated[1]);
  EXPECT_FALSE(generated[0].empty());
}

TEST(Commands, GenerateOnUntrainedCheckpointStaysWithinThirtyTokens) {
  TempDir dir("cli");
  make_corpus(dir);
  // One optimizer step: effectively untrained weights.
  auto r = run(with(tiny_flags(dir), {"train", "--out", dir.file("run"), "--max-steps", "1"}));
  ASSERT_EQ(r.status, 0) << r.log;
  std::string input = read_file(dir.file("data/train.jsonl"));
  std::size_t n_inputs = static_cast<std::size_t>(std::count(input.begin(), input.end(), '\n'));
  r = run(with(tiny_flags(dir), {"generate", "--checkpoint", dir.file("run/model.ckpt"), "--fallback", "neutral"}),
          input);
  ASSERT_EQ(r.status, 0) << r.log;
  std::istringstream lines(r.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    ++n;
    std::istringstream words(line);
    std::size_t tokens = 0;
    for (std::string w; words >> w;) ++tokens;
    EXPECT_LE(tokens, 30u) << line;
  }
  EXPECT_EQ(n, n_inputs);
}

TEST(Commands, GenerateWritesToFile) {
  TempDir dir("cli");
  make_corpus(dir);
  ASSERT_EQ(run(with(tiny_flags(dir), {"train", "--out", dir.file("run"), "--max-steps", "2"})).status, 0);
  auto to_stdout = run(with(tiny_flags(dir), {"generate", "--checkpoint", dir.file("run/model.ckpt"), "--input",
                                              dir.file("data/valid.jsonl"), "--fallback", "neutral"}));
  auto to_file = run(with(tiny_flags(dir), {"generate", "--checkpoint", dir.file("run/model.ckpt"), "--input",
                                            dir.file("data/valid.jsonl"), "--fallback", "neutral",
                                            "--out", dir.file("gen.txt")}));
  ASSERT_EQ(to_file.status, 0) << to_file.log;
  EXPECT_TRUE(to_file.out.empty());
  EXPECT_EQ(read_file(dir.file("gen.txt")), to_stdout.out);
}

TEST(Commands, EvaluateRejectsForeignVocabulary) {
  TempDir dir("cli");
  make_corpus(dir);
  ASSERT_EQ(run(with(tiny_flags(dir), {"train", "--out", dir.file("run"), "--max-steps", "1"})).status, 0);
  write_file(dir.file("other_vocab.tsv"), "[PAD]\t0\n[UNK]\t0\n");
  auto r = run(with(tiny_flags(dir), {"evaluate", "--out", dir.file("run"), "--checkpoint",
                                      dir.file("run/model.ckpt"), "--vocab", dir.file("other_vocab.tsv")}));
  EXPECT_NE(r.status, 0);
  EXPECT_EQ(error_lines(r.log).size(), 1u);
}

TEST(Commands, AblateWritesOneRowPerVariant) {
  TempDir dir("cli");
  make_corpus(dir);
  auto r = run(with(tiny_flags(dir), {"ablate", "--out", dir.file("abl"), "--variants", "full,no-aff,no-div"}));
  ASSERT_EQ(r.status, 0) << r.log;
  json table = json::parse(read_file(dir.file("abl/ablation.json")));
  ASSERT_TRUE(table.contains("rows"));
  ASSERT_EQ(table["rows"].size(), 3u);
  EXPECT_EQ(table["rows"][0]["name"], "full");
  EXPECT_EQ(table["rows"][2]["name"], "no-div");
  EXPECT_EQ(r.out.rfind("variant\tppl\tdist_1\tdist_2\tacc\n", 0), 0u);

  r = run(with(tiny_flags(dir), {"ablate", "--out", dir.file("abl2"), "--variants", "no-aff+no-cog"}));
  EXPECT_EQ(r.status, 2);
}

}  // namespace
}  // namespace cem
