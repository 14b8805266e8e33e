#pragma once

// The `cem` command line: data preparation, knowledge precomputation,
// training, evaluation, generation, ablations, and synthetic data.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cem/batch.hpp"
#include "cem/config.hpp"
#include "cem/corpus.hpp"
#include "cem/errors.hpp"
#include "cem/eval.hpp"
#include "cem/knowledge.hpp"
#include "cem/model.hpp"
#include "cem/objective.hpp"
#include "cem/synthetic.hpp"
#include "cem/trainer.hpp"

namespace cem {

inline const std::vector<std::string>& cli_commands() {
  static const std::vector<std::string> c{"prepare-data", "precompute-knowledge", "train", "evaluate",
                                          "generate",     "ablate",               "synth-data"};
  return c;
}

namespace cli {

namespace fs = std::filesystem;

struct Streams {
  std::istream& in;
  std::ostream& out;
  std::ostream& log;
};

inline std::string require_key(const std::string& value, const std::string& flag) {
  if (value.empty()) throw UsageError("--" + flag + " is required for this command");
  return value;
}

inline fs::path out_dir(const RunConfig& cfg) {
  fs::path d = require_key(cfg.out, "out");
  fs::create_directories(d);
  return d;
}

inline EmotionSet emotions_for(const RunConfig& cfg) {
  return cfg.emotions_path.empty() ? EmotionSet::standard() : EmotionSet::load(cfg.emotions_path);
}

inline KnowledgeCache load_cache_for(const RunConfig& cfg) {
  Fallback fb = fallback_from_name(cfg.fallback);
  if (cfg.knowledge_cache.empty() || !fs::exists(cfg.knowledge_cache)) {
    if (fb == Fallback::error)
      throw KnowledgeError("no knowledge cache" +
                           (cfg.knowledge_cache.empty() ? std::string(" given") : " at " + cfg.knowledge_cache) +
                           " and fallback is 'error'");
    return {};
  }
  return read_cache(cfg.knowledge_cache);
}

inline CacheProvider cache_provider_for(const RunConfig& cfg) {
  return CacheProvider(load_cache_for(cfg), fallback_from_name(cfg.fallback), cfg.neutral_inference);
}

inline EncodeOptions encode_options(const RunConfig& cfg) { return {cfg.max_context_tokens, cfg.max_knowledge_tokens}; }

inline std::vector<Example> examples_from(const RunConfig& cfg, const std::string& path, Split split,
                                          const Vocabulary& vocab, KnowledgeProvider& provider,
                                          const EmotionSet& emotions) {
  return build_examples(load_dialogues(path, split, emotions), vocab, provider, encode_options(cfg), emotions);
}

inline Variant variant_from_name(const std::string& name) {
  std::vector<std::string> flags;
  std::stringstream ss(name);
  std::string part;
  while (std::getline(ss, part, '+')) flags.push_back(part);
  return parse_ablations(flags);
}

// Vocabulary next to the checkpoint unless given explicitly.
inline std::string vocab_path_for(const RunConfig& cfg, const std::string& checkpoint) {
  if (!cfg.vocab_path.empty()) return cfg.vocab_path;
  return (fs::path(checkpoint).parent_path() / "vocab.tsv").string();
}

inline std::string checkpoint_for(const RunConfig& cfg) {
  if (!cfg.checkpoint.empty()) return cfg.checkpoint;
  return (fs::path(require_key(cfg.out, "out")) / "model.ckpt").string();
}

struct LoadedModel {
  Vocabulary vocab;
  Checkpoint checkpoint;
  std::unique_ptr<CemModel> model;
};

inline LoadedModel load_model(const RunConfig& cfg) {
  LoadedModel lm;
  std::string ck = checkpoint_for(cfg);
  lm.vocab = Vocabulary::load(vocab_path_for(cfg, ck));
  lm.checkpoint = read_checkpoint(ck, lm.vocab.hash());
  ModelConfig mc = lm.checkpoint.config;
  mc.max_decode_steps = cfg.max_decode_steps;
  lm.model = std::make_unique<CemModel>(mc, 0);
  assign_parameters(*lm.model, lm.checkpoint.names, lm.checkpoint.values);
  return lm;
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_synth_data(const RunConfig& cfg, Streams& s) {
  fs::path dir = out_dir(cfg);
  EmotionSet emotions = emotions_for(cfg);
  auto all = generate_synthetic_corpus(cfg.synth_dialogues, cfg.synth_emotions, cfg.seed, emotions);
  // 8:1:1 by position; the generator already shuffled.
  const std::size_t n = all.size();
  const std::size_t n_train = std::max<std::size_t>(1, n * 8 / 10);
  const std::size_t n_valid = n >= 3 ? std::max<std::size_t>(1, n / 10) : 0;
  std::vector<Dialogue> train(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<Dialogue> valid(all.begin() + static_cast<std::ptrdiff_t>(n_train),
                              all.begin() + static_cast<std::ptrdiff_t>(std::min(n, n_train + n_valid)));
  std::vector<Dialogue> test(all.begin() + static_cast<std::ptrdiff_t>(std::min(n, n_train + n_valid)), all.end());
  write_dialogues((dir / "train.jsonl").string(), train);
  write_dialogues((dir / "valid.jsonl").string(), valid);
  write_dialogues((dir / "test.jsonl").string(), test);
  s.out << "wrote " << train.size() << " train, " << valid.size() << " valid, " << test.size()
        << " test dialogues to " << dir.string() << '\n';
}

inline void cmd_prepare_data(const RunConfig& cfg, Streams& s) {
  std::string input = require_key(cfg.input_path, "input");
  std::string output = require_key(cfg.out, "out");
  std::ifstream in(input);
  if (!in) throw DataError("cannot open " + input);
  auto dialogues = read_empathetic_csv(in, input, emotions_for(cfg));
  if (fs::path(output).has_parent_path()) fs::create_directories(fs::path(output).parent_path());
  write_dialogues(output, dialogues);
  s.out << "wrote " << dialogues.size() << " dialogues to " << output << '\n';
}

inline void cmd_precompute_knowledge(const RunConfig& cfg, Streams& s) {
  std::string cache_path = require_key(cfg.knowledge_cache, "knowledge-cache");
  EmotionSet emotions = emotions_for(cfg);
  std::vector<KnowledgeQuery> queries;
  std::set<KnowledgeKey> seen;
  bool any = false;
  for (auto [path, split] : {std::pair{cfg.train_path, Split::train}, std::pair{cfg.valid_path, Split::valid},
                             std::pair{cfg.test_path, Split::test}}) {
    if (path.empty()) continue;
    any = true;
    for (auto& q : knowledge_queries(load_dialogues(path, split, emotions)))
      if (seen.insert(q.key).second) queries.push_back(std::move(q));
  }
  if (!any) throw UsageError("precompute-knowledge needs at least one of --train, --valid, --test");

  KnowledgeCache cache;
  if (fs::exists(cache_path)) cache = read_cache(cache_path);
  std::vector<KnowledgeQuery> missing;
  for (const auto& q : queries)
    if (!cache.count(q.key)) missing.push_back(q);

  std::string source = cfg.knowledge_provider;
  if (source == "auto") source = cfg.knowledge_url.empty() ? "cache" : "remote";
  std::vector<CommonsenseBundle> fetched;
  if (source == "remote") {
    RemoteConfig rc{require_key(cfg.knowledge_url, "knowledge-url"), cfg.knowledge_timeout, cfg.knowledge_retries};
    fetched = fetch_bundles(missing, [&] { return std::make_unique<RemoteProvider>(rc); }, cfg.max_in_flight);
  } else if (source == "synthetic") {
    fetched = fetch_bundles(missing, [&] { return std::make_unique<SyntheticProvider>(emotions); }, 1);
  } else if (source == "cache") {
    CacheProvider provider(cache, fallback_from_name(cfg.fallback), cfg.neutral_inference);
    for (const auto& q : missing) fetched.push_back(provider.bundle(q));
  } else {
    throw UsageError("knowledge-provider must be auto, remote, synthetic or cache, got '" + source + "'");
  }
  for (auto& b : fetched) cache.emplace(b.key, std::move(b));
  if (fs::path(cache_path).has_parent_path()) fs::create_directories(fs::path(cache_path).parent_path());
  std::size_t n = write_cache(cache, cache_path);
  s.out << "knowledge cache " << cache_path << ": " << n << " records (" << missing.size() << " new via "
        << source << ")\n";
}

inline json train_report_json(const TrainReport& r) {
  json rounds = json::array();
  for (const auto& rec : r.rounds) {
    json j = rec.progress();
    j["train_total"] = rec.train.total;
    rounds.push_back(j);
  }
  return json{{"rounds", rounds},
              {"best_epoch", r.best_epoch},
              {"best_valid_total", std::isfinite(r.best_valid_total) ? json(r.best_valid_total) : json(nullptr)},
              {"stop_reason", r.stop_reason},
              {"steps", r.steps}};
}

inline void cmd_train(const RunConfig& cfg, Streams& s) {
  fs::path dir = out_dir(cfg);
  EmotionSet emotions = emotions_for(cfg);
  auto train_dialogues = load_dialogues(require_key(cfg.train_path, "train"), Split::train, emotions);
  Vocabulary vocab = !cfg.vocab_path.empty() && fs::exists(cfg.vocab_path) ? Vocabulary::load(cfg.vocab_path)
                                                                            : build_vocabulary(train_dialogues, cfg.min_freq);
  CacheProvider provider = cache_provider_for(cfg);
  auto train_set = build_examples(train_dialogues, vocab, provider, encode_options(cfg), emotions);
  std::vector<Example> valid_set;
  if (!cfg.valid_path.empty()) valid_set = examples_from(cfg, cfg.valid_path, Split::valid, vocab, provider, emotions);
  if (train_set.empty()) throw DataError("training split has no listener turns");

  FrequencyTable freq = compute_frequency_table(train_set, vocab, cfg.allow_degenerate_frequencies);
  ModelConfig mc = cfg.model_config(vocab.size(), emotions.size());
  CemModel model(mc, cfg.seed);
  if (!cfg.embeddings_path.empty()) {
    int n = load_pretrained_embeddings(model, vocab, cfg.embeddings_path);
    s.log << "initialized " << n << " embeddings from " << cfg.embeddings_path << '\n';
  }
  TrainConfig tc = cfg.train_config();
  tc.checkpoint_path = checkpoint_for(cfg);
  vocab.save((dir / "vocab.tsv").string());
  save_frequency_table(freq, (dir / "frequencies.tsv").string());
  write_text(dir / "run_config.txt", format_config(cfg));

  Trainer trainer(model, tc, &freq, vocab.hash());
  trainer.set_checkpoint_meta(json{{"train", tc.to_json()}, {"train_data", hex64(hash_examples(train_set))}});
  std::ofstream progress(dir / "progress.jsonl");
  TrainHooks hooks;
  hooks.progress = &progress;
  hooks.on_round = [&](const RoundRecord& r) { s.log << "progress " << r.progress().dump() << '\n'; };
  TrainReport rep = trainer.train(train_set, valid_set, hooks);
  write_text(dir / "train_report.json", train_report_json(rep).dump(2) + "\n");
  s.out << "trained " << rep.steps << " steps (" << rep.stop_reason << "), checkpoint " << tc.checkpoint_path << '\n';
}

inline std::string fingerprint_for(const LoadedModel& lm, const std::vector<Example>& test) {
  json train = lm.checkpoint.meta.value("train", json::object());
  std::string train_hash = lm.checkpoint.meta.value("train_data", std::string());
  json j{{"model", lm.checkpoint.config.to_json()},
         {"train", train},
         {"data", json::array({train_hash, hex64(hash_examples(test))})}};
  return hex64(fnv1a(j.dump()));
}

inline std::vector<std::vector<std::string>> decode_all(const Vocabulary& vocab,
                                                        const std::vector<std::vector<int>>& ids) {
  std::vector<std::vector<std::string>> out;
  for (const auto& r : ids) out.push_back(vocab.decode(r));
  return out;
}

inline void cmd_evaluate(const RunConfig& cfg, Streams& s) {
  fs::path dir = out_dir(cfg);
  EmotionSet emotions = emotions_for(cfg);
  LoadedModel lm = load_model(cfg);
  CacheProvider provider = cache_provider_for(cfg);
  auto test = examples_from(cfg, require_key(cfg.test_path, "test"), Split::test, lm.vocab, provider, emotions);
  if (test.empty()) throw DataError("test split has no listener turns");
  std::vector<std::vector<int>> responses;
  EvalReport rep = evaluate_model(*lm.model, test, fingerprint_for(lm, test), cfg.batch_size, &responses);
  write_report(rep, (dir / "eval_report.json").string());
  auto tokens = decode_all(lm.vocab, responses);
  write_text(dir / "trigrams.tsv", format_trigram_report(trigram_report(tokens, cfg.trigram_top_k)));
  std::string lines;
  for (const auto& r : tokens) lines += join(r) + "\n";
  write_text(dir / "responses.txt", lines);
  s.out << rep.to_json().dump() << '\n';
}

inline void cmd_generate(const RunConfig& cfg, Streams& s) {
  EmotionSet emotions = emotions_for(cfg);
  LoadedModel lm = load_model(cfg);
  CacheProvider provider = cache_provider_for(cfg);
  std::vector<Dialogue> dialogues;
  if (cfg.input_path.empty() || cfg.input_path == "-") {
    dialogues = parse_dialogues(s.in, "<stdin>", emotions);
  } else {
    std::ifstream in(cfg.input_path);
    if (!in) throw DataError("cannot open " + cfg.input_path);
    dialogues = parse_dialogues(in, cfg.input_path, emotions);
  }
  std::ofstream file;
  std::ostream* out = &s.out;
  if (!cfg.out.empty() && cfg.out != "-") {
    file.open(cfg.out, std::ios::binary);
    if (!file) throw DataError("cannot write " + cfg.out);
    out = &file;
  }
  for (const auto& d : dialogues) {
    const int n = static_cast<int>(d.utterances.size());
    ContextSequence ctx = encode_history(d, n, lm.vocab, cfg.max_context_tokens, emotions);
    KnowledgeQuery q{{d.conv_id, n - 1}, d.utterances.back().text};
    KnowledgeSequences ks = assemble_bundle(provider.bundle(q), lm.vocab, cfg.max_knowledge_tokens);
    *out << join(lm.vocab.decode(lm.model->generate(ctx, ks))) << '\n';
  }
}

inline void cmd_ablate(const RunConfig& cfg, Streams& s) {
  fs::path dir = out_dir(cfg);
  EmotionSet emotions = emotions_for(cfg);
  auto train_dialogues = load_dialogues(require_key(cfg.train_path, "train"), Split::train, emotions);
  Vocabulary vocab = build_vocabulary(train_dialogues, cfg.min_freq);
  CacheProvider provider = cache_provider_for(cfg);
  auto train_set = build_examples(train_dialogues, vocab, provider, encode_options(cfg), emotions);
  std::vector<Example> valid_set;
  if (!cfg.valid_path.empty()) valid_set = examples_from(cfg, cfg.valid_path, Split::valid, vocab, provider, emotions);
  auto test_set = examples_from(cfg, require_key(cfg.test_path, "test"), Split::test, vocab, provider, emotions);
  FrequencyTable freq = compute_frequency_table(train_set, vocab, cfg.allow_degenerate_frequencies);

  std::vector<std::pair<std::string, Variant>> variants;
  for (const auto& name : cfg.variants) variants.emplace_back(name, variant_from_name(name));
  ModelConfig base = cfg.model_config(vocab.size(), emotions.size());
  AblationData data{&train_set, valid_set.empty() ? nullptr : &valid_set, &test_set, &freq, vocab.hash()};
  TrainHooks hooks;
  hooks.on_round = [&](const RoundRecord& r) { s.log << "progress " << r.progress().dump() << '\n'; };
  AblationTable table = ablation_compare(variants, base, cfg.train_config(), data, cfg.seed, hooks);
  write_text(dir / "ablation.json", table.to_json().dump(2) + "\n");
  auto cell = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("-"); };
  s.out << "variant\tppl\tdist_1\tdist_2\tacc\n";
  for (const auto& r : table.rows)
    s.out << r.name << '\t' << format_double(r.report.ppl) << '\t' << cell(r.report.dist_1) << '\t'
          << cell(r.report.dist_2) << '\t' << cell(r.report.emotion_accuracy) << '\n';
}

inline void dispatch(const std::string& command, const RunConfig& cfg, Streams& s) {
  if (command == "synth-data") return cmd_synth_data(cfg, s);
  if (command == "prepare-data") return cmd_prepare_data(cfg, s);
  if (command == "precompute-knowledge") return cmd_precompute_knowledge(cfg, s);
  if (command == "train") return cmd_train(cfg, s);
  if (command == "evaluate") return cmd_evaluate(cfg, s);
  if (command == "generate") return cmd_generate(cfg, s);
  if (command == "ablate") return cmd_ablate(cfg, s);
  throw UsageError("unknown command '" + command + "'");
}

inline std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

}  // namespace cli

// Full command-line entry point; returns the process exit status.
inline int run_cli(int argc, const char* const* argv, std::istream& in = std::cin, std::ostream& out = std::cout,
                   std::ostream& log = std::cerr) {
  CLI::App app{"Commonsense-aware empathetic response generation.\n"
               "Commands: prepare-data, precompute-knowledge, train, evaluate, generate, ablate, synth-data.\n"
               "Flags override --config file entries, which override defaults. Config files hold flat\n"
               "key=value lines using the key names shown in brackets.",
               "cem"};
  app.get_formatter()->column_width(40);
  std::string command;
  std::string config_file;
  app.add_option("command", command, "command to run")->check(CLI::IsMember(cli_commands()));
  app.add_option("--config", config_file, "flat key=value config file");

  std::map<std::string, std::string> raw;
  std::vector<std::string> ablations;
  std::vector<std::pair<std::string, CLI::Option*>> options;
  for (const auto& k : config_schema()) {
    std::string help = k.help + " [" + k.key + "]";
    CLI::Option* opt = nullptr;
    if (k.key == "ablation") {
      opt = app.add_option("--" + k.flag, ablations, help)->allow_extra_args(false)->take_all();
    } else {
      opt = app.add_option("--" + k.flag, raw[k.key], help);
    }
    switch (k.kind) {
      case ValueKind::integer: opt->type_name("INT"); break;
      case ValueKind::real: opt->type_name("NUM"); break;
      case ValueKind::boolean: opt->type_name("BOOL"); break;
      case ValueKind::list: opt->type_name("LIST"); break;
      case ValueKind::text: opt->type_name("TEXT"); break;
    }
    options.emplace_back(k.key, opt);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    log << "error: usage: " << cli::one_line(e.what()) << '\n';
    return static_cast<int>(ErrorKind::usage);
  }
  if (command.empty()) {
    log << "error: usage: a command is required (see --help)\n";
    return static_cast<int>(ErrorKind::usage);
  }

  try {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& [key, opt] : options) {
      if (opt->count() == 0) continue;
      if (key == "ablation") {
        for (const auto& a : ablations) overrides.emplace_back(key, a);
      } else {
        overrides.emplace_back(key, raw[key]);
      }
    }
    RunConfig cfg = parse_config(config_file, overrides);
    log << "resolved config (" << command << "):\n" << format_config(cfg);
    cli::Streams s{in, out, log};
    cli::dispatch(command, cfg, s);
    return 0;
  } catch (const Error& e) {
    log << "error: " << error_kind_name(e.kind()) << ": " << cli::one_line(e.what()) << '\n';
    return static_cast<int>(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    log << "error: data: " << cli::one_line(e.what()) << '\n';
    return static_cast<int>(ErrorKind::data);
  } catch (const nlohmann::json::exception& e) {
    log << "error: data: " << cli::one_line(e.what()) << '\n';
    return static_cast<int>(ErrorKind::data);
  }
}

}  // namespace cem
