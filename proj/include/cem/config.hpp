#pragma once

// RunConfig: every setting a command can read, its flag spelling, and the
// flat key=value file format. Precedence is flags > file > defaults.

#include <charconv>
#include <cstdlib>
#include <limits>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cem/errors.hpp"
#include "cem/model.hpp"
#include "cem/objective.hpp"
#include "cem/text.hpp"
#include "cem/trainer.hpp"

namespace cem {

struct RunConfig {
  // data
  std::string train_path;
  std::string valid_path;
  std::string test_path;
  std::string input_path;
  std::string out;
  std::string vocab_path;
  std::string emotions_path;
  std::string embeddings_path;
  int min_freq = 1;
  int max_context_tokens = 256;
  int max_knowledge_tokens = 64;
  // knowledge
  std::string knowledge_cache;
  std::string knowledge_url;
  std::string knowledge_provider = "auto";
  std::string fallback = "error";
  std::string neutral_inference = "none";
  double knowledge_timeout = 10.0;
  int knowledge_retries = 2;
  int max_in_flight = 4;
  // model
  int d_model = 300;
  int layers = 1;
  int heads = 2;
  int ffn_dim = 0;
  double dropout = 0.1;
  int max_decode_steps = 30;
  std::vector<std::string> ablation;
  std::vector<std::string> variants{"full", "no-aff", "no-cog", "no-div", "vanilla", "multitask"};
  // training
  std::uint64_t seed = 0;
  int batch_size = 16;
  int warmup = 8000;
  double lr_cap = 1e-4;
  double gamma1 = 1.0;
  double gamma2 = 1.0;
  double gamma3 = 1.5;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  int max_epochs = 50;
  long max_steps = 0;
  int patience = 3;
  double clip_norm = 1.0;
  bool allow_degenerate_frequencies = false;
  // evaluation and synthetic data
  std::string checkpoint;
  int trigram_top_k = 10;
  int synth_dialogues = 64;
  int synth_emotions = 8;

  ModelConfig model_config(int vocab_size, int n_emotions) const {
    ModelConfig c;
    c.vocab_size = vocab_size;
    c.d_model = d_model;
    c.n_layers = layers;
    c.n_heads = heads;
    c.ffn_dim = ffn_dim;
    c.n_emotions = n_emotions;
    c.dropout = dropout;
    c.max_decode_steps = max_decode_steps;
    c.variant = parse_ablations(ablation);
    return c;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.beta1 = beta1;
    t.beta2 = beta2;
    t.adam_eps = adam_eps;
    t.lr_cap = lr_cap;
    t.warmup = warmup;
    t.batch_size = batch_size;
    t.max_epochs = max_epochs;
    t.max_steps = max_steps;
    t.patience = patience;
    t.seed = seed;
    t.gamma = {gamma1, gamma2, gamma3};
    t.clip_norm = clip_norm;
    return t;
  }
};

enum class ValueKind { integer, real, text, list, boolean };

struct KeySpec {
  std::string key;
  std::string flag;  // without leading dashes
  ValueKind kind;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

namespace detail {

template <typename T>
T parse_integer(const std::string& key, const std::string& v) {
  T out{};
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw UsageError("key '" + key + "' expects an integer, got '" + v + "'");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  if (v == "inf") return std::numeric_limits<double>::infinity();
  double out = 0.0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw UsageError("key '" + key + "' expects a number, got '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw UsageError("key '" + key + "' expects true or false, got '" + v + "'");
}

inline std::vector<std::string> parse_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string join_list(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

}  // namespace detail

#define CEM_INT_KEY(name, flag, help)                                                                  \
  KeySpec{#name, flag, ValueKind::integer, help,                                                       \
          [](RunConfig& c, const std::string& v) { c.name = detail::parse_integer<decltype(c.name)>(#name, v); }, \
          [](const RunConfig& c) { return std::to_string(c.name); }}
#define CEM_REAL_KEY(name, flag, help)                                                                   \
  KeySpec{#name, flag, ValueKind::real, help,                                                            \
          [](RunConfig& c, const std::string& v) { c.name = detail::parse_real(#name, v); },             \
          [](const RunConfig& c) { return format_double(c.name); }}
#define CEM_TEXT_KEY(name, flag, help)                                                                   \
  KeySpec{#name, flag, ValueKind::text, help, [](RunConfig& c, const std::string& v) { c.name = v; },     \
          [](const RunConfig& c) { return c.name; }}

inline const std::vector<KeySpec>& config_schema() {
  static const std::vector<KeySpec> schema{
      CEM_TEXT_KEY(train_path, "train", "training dialogues (.jsonl)"),
      CEM_TEXT_KEY(valid_path, "valid", "validation dialogues (.jsonl)"),
      CEM_TEXT_KEY(test_path, "test", "test dialogues (.jsonl)"),
      CEM_TEXT_KEY(input_path, "input", "command input: CSV for prepare-data, dialogues for generate (default stdin)"),
      CEM_TEXT_KEY(out, "out", "output directory, or output file for prepare-data and generate"),
      CEM_TEXT_KEY(vocab_path, "vocab", "vocabulary file (default <out>/vocab.tsv or next to the checkpoint)"),
      CEM_TEXT_KEY(emotions_path, "emotions", "emotion label list (default: bundled 32 labels)"),
      CEM_TEXT_KEY(embeddings_path, "embeddings", "optional pretrained word vectors, one 'word v1 .. vd' per line"),
      CEM_INT_KEY(min_freq, "min-freq", "minimum token count for the vocabulary"),
      CEM_INT_KEY(max_context_tokens, "max-context-tokens", "context length cap, [CLS] included"),
      CEM_INT_KEY(max_knowledge_tokens, "max-knowledge-tokens", "relation sequence length cap"),
      CEM_TEXT_KEY(knowledge_cache, "knowledge-cache", "knowledge cache file (.jsonl)"),
      CEM_TEXT_KEY(knowledge_url, "knowledge-url", "inference server URL (default $CEM_KNOWLEDGE_URL)"),
      CEM_TEXT_KEY(knowledge_provider, "knowledge-provider",
                   "precompute source: auto|remote|synthetic|cache (auto: remote when a URL is set)"),
      CEM_TEXT_KEY(fallback, "fallback", "on knowledge cache miss: error|neutral"),
      CEM_TEXT_KEY(neutral_inference, "neutral-inference", "inference string used by the neutral fallback"),
      CEM_REAL_KEY(knowledge_timeout, "knowledge-timeout", "remote request timeout in seconds"),
      CEM_INT_KEY(knowledge_retries, "knowledge-retries", "remote retries per request"),
      CEM_INT_KEY(max_in_flight, "max-in-flight", "concurrent remote requests"),
      CEM_INT_KEY(d_model, "d-model", "hidden size"),
      CEM_INT_KEY(layers, "layers", "layers per encoder and decoder"),
      CEM_INT_KEY(heads, "heads", "attention heads"),
      CEM_INT_KEY(ffn_dim, "ffn-dim", "feed-forward width (0: 4 * d-model)"),
      CEM_REAL_KEY(dropout, "dropout", "dropout probability"),
      CEM_INT_KEY(max_decode_steps, "max-decode-steps", "greedy decoding step cap"),
      KeySpec{"ablation", "ablation", ValueKind::list,
              "repeatable: no-aff|no-cog|no-div|vanilla|multitask (file: comma-separated)",
              [](RunConfig& c, const std::string& v) { c.ablation = detail::parse_list(v); },
              [](const RunConfig& c) { return detail::join_list(c.ablation); }},
      KeySpec{"variants", "variants", ValueKind::list,
              "configurations compared by ablate, comma-separated; '+' combines flags (e.g. no-aff+no-div)",
              [](RunConfig& c, const std::string& v) { c.variants = detail::parse_list(v); },
              [](const RunConfig& c) { return detail::join_list(c.variants); }},
      CEM_INT_KEY(seed, "seed", "random seed"),
      CEM_INT_KEY(batch_size, "batch-size", "examples per batch"),
      CEM_INT_KEY(warmup, "warmup", "learning-rate warmup steps"),
      CEM_REAL_KEY(lr_cap, "lr-cap", "learning-rate cap ('inf' for none)"),
      CEM_REAL_KEY(gamma1, "gamma1", "weight of the response NLL"),
      CEM_REAL_KEY(gamma2, "gamma2", "weight of the emotion loss"),
      CEM_REAL_KEY(gamma3, "gamma3", "weight of the diversity loss"),
      CEM_REAL_KEY(beta1, "beta1", "Adam beta1"),
      CEM_REAL_KEY(beta2, "beta2", "Adam beta2"),
      CEM_REAL_KEY(adam_eps, "adam-eps", "Adam epsilon"),
      CEM_INT_KEY(max_epochs, "max-epochs", "epoch limit"),
      CEM_INT_KEY(max_steps, "max-steps", "optimizer step limit (0: none)"),
      CEM_INT_KEY(patience, "patience", "validation rounds without improvement before stopping"),
      CEM_REAL_KEY(clip_norm, "clip-norm", "global gradient-norm clip (0: off)"),
      KeySpec{"allow_degenerate_frequencies", "allow-degenerate-frequencies", ValueKind::boolean,
              "use unit diversity weights when every counted token is equally frequent",
              [](RunConfig& c, const std::string& v) {
                c.allow_degenerate_frequencies = detail::parse_bool("allow_degenerate_frequencies", v);
              },
              [](const RunConfig& c) { return std::string(c.allow_degenerate_frequencies ? "true" : "false"); }},
      CEM_TEXT_KEY(checkpoint, "checkpoint", "model checkpoint (default <out>/model.ckpt when training)"),
      CEM_INT_KEY(trigram_top_k, "trigram-top-k", "rows in the trigram coverage report"),
      CEM_INT_KEY(synth_dialogues, "synth-dialogues", "synthetic corpus size"),
      CEM_INT_KEY(synth_emotions, "synth-emotions", "distinct emotions in the synthetic corpus"),
  };
  return schema;
}

#undef CEM_INT_KEY
#undef CEM_REAL_KEY
#undef CEM_TEXT_KEY

inline const KeySpec& key_spec(const std::string& key) {
  for (const auto& k : config_schema())
    if (k.key == key) return k;
  throw UsageError("unknown config key '" + key + "'");
}

// Flat key=value lines; '#' starts a comment line.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(std::istream& in, const std::string& source) {
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw UsageError(source + ":" + std::to_string(lineno) + ": expected key=value");
    out.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return out;
}

inline void apply_key_values(RunConfig& cfg, const std::vector<std::pair<std::string, std::string>>& kv) {
  for (const auto& [k, v] : kv) key_spec(k).set(cfg, v);
}

inline std::string format_config(const RunConfig& cfg) {
  std::string s;
  for (const auto& k : config_schema()) s += k.key + "=" + k.get(cfg) + "\n";
  return s;
}

// Defaults, then the file, then flag overrides (already keyed by config key).
inline RunConfig parse_config(const std::string& file,
                              const std::vector<std::pair<std::string, std::string>>& overrides,
                              const char* env_knowledge_url = std::getenv("CEM_KNOWLEDGE_URL")) {
  RunConfig cfg;
  if (env_knowledge_url) cfg.knowledge_url = env_knowledge_url;
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw UsageError("cannot open config file " + file);
    apply_key_values(cfg, parse_key_values(in, file));
  }
  std::vector<std::string> ablations;
  bool ablation_flag = false;
  for (const auto& [k, v] : overrides) {
    if (k == "ablation") {
      ablation_flag = true;
      for (auto& a : detail::parse_list(v)) ablations.push_back(a);
      continue;
    }
    key_spec(k).set(cfg, v);
  }
  if (ablation_flag) cfg.ablation = ablations;
  parse_ablations(cfg.ablation);
  fallback_from_name(cfg.fallback);
  return cfg;
}

}  // namespace cem
