#pragma once

// Automatic metrics: perplexity, Dist-n, emotion accuracy, trigram coverage,
// evaluation reports, and ablation comparisons.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "cem/batch.hpp"
#include "cem/corpus.hpp"
#include "cem/errors.hpp"
#include "cem/model.hpp"
#include "cem/objective.hpp"
#include "cem/trainer.hpp"

namespace cem {

// ---------------------------------------------------------------------------
// Pure metrics

// 100 * unique n-grams / total n-grams, pooled over all responses.
template <typename Tok>
double distinct_n(const std::vector<std::vector<Tok>>& responses, int n) {
  if (n < 1) throw UsageError("distinct_n needs n >= 1");
  std::set<std::vector<Tok>> unique;
  std::size_t total = 0;
  for (const auto& r : responses) {
    if (r.size() < static_cast<std::size_t>(n)) continue;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= r.size(); ++i) {
      unique.emplace(r.begin() + static_cast<std::ptrdiff_t>(i), r.begin() + static_cast<std::ptrdiff_t>(i) + n);
      ++total;
    }
  }
  if (total == 0) throw DataError("distinct-" + std::to_string(n) + " is undefined: no n-grams");
  return 100.0 * static_cast<double>(unique.size()) / static_cast<double>(total);
}

inline double perplexity_from_nll(double total_nll, double token_count) {
  if (token_count <= 0.0) throw DataError("perplexity over zero tokens");
  return std::exp(total_nll / token_count);
}

// Fraction of predictions equal to their labels.
inline double emotion_accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  if (predicted.size() != labels.size()) throw std::invalid_argument("emotion_accuracy: length mismatch");
  if (labels.empty()) throw DataError("emotion accuracy over an empty dataset");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

// Argmax per row of a (N, q) distribution matrix, ties to the lowest id.
inline std::vector<int> argmax_rows(const Mat& probs) {
  std::vector<int> out;
  for (Eigen::Index r = 0; r < probs.rows(); ++r)
    out.push_back(argmax_lowest({probs.row(r).data(), static_cast<std::size_t>(probs.cols())}));
  return out;
}

using Trigram = std::array<std::string, 3>;

inline std::string trigram_text(const Trigram& t) { return t[0] + " " + t[1] + " " + t[2]; }

inline Trigram parse_trigram(const std::string& s) {
  auto toks = tokenize(s);
  if (toks.size() != 3) throw UsageError("trigram must have exactly three tokens: '" + s + "'");
  return {toks[0], toks[1], toks[2]};
}

struct TrigramRow {
  Trigram trigram;
  double proportion = 0.0;
  bool operator==(const TrigramRow&) const = default;
};

namespace detail {

inline std::set<Trigram> trigrams_of(const std::vector<std::string>& r) {
  std::set<Trigram> s;
  for (std::size_t i = 0; i + 3 <= r.size(); ++i) s.insert({r[i], r[i + 1], r[i + 2]});
  return s;
}

}  // namespace detail

// Share of responses containing each trigram at least once.
inline std::vector<TrigramRow> trigram_report(const std::vector<std::vector<std::string>>& responses,
                                              const std::vector<Trigram>& trigrams) {
  if (responses.empty()) throw DataError("trigram report over no responses");
  std::map<Trigram, std::size_t> cover;
  for (const auto& r : responses)
    for (const auto& t : detail::trigrams_of(r)) ++cover[t];
  std::vector<TrigramRow> out;
  for (const auto& t : trigrams) {
    auto it = cover.find(t);
    std::size_t c = it == cover.end() ? 0 : it->second;
    out.push_back({t, static_cast<double>(c) / static_cast<double>(responses.size())});
  }
  return out;
}

// The k trigrams with the widest response coverage, descending; ties are
// broken lexicographically.
inline std::vector<TrigramRow> trigram_report(const std::vector<std::vector<std::string>>& responses, int top_k) {
  if (responses.empty()) throw DataError("trigram report over no responses");
  if (top_k < 0) throw UsageError("top_k must be >= 0");
  std::map<Trigram, std::size_t> cover;
  for (const auto& r : responses)
    for (const auto& t : detail::trigrams_of(r)) ++cover[t];
  std::vector<std::pair<Trigram, std::size_t>> rows(cover.begin(), cover.end());
  std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<TrigramRow> out;
  for (std::size_t i = 0; i < rows.size() && i < static_cast<std::size_t>(top_k); ++i)
    out.push_back({rows[i].first, static_cast<double>(rows[i].second) / static_cast<double>(responses.size())});
  return out;
}

inline std::string format_trigram_report(std::vector<TrigramRow> rows) {
  std::stable_sort(rows.begin(), rows.end(),
                   [](const TrigramRow& a, const TrigramRow& b) { return a.proportion > b.proportion; });
  std::string s;
  for (const auto& r : rows) s += trigram_text(r.trigram) + "\t" + format_double(r.proportion) + "\n";
  return s;
}

// ---------------------------------------------------------------------------
// Model metrics

// exp(total NLL / token count) under teacher forcing.
inline double perplexity(const CemModel& model, const std::vector<Example>& examples, int batch_size = 16) {
  if (examples.empty()) throw DataError("perplexity over an empty dataset");
  double total = 0.0, tokens = 0.0;
  for (const Batch& b : make_batches(examples, batch_size)) {
    for (int r = 0; r < b.size(); ++r) {
      ag::Tape t(model.params());
      Pass p{t};
      RowForward row = model.forward_row(p, b, r);
      total += t.scalar(ag::weighted_cross_entropy(t, row.logits, row.predicted, row.target_mask));
      for (double m : row.target_mask) tokens += m;
    }
  }
  return perplexity_from_nll(total, tokens);
}

inline std::vector<int> predict_emotions(const CemModel& model, const std::vector<Example>& examples,
                                         int batch_size = 16) {
  if (!model.config().variant.has_emotion_head()) throw UsageError("model variant has no emotion head");
  std::vector<int> out;
  for (const Batch& b : make_batches(examples, batch_size)) {
    for (int r = 0; r < b.size(); ++r) {
      ag::Tape t(model.params());
      Pass p{t};
      out.push_back(model.encode_row(p, b, r).emotion->argmax);
    }
  }
  return out;
}

inline double emotion_accuracy(const CemModel& model, const std::vector<Example>& examples, int batch_size = 16) {
  std::vector<int> labels;
  for (const auto& e : examples) labels.push_back(e.context.emotion_id);
  return emotion_accuracy(predict_emotions(model, examples, batch_size), labels);
}

inline std::vector<std::vector<int>> generate_all(const CemModel& model, const std::vector<Example>& examples,
                                                  int max_steps = -1) {
  std::vector<std::vector<int>> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(model.generate(e.context, e.knowledge, max_steps));
  return out;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalReport {
  std::string variant = "full";
  double ppl = 0.0;
  std::optional<double> dist_1;  // absent when the responses hold no n-grams
  std::optional<double> dist_2;
  std::optional<double> emotion_accuracy;  // absent without an emotion head
  int n_examples = 0;
  std::string fingerprint;

  bool operator==(const EvalReport&) const = default;

  json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    return json{{"variant", variant},       {"ppl", ppl},
                {"dist_1", opt(dist_1)},    {"dist_2", opt(dist_2)},
                {"emotion_accuracy", opt(emotion_accuracy)}, {"n_examples", n_examples},
                {"fingerprint", fingerprint}};
  }

  static EvalReport from_json(const json& j) {
    auto opt = [&](const char* k) -> std::optional<double> {
      const json& v = j.at(k);
      if (v.is_null()) return std::nullopt;
      return v.get<double>();
    };
    EvalReport r;
    r.variant = j.at("variant").get<std::string>();
    r.ppl = j.at("ppl").get<double>();
    r.dist_1 = opt("dist_1");
    r.dist_2 = opt("dist_2");
    r.emotion_accuracy = opt("emotion_accuracy");
    r.n_examples = j.at("n_examples").get<int>();
    r.fingerprint = j.at("fingerprint").get<std::string>();
    return r;
  }
};

inline void write_report(const EvalReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report " + path);
  out << r.to_json().dump(2) << '\n';
}

inline EvalReport read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report " + path);
  try {
    return EvalReport::from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw DataError("corrupt report " + path + ": " + e.what());
  }
}

inline std::uint64_t hash_examples(const std::vector<Example>& examples) {
  std::uint64_t h = fnv1a("examples");
  auto mix = [&](const std::vector<int>& v) {
    h = fnv1a(std::string_view(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(int)), h);
    h = fnv1a("|", h);
  };
  for (const auto& e : examples) {
    mix(e.context.token_ids);
    mix(e.context.state_ids);
    mix({e.context.emotion_id});
    mix(e.target);
    for (const auto& r : e.knowledge) mix(r.token_ids);
  }
  return h;
}

// Hash of the model and training configuration plus the data hashes.
inline std::string config_fingerprint(const ModelConfig& mc, const TrainConfig& tc,
                                      const std::vector<std::uint64_t>& data_hashes) {
  json j{{"model", mc.to_json()}, {"train", tc.to_json()}};
  json dh = json::array();
  for (auto h : data_hashes) dh.push_back(hex64(h));
  j["data"] = dh;
  return hex64(fnv1a(j.dump()));
}

inline EvalReport evaluate_model(const CemModel& model, const std::vector<Example>& examples,
                                 const std::string& fingerprint, int batch_size = 16,
                                 std::vector<std::vector<int>>* responses = nullptr) {
  EvalReport r;
  r.variant = model.config().variant.name();
  r.n_examples = static_cast<int>(examples.size());
  r.fingerprint = fingerprint;
  r.ppl = perplexity(model, examples, batch_size);
  auto gen = generate_all(model, examples);
  auto dist = [&](int n) -> std::optional<double> {
    try {
      return distinct_n(gen, n);
    } catch (const DataError&) {
      return std::nullopt;
    }
  };
  r.dist_1 = dist(1);
  r.dist_2 = dist(2);
  if (model.config().variant.has_emotion_head()) r.emotion_accuracy = emotion_accuracy(model, examples, batch_size);
  if (responses) *responses = std::move(gen);
  return r;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationRow {
  std::string name;
  EvalReport report;
  TrainReport training;
};

struct AblationDelta {
  std::string from, to;
  double ppl = 0.0;
  std::optional<double> dist_1, dist_2, emotion_accuracy;
};

struct AblationTable {
  std::vector<AblationRow> rows;
  std::vector<AblationDelta> deltas;  // every later row against the first

  json to_json() const {
    json j{{"rows", json::array()}, {"deltas", json::array()}};
    for (const auto& r : rows) j["rows"].push_back(json{{"name", r.name}, {"report", r.report.to_json()}});
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    for (const auto& d : deltas)
      j["deltas"].push_back(json{{"from", d.from},
                                 {"to", d.to},
                                 {"ppl", d.ppl},
                                 {"dist_1", opt(d.dist_1)},
                                 {"dist_2", opt(d.dist_2)},
                                 {"emotion_accuracy", opt(d.emotion_accuracy)}});
    return j;
  }
};

struct AblationData {
  const std::vector<Example>* train = nullptr;
  const std::vector<Example>* valid = nullptr;
  const std::vector<Example>* test = nullptr;
  const FrequencyTable* frequencies = nullptr;
  std::uint64_t vocab_hash = 0;
};

inline AblationDelta delta_between(const AblationRow& a, const AblationRow& b) {
  auto diff = [](const std::optional<double>& x, const std::optional<double>& y) -> std::optional<double> {
    if (x && y) return *y - *x;
    return std::nullopt;
  };
  AblationDelta d;
  d.from = a.name;
  d.to = b.name;
  d.ppl = b.report.ppl - a.report.ppl;
  d.dist_1 = diff(a.report.dist_1, b.report.dist_1);
  d.dist_2 = diff(a.report.dist_2, b.report.dist_2);
  d.emotion_accuracy = diff(a.report.emotion_accuracy, b.report.emotion_accuracy);
  return d;
}

// Trains and evaluates each variant from the same seed and data.
inline AblationTable ablation_compare(const std::vector<std::pair<std::string, Variant>>& variants,
                                      ModelConfig base, const TrainConfig& train_cfg, const AblationData& data,
                                      std::uint64_t seed, const TrainHooks& hooks = {}) {
  if (variants.empty()) throw UsageError("ablation comparison needs at least one configuration");
  if (!data.train || !data.test) throw UsageError("ablation comparison needs train and test data");
  static const std::vector<Example> none;
  AblationTable table;
  for (const auto& [name, variant] : variants) {
    ModelConfig mc = base;
    mc.variant = variant;
    CemModel model(mc, seed);
    TrainConfig tc = train_cfg;
    tc.seed = seed;
    tc.checkpoint_path.clear();
    Trainer trainer(model, tc, data.frequencies, data.vocab_hash);
    AblationRow row;
    row.name = name;
    row.training = trainer.train(*data.train, data.valid ? *data.valid : none, hooks);
    std::vector<std::uint64_t> hashes{hash_examples(*data.train), hash_examples(*data.test)};
    row.report = evaluate_model(model, *data.test, config_fingerprint(mc, tc, hashes), tc.batch_size);
    table.rows.push_back(std::move(row));
  }
  for (std::size_t i = 1; i < table.rows.size(); ++i)
    table.deltas.push_back(delta_between(table.rows[0], table.rows[i]));
  return table;
}

}  // namespace cem
