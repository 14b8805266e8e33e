#pragma once

// Response NLL, emotion cross-entropy, the frequency-aware diversity loss,
// and their weighted sum.

#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <system_error>
#include <vector>

#include "cem/batch.hpp"
#include "cem/corpus.hpp"
#include "cem/errors.hpp"
#include "cem/model.hpp"
#include "cem/tensor.hpp"

namespace cem {

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw DataError("not a number: '" + std::string(s) + "'");
  return v;
}

inline double log_softmax_at(const Mat& logits, Eigen::Index row, int target) {
  double mx = logits.row(row).maxCoeff();
  double lse = std::log((logits.row(row).array() - mx).exp().sum()) + mx;
  return logits(row, target) - lse;
}

// Mean over unmasked rows of -log softmax(logits)[target].
inline double nll_loss(const Mat& logits, std::span<const int> targets, std::span<const double> mask) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows() || mask.size() != targets.size())
    throw std::invalid_argument("nll_loss: length mismatch");
  double sum = 0.0, n = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (mask[t] == 0.0) continue;
    sum -= log_softmax_at(logits, static_cast<Eigen::Index>(t), targets[t]);
    n += 1.0;
  }
  if (n == 0.0) throw DataError("loss over an all-padding target");
  return sum / n;
}

// Mean over unmasked rows of -w[target] * log softmax(logits)[target].
inline double diversity_loss(const Mat& logits, std::span<const int> targets, std::span<const double> mask,
                             std::span<const double> weights) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows() || mask.size() != targets.size())
    throw std::invalid_argument("diversity_loss: length mismatch");
  if (static_cast<Eigen::Index>(weights.size()) != logits.cols())
    throw std::invalid_argument("diversity_loss: weights must cover the vocabulary");
  double sum = 0.0, n = 0.0;
  for (std::size_t t = 0; t < targets.size(); ++t) {
    if (mask[t] == 0.0) continue;
    sum -= weights[static_cast<std::size_t>(targets[t])] * log_softmax_at(logits, static_cast<Eigen::Index>(t), targets[t]);
    n += 1.0;
  }
  if (n == 0.0) throw DataError("loss over an all-padding target");
  return sum / n;
}

inline double emotion_loss(std::span<const double> probs, int label) {
  if (label < 0 || label >= static_cast<int>(probs.size()))
    throw std::out_of_range("emotion label " + std::to_string(label) + " outside [0, " +
                            std::to_string(probs.size()) + ")");
  return -std::log(probs[static_cast<std::size_t>(label)]);
}

struct Coefficients {
  double nll = 1.0;
  double emo = 1.0;
  double div = 1.5;
  bool operator==(const Coefficients&) const = default;
};

inline double total_loss(double nll, double emo, double div, const Coefficients& g = {}) {
  return g.nll * nll + g.emo * emo + g.div * div;
}

// Coefficients actually applied for a model variant.
inline Coefficients effective_coefficients(Coefficients g, const Variant& v) {
  if (!v.has_emotion_head()) g.emo = 0.0;
  if (!v.diversity) g.div = 0.0;
  return g;
}

struct LossSet {
  double nll = 0.0;
  double emo = 0.0;
  double div = 0.0;
  Coefficients gamma;
  double total = 0.0;
};

// ---------------------------------------------------------------------------
// Frequency table

struct FrequencyTable {
  std::vector<std::string> tokens;
  std::vector<long> counts;         // zero for specials
  std::vector<double> relative;     // RF over counted tokens
  double slope = 0.0;               // -1 / max RF
  std::vector<double> raw_weights;  // slope * RF + 1
  std::vector<double> weights;      // normalized to mean 1 over counted tokens; specials 1
  bool degenerate = false;

  int size() const { return static_cast<int>(counts.size()); }
  bool operator==(const FrequencyTable&) const = default;
};

inline FrequencyTable frequency_table_from_counts(std::vector<std::string> tokens, std::vector<long> counts,
                                                  bool allow_degenerate = false) {
  if (tokens.size() != counts.size()) throw std::invalid_argument("frequency table: size mismatch");
  FrequencyTable ft;
  ft.tokens = std::move(tokens);
  ft.counts = std::move(counts);
  const std::size_t V = ft.counts.size();
  long total = 0, max_count = 0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < V; ++i) {
    if (is_special(static_cast<int>(i))) ft.counts[i] = 0;
    if (ft.counts[i] < 0) throw DataError("negative token count");
    total += ft.counts[i];
    max_count = std::max(max_count, ft.counts[i]);
    if (ft.counts[i] > 0) ++counted;
  }
  if (total == 0) throw DataError("frequency table: no counted tokens");
  ft.relative.assign(V, 0.0);
  for (std::size_t i = 0; i < V; ++i) ft.relative[i] = static_cast<double>(ft.counts[i]) / static_cast<double>(total);
  const double max_rf = static_cast<double>(max_count) / static_cast<double>(total);
  ft.slope = -1.0 / max_rf;
  ft.raw_weights.assign(V, 1.0);
  double counted_sum = 0.0;
  for (std::size_t i = 0; i < V; ++i) {
    if (is_special(static_cast<int>(i))) continue;
    ft.raw_weights[i] = ft.counts[i] == max_count ? 0.0 : ft.slope * ft.relative[i] + 1.0;
    if (ft.counts[i] > 0) counted_sum += ft.raw_weights[i];
  }
  ft.weights.assign(V, 1.0);
  if (counted_sum <= 0.0) {
    if (!allow_degenerate)
      throw DataError("degenerate corpus: every counted token has the maximal frequency, weights are all zero");
    ft.degenerate = true;
    return ft;
  }
  const double n = static_cast<double>(counted);
  for (std::size_t i = 0; i < V; ++i)
    if (!is_special(static_cast<int>(i))) ft.weights[i] = ft.raw_weights[i] * n / counted_sum;
  return ft;
}

// Counts non-special tokens over training response id sequences.
inline FrequencyTable compute_frequency_table(const std::vector<std::vector<int>>& responses,
                                              const Vocabulary& vocab, bool allow_degenerate = false) {
  std::vector<long> counts(static_cast<std::size_t>(vocab.size()), 0);
  for (const auto& r : responses)
    for (int id : r)
      if (!is_special(id)) ++counts.at(static_cast<std::size_t>(id));
  return frequency_table_from_counts(vocab.tokens(), std::move(counts), allow_degenerate);
}

inline FrequencyTable compute_frequency_table(const std::vector<Example>& examples, const Vocabulary& vocab,
                                              bool allow_degenerate = false) {
  std::vector<std::vector<int>> responses;
  responses.reserve(examples.size());
  for (const auto& e : examples) responses.push_back(e.target);
  return compute_frequency_table(responses, vocab, allow_degenerate);
}

inline void save_frequency_table(const FrequencyTable& ft, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write frequency table " + path);
  for (std::size_t i = 0; i < ft.counts.size(); ++i)
    out << ft.tokens[i] << '\t' << ft.counts[i] << '\t' << format_double(ft.weights[i]) << '\n';
}

// Rebuilds the table from the stored counts and checks the stored weights.
inline FrequencyTable load_frequency_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open frequency table " + path);
  std::vector<std::string> tokens;
  std::vector<long> counts;
  std::vector<double> weights;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto t1 = line.find('\t');
    auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) throw DataError(path + ":" + std::to_string(lineno) + ": expected 3 fields");
    tokens.push_back(line.substr(0, t1));
    try {
      counts.push_back(std::stol(line.substr(t1 + 1, t2 - t1 - 1)));
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(lineno) + ": bad count");
    }
    weights.push_back(parse_double(std::string_view(line).substr(t2 + 1)));
  }
  FrequencyTable ft = frequency_table_from_counts(std::move(tokens), std::move(counts), true);
  if (ft.weights != weights) throw DataError(path + ": stored weights disagree with stored counts");
  return ft;
}

// ---------------------------------------------------------------------------
// Batch objective

struct ObjectiveOptions {
  Coefficients gamma;  // already adjusted for the variant
  const FrequencyTable* frequencies = nullptr;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

// Token-mean NLL and diversity loss over the batch, mean emotion loss over
// rows. When `grads` is given, gradients of the total are accumulated there.
inline LossSet batch_objective(const CemModel& model, const Batch& batch, const ObjectiveOptions& opt,
                               ag::Gradients* grads = nullptr, std::vector<int>* emotion_argmax = nullptr) {
  const bool need_div = opt.frequencies != nullptr;
  if (!need_div && opt.gamma.div != 0.0) throw UsageError("diversity loss needs a frequency table");
  if (need_div && opt.frequencies->size() != model.config().vocab_size)
    throw UsageError("frequency table does not match the vocabulary");
  double tokens = 0.0;
  for (int len : batch.target_lengths) tokens += len - 1;
  if (tokens <= 0.0) throw DataError("batch has no target tokens");
  const double rows = batch.size();
  const bool has_emo = model.config().variant.has_emotion_head();

  LossSet ls;
  ls.gamma = opt.gamma;
  for (int b = 0; b < batch.size(); ++b) {
    ag::Tape t(model.params(), grads);
    Pass p{t, opt.dropout, opt.rng};
    RowForward row = model.forward_row(p, batch, b);
    std::vector<Var> terms;
    std::vector<double> coefs;
    Var ce = ag::weighted_cross_entropy(t, row.logits, row.predicted, row.target_mask);
    ls.nll += t.scalar(ce) / tokens;
    terms.push_back(ce);
    coefs.push_back(opt.gamma.nll / tokens);
    if (need_div) {
      std::vector<double> w(row.target_mask.size());
      for (std::size_t i = 0; i < w.size(); ++i)
        w[i] = row.target_mask[i] * opt.frequencies->weights[static_cast<std::size_t>(row.predicted[i])];
      Var wce = ag::weighted_cross_entropy(t, row.logits, row.predicted, w);
      ls.div += t.scalar(wce) / tokens;
      terms.push_back(wce);
      coefs.push_back(opt.gamma.div / tokens);
    }
    if (has_emo) {
      int label = batch.emotion_ids[static_cast<std::size_t>(b)];
      if (label < 0 || label >= model.config().n_emotions)
        throw DataError("emotion id " + std::to_string(label) + " outside the model's label range");
      std::array<int, 1> y{label};
      std::array<double, 1> one{1.0};
      Var emo = ag::weighted_cross_entropy(t, row.emotion->logits, y, one);
      ls.emo += t.scalar(emo) / rows;
      terms.push_back(emo);
      coefs.push_back(opt.gamma.emo / rows);
      if (emotion_argmax) emotion_argmax->push_back(row.emotion->argmax);
    }
    if (grads) {
      Var total = ag::linear_combination(t, terms, coefs);
      t.backward(total);
    }
  }
  ls.total = total_loss(ls.nll, ls.emo, ls.div, opt.gamma);
  if (!std::isfinite(ls.total))
    throw NumericError("non-finite loss (nll=" + format_double(ls.nll) + ", emo=" + format_double(ls.emo) +
                       ", div=" + format_double(ls.div) + ")");
  return ls;
}

}  // namespace cem
