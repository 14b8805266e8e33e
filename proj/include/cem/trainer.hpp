#pragma once

// Optimization: warmup schedule, Adam, gradient clipping, early stopping,
// checkpoints, and the training loop.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "cem/batch.hpp"
#include "cem/errors.hpp"
#include "cem/model.hpp"
#include "cem/objective.hpp"
#include "cem/tensor.hpp"

namespace cem {

// min(cap, d^-0.5 * min(step^-0.5, step * warmup^-1.5))
inline double learning_rate_at(long step, int d_model, int warmup, double cap) {
  if (step < 1) throw UsageError("learning rate schedule starts at step 1");
  if (warmup < 1) throw UsageError("warmup must be >= 1");
  if (d_model < 1) throw UsageError("d_model must be >= 1");
  const double s = static_cast<double>(step);
  const double raw = std::pow(static_cast<double>(d_model), -0.5) *
                     std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
  return std::min(cap, raw);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-9;
};

class Adam {
 public:
  Adam() = default;
  Adam(const ag::ParamStore& store, AdamConfig cfg) : cfg_(cfg) {
    for (int i = 0; i < store.size(); ++i) {
      m_.push_back(Mat::Zero(store.value(i).rows(), store.value(i).cols()));
      v_.push_back(m_.back());
    }
  }

  // Parameters without a gradient this step still decay their moments.
  void step(ag::ParamStore& store, const ag::Gradients& grads, double lr) {
    if (static_cast<int>(m_.size()) != store.size()) throw std::logic_error("optimizer/parameter count mismatch");
    ++steps_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
    for (int i = 0; i < store.size(); ++i) {
      Mat& m = m_[static_cast<std::size_t>(i)];
      Mat& v = v_[static_cast<std::size_t>(i)];
      if (const Mat* g = grads.get(i)) {
        m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * *g;
        v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g->cwiseProduct(*g);
      } else {
        m *= cfg_.beta1;
        v *= cfg_.beta2;
      }
      if (lr == 0.0) continue;
      store.value(i).array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg_.eps);
    }
  }

  long steps() const { return steps_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<Mat>& first_moments() const { return m_; }
  const std::vector<Mat>& second_moments() const { return v_; }

  void restore(long steps, std::vector<Mat> m, std::vector<Mat> v) {
    if (m.size() != m_.size() || v.size() != v_.size()) throw DataError("optimizer state size mismatch");
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m[i].rows() != m_[i].rows() || m[i].cols() != m_[i].cols() || v[i].rows() != v_[i].rows() ||
          v[i].cols() != v_[i].cols())
        throw DataError("optimizer state shape mismatch");
    steps_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  AdamConfig cfg_;
  std::vector<Mat> m_, v_;
  long steps_ = 0;
};

// Rescales to `max_norm` when the global norm exceeds it; returns the norm
// before clipping. max_norm <= 0 disables clipping.
inline double clip_gradients(ag::Gradients& grads, double max_norm) {
  const double norm = std::sqrt(grads.squared_norm());
  if (max_norm > 0.0 && norm > max_norm) grads.scale(max_norm / norm);
  return norm;
}

class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {
    if (patience < 1) throw UsageError("patience must be >= 1");
  }

  // Records a validation loss; true when training should stop.
  bool update(double loss) {
    if (loss < best_) {
      best_ = loss;
      bad_rounds_ = 0;
      improved_ = true;
    } else {
      ++bad_rounds_;
      improved_ = false;
    }
    return bad_rounds_ >= patience_;
  }

  bool improved() const { return improved_; }
  double best() const { return best_; }
  int bad_rounds() const { return bad_rounds_; }

 private:
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_rounds_ = 0;
  bool improved_ = false;
};

struct TrainConfig {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double lr_cap = 1e-4;
  int warmup = 8000;
  int batch_size = 16;
  int max_epochs = 50;
  long max_steps = 0;  // 0: unlimited
  int patience = 3;
  std::uint64_t seed = 0;
  Coefficients gamma;
  double clip_norm = 1.0;
  std::string checkpoint_path;  // best checkpoint, optional

  void validate() const {
    if (patience < 1) throw UsageError("patience must be >= 1");
    if (warmup < 1) throw UsageError("warmup must be >= 1");
    if (batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (max_epochs < 1) throw UsageError("max_epochs must be >= 1");
    if (max_steps < 0) throw UsageError("max_steps must be >= 0");
    if (!(lr_cap > 0.0)) throw UsageError("lr_cap must be > 0");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw UsageError("betas must be in [0, 1)");
    if (gamma.nll < 0.0 || gamma.emo < 0.0 || gamma.div < 0.0) throw UsageError("loss coefficients must be >= 0");
  }

  json to_json() const {
    return json{{"beta1", beta1},         {"beta2", beta2},         {"adam_eps", adam_eps},
                {"lr_cap", lr_cap},       {"warmup", warmup},       {"batch_size", batch_size},
                {"max_epochs", max_epochs}, {"max_steps", max_steps}, {"patience", patience},
                {"seed", seed},           {"gamma1", gamma.nll},    {"gamma2", gamma.emo},
                {"gamma3", gamma.div},    {"clip_norm", clip_norm}};
  }
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[8] = {'C', 'E', 'M', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  std::uint64_t vocab_hash = 0;
  std::vector<std::string> names;
  std::vector<Mat> values;
  long optimizer_steps = 0;
  std::vector<Mat> adam_m, adam_v;
  json meta = json::object();
};

namespace detail {

template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DataError("truncated checkpoint " + path);
  return v;
}

inline void write_mat(std::ostream& out, const Mat& m) {
  write_pod<std::int64_t>(out, m.rows());
  write_pod<std::int64_t>(out, m.cols());
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
}

inline Mat read_mat(std::istream& in, const std::string& path) {
  auto r = read_pod<std::int64_t>(in, path);
  auto c = read_pod<std::int64_t>(in, path);
  if (r < 0 || c < 0 || r * c > (std::int64_t{1} << 34)) throw DataError("corrupt tensor header in " + path);
  Mat m(r, c);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (!in) throw DataError("truncated checkpoint " + path);
  return m;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, const std::string& path) {
  auto n = read_pod<std::uint64_t>(in, path);
  if (n > (std::uint64_t{1} << 32)) throw DataError("corrupt string in " + path);
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw DataError("truncated checkpoint " + path);
  return s;
}

}  // namespace detail

inline void save_checkpoint(const CemModel& model, std::uint64_t vocab_hash, const Adam* optimizer,
                            const std::string& path, const json& meta = json::object()) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, vocab_hash);
  detail::write_string(out, model.config().to_json().dump());
  detail::write_string(out, meta.dump());
  const ag::ParamStore& ps = model.params();
  detail::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(ps.size()));
  for (int i = 0; i < ps.size(); ++i) {
    detail::write_string(out, ps.name(i));
    detail::write_mat(out, ps.value(i));
  }
  const bool has_opt = optimizer && optimizer->steps() > 0;
  detail::write_pod<std::uint8_t>(out, has_opt ? 1 : 0);
  if (has_opt) {
    detail::write_pod<std::int64_t>(out, optimizer->steps());
    for (int i = 0; i < ps.size(); ++i) {
      detail::write_mat(out, optimizer->first_moments()[static_cast<std::size_t>(i)]);
      detail::write_mat(out, optimizer->second_moments()[static_cast<std::size_t>(i)]);
    }
  }
  if (!out) throw DataError("failed writing checkpoint " + path);
}

// Refuses files with another format version or, when `expected_vocab_hash`
// is given, another vocabulary.
inline Checkpoint read_checkpoint(const std::string& path,
                                  std::optional<std::uint64_t> expected_vocab_hash = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw DataError(path + " is not a checkpoint");
  auto version = detail::read_pod<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw DataError("checkpoint format version " + std::to_string(version) + " is not supported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  Checkpoint ck;
  ck.vocab_hash = detail::read_pod<std::uint64_t>(in, path);
  if (expected_vocab_hash && *expected_vocab_hash != ck.vocab_hash)
    throw DataError("checkpoint vocabulary hash " + hex64(ck.vocab_hash) + " does not match vocabulary " +
                    hex64(*expected_vocab_hash));
  try {
    ck.config = ModelConfig::from_json(json::parse(detail::read_string(in, path)));
    ck.meta = json::parse(detail::read_string(in, path));
  } catch (const json::exception& e) {
    throw DataError("corrupt checkpoint header in " + path + ": " + e.what());
  }
  auto n = detail::read_pod<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < n; ++i) {
    ck.names.push_back(detail::read_string(in, path));
    ck.values.push_back(detail::read_mat(in, path));
  }
  if (detail::read_pod<std::uint8_t>(in, path)) {
    ck.optimizer_steps = detail::read_pod<std::int64_t>(in, path);
    for (std::uint64_t i = 0; i < n; ++i) {
      ck.adam_m.push_back(detail::read_mat(in, path));
      ck.adam_v.push_back(detail::read_mat(in, path));
    }
  }
  return ck;
}

inline void assign_parameters(CemModel& model, const std::vector<std::string>& names, const std::vector<Mat>& values) {
  ag::ParamStore& ps = model.params();
  if (static_cast<int>(names.size()) != ps.size())
    throw DataError("checkpoint holds " + std::to_string(names.size()) + " tensors, model expects " +
                    std::to_string(ps.size()));
  for (std::size_t i = 0; i < names.size(); ++i) {
    auto id = ps.find(names[i]);
    if (!id) throw DataError("checkpoint tensor '" + names[i] + "' is not a model parameter");
    Mat& dst = ps.value(*id);
    if (dst.rows() != values[i].rows() || dst.cols() != values[i].cols())
      throw DataError("checkpoint tensor '" + names[i] + "' has the wrong shape");
    dst = values[i];
  }
}

inline CemModel model_from_checkpoint(const Checkpoint& ck) {
  CemModel model(ck.config, 0);
  assign_parameters(model, ck.names, ck.values);
  return model;
}

inline Adam optimizer_from_checkpoint(const Checkpoint& ck, const CemModel& model, AdamConfig cfg) {
  Adam opt(model.params(), cfg);
  if (ck.optimizer_steps > 0) {
    // Moments were written in parameter-id order, which construction fixes.
    opt.restore(ck.optimizer_steps, ck.adam_m, ck.adam_v);
  }
  return opt;
}

// ---------------------------------------------------------------------------
// Training loop

struct RoundRecord {
  int epoch = 0;
  long step = 0;
  double lr = 0.0;
  LossSet train;
  std::optional<LossSet> valid;
  std::optional<double> emo_acc;  // on validation data when present, else training data

  // The progress line: validation losses when available.
  json progress() const {
    const LossSet& l = valid ? *valid : train;
    json j{{"epoch", epoch}, {"step", step}, {"lr", lr}, {"L_nll", l.nll}, {"L_emo", l.emo},
           {"L_div", l.div}, {"total", l.total}};
    j["emo_acc"] = emo_acc ? json(*emo_acc) : json(nullptr);
    return j;
  }
};

struct TrainReport {
  std::vector<RoundRecord> rounds;
  std::vector<double> lr_trace;  // one entry per optimizer step
  int best_epoch = 0;
  double best_valid_total = std::numeric_limits<double>::infinity();
  std::string best_checkpoint_path;
  std::string stop_reason;
  long steps = 0;
};

struct EvalTotals {
  LossSet loss;
  std::optional<double> emo_acc;
};

// Teacher-forced losses over a dataset, weighting batches by their token and
// row counts so the result does not depend on batch boundaries.
inline EvalTotals evaluate_losses(const CemModel& model, const std::vector<Example>& examples,
                                  const FrequencyTable* freq, Coefficients gamma, int batch_size = 16) {
  if (examples.empty()) throw DataError("cannot evaluate an empty dataset");
  EvalTotals out;
  out.loss.gamma = gamma;
  double tokens = 0.0, rows = 0.0, correct = 0.0;
  double nll = 0.0, div = 0.0, emo = 0.0;
  const bool has_emo = model.config().variant.has_emotion_head();
  ObjectiveOptions opt{gamma, freq, 0.0, nullptr};
  for (const Batch& b : make_batches(examples, batch_size)) {
    double bt = 0.0;
    for (int len : b.target_lengths) bt += len - 1;
    std::vector<int> pred;
    LossSet ls = batch_objective(model, b, opt, nullptr, &pred);
    nll += ls.nll * bt;
    div += ls.div * bt;
    emo += ls.emo * b.size();
    tokens += bt;
    rows += b.size();
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == b.emotion_ids[i] ? 1.0 : 0.0;
  }
  out.loss.nll = nll / tokens;
  out.loss.div = div / tokens;
  out.loss.emo = emo / rows;
  out.loss.total = total_loss(out.loss.nll, out.loss.emo, out.loss.div, gamma);
  if (has_emo) out.emo_acc = correct / rows;
  return out;
}

struct TrainHooks {
  std::ostream* progress = nullptr;  // receives one JSON line per round
  std::function<void(const RoundRecord&)> on_round;
};

class Trainer {
 public:
  Trainer(CemModel& model, TrainConfig cfg, const FrequencyTable* freq, std::uint64_t vocab_hash = 0)
      : model_(model),
        cfg_(std::move(cfg)),
        freq_(freq),
        vocab_hash_(vocab_hash),
        opt_(model.params(), AdamConfig{cfg_.beta1, cfg_.beta2, cfg_.adam_eps}),
        rng_(cfg_.seed ^ 0xD1B54A32D192ED03ULL) {
    cfg_.validate();
    gamma_ = effective_coefficients(cfg_.gamma, model_.config().variant);
    if (gamma_.div > 0.0 && !freq_) throw UsageError("diversity loss needs a frequency table");
  }

  Adam& optimizer() { return opt_; }

  // Continues from a checkpoint's optimizer state and step count.
  void resume(const Checkpoint& ck) { opt_ = optimizer_from_checkpoint(ck, model_, opt_.config()); }
  const Coefficients& gamma() const { return gamma_; }

  // One optimizer step on a batch; returns the batch losses before the update.
  LossSet step(const Batch& batch, double dropout) {
    ag::Gradients grads(model_.params());
    ObjectiveOptions o{gamma_, freq_, dropout, &rng_};
    LossSet ls;
    try {
      ls = batch_objective(model_, batch, o, &grads);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(opt_.steps() + 1) + ": " + e.what());
    }
    double norm = clip_gradients(grads, cfg_.clip_norm);
    if (!std::isfinite(norm))
      throw NumericError("step " + std::to_string(opt_.steps() + 1) + ": non-finite gradient norm");
    const double lr = learning_rate_at(opt_.steps() + 1, model_.config().d_model, cfg_.warmup, cfg_.lr_cap);
    opt_.step(model_.params(), grads, lr);
    last_lr_ = lr;
    return ls;
  }

  double last_lr() const { return last_lr_; }

  // Extra fields stored in every checkpoint this trainer writes.
  void set_checkpoint_meta(json meta) { meta_ = std::move(meta); }

  TrainReport train(const std::vector<Example>& train_set, const std::vector<Example>& valid_set,
                    const TrainHooks& hooks = {}) {
    if (train_set.empty()) throw DataError("empty training set");
    TrainReport rep;
    EarlyStopping stopper(cfg_.patience);
    std::vector<Mat> best_params;
    const double dropout = model_.config().dropout;
    for (int epoch = 1; epoch <= cfg_.max_epochs; ++epoch) {
      auto batches = make_batches(train_set, cfg_.batch_size, cfg_.seed + static_cast<std::uint64_t>(epoch));
      double tokens = 0.0, rows = 0.0;
      LossSet acc;
      acc.gamma = gamma_;
      bool step_limit = false;
      for (const Batch& b : batches) {
        double bt = 0.0;
        for (int len : b.target_lengths) bt += len - 1;
        LossSet ls = step(b, dropout);
        rep.lr_trace.push_back(last_lr_);
        acc.nll += ls.nll * bt;
        acc.div += ls.div * bt;
        acc.emo += ls.emo * b.size();
        tokens += bt;
        rows += b.size();
        if (cfg_.max_steps > 0 && opt_.steps() >= cfg_.max_steps) {
          step_limit = true;
          break;
        }
      }
      acc.nll /= tokens;
      acc.div /= tokens;
      acc.emo /= rows;
      acc.total = total_loss(acc.nll, acc.emo, acc.div, gamma_);

      RoundRecord rec;
      rec.epoch = epoch;
      rec.step = opt_.steps();
      rec.lr = last_lr_;
      rec.train = acc;
      bool stop = false;
      if (!valid_set.empty()) {
        EvalTotals ev = evaluate_losses(model_, valid_set, freq_, gamma_, cfg_.batch_size);
        rec.valid = ev.loss;
        rec.emo_acc = ev.emo_acc;
        stop = stopper.update(ev.loss.total);
        if (stopper.improved()) {
          rep.best_epoch = epoch;
          rep.best_valid_total = ev.loss.total;
          best_params.clear();
          for (int i = 0; i < model_.params().size(); ++i) best_params.push_back(model_.params().value(i));
          if (!cfg_.checkpoint_path.empty()) {
            json meta = meta_;
            meta["epoch"] = epoch;
            save_checkpoint(model_, vocab_hash_, &opt_, cfg_.checkpoint_path, meta);
            rep.best_checkpoint_path = cfg_.checkpoint_path;
          }
        }
      }
      rep.rounds.push_back(rec);
      if (hooks.progress) *hooks.progress << rec.progress().dump() << '\n' << std::flush;
      if (hooks.on_round) hooks.on_round(rec);
      if (stop) {
        rep.stop_reason = "early_stopping";
        break;
      }
      if (step_limit) {
        rep.stop_reason = "max_steps";
        break;
      }
    }
    if (rep.stop_reason.empty()) rep.stop_reason = "max_epochs";
    rep.steps = opt_.steps();
    if (!best_params.empty()) {
      for (int i = 0; i < model_.params().size(); ++i)
        model_.params().value(i) = best_params[static_cast<std::size_t>(i)];
    } else if (!cfg_.checkpoint_path.empty()) {
      json meta = meta_;
      meta["epoch"] = rep.rounds.size();
      save_checkpoint(model_, vocab_hash_, &opt_, cfg_.checkpoint_path, meta);
      rep.best_checkpoint_path = cfg_.checkpoint_path;
      rep.best_epoch = static_cast<int>(rep.rounds.size());
    }
    return rep;
  }

 private:
  CemModel& model_;
  TrainConfig cfg_;
  const FrequencyTable* freq_;
  std::uint64_t vocab_hash_;
  Adam opt_;
  std::mt19937_64 rng_;
  Coefficients gamma_;
  double last_lr_ = 0.0;
  json meta_ = json::object();
};

}  // namespace cem
