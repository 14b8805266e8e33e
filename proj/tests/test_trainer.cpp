#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "cem/synthetic.hpp"
#include "cem/trainer.hpp"
#include "support.hpp"

using namespace cem;

namespace {

struct Data {
  Vocabulary vocab;
  std::vector<Example> train, valid;
  FrequencyTable freq;
};

Data synthetic_data(int dialogues = 24, std::uint64_t seed = 1) {
  Data d;
  auto ds = generate_synthetic_corpus(dialogues, 4, seed);
  d.vocab = build_vocabulary(ds, 1);
  SyntheticProvider p;
  auto ex = build_examples(ds, d.vocab, p);
  const std::size_t cut = ex.size() * 3 / 4;
  d.train.assign(ex.begin(), ex.begin() + static_cast<std::ptrdiff_t>(cut));
  d.valid.assign(ex.begin() + static_cast<std::ptrdiff_t>(cut), ex.end());
  d.freq = compute_frequency_table(d.train, d.vocab);
  return d;
}

ModelConfig small_config(const Vocabulary& v, double dropout = 0.0) {
  ModelConfig c;
  c.vocab_size = v.size();
  c.d_model = 16;
  c.ffn_dim = 32;
  c.dropout = dropout;
  return c;
}

TrainConfig fast_config() {
  TrainConfig tc;
  tc.warmup = 10;
  tc.lr_cap = 3e-3;
  tc.batch_size = 8;
  tc.max_epochs = 3;
  tc.seed = 5;
  return tc;
}

Batch first_batch(const std::vector<Example>& ex, std::size_t n) {
  std::vector<const Example*> ptrs;
  for (std::size_t i = 0; i < n && i < ex.size(); ++i) ptrs.push_back(&ex[i]);
  return collate(ptrs);
}

}  // namespace

TEST(LearningRate, FormulaAndPeak) {
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_NEAR(learning_rate_at(8000, 300, 8000, inf), 6.455e-4, 5e-8);
  EXPECT_NEAR(learning_rate_at(8000, 300, 8000, inf), 1.0 / std::sqrt(300.0 * 8000.0), 1e-18);
  // At step == warmup the two inner terms coincide.
  const double w = 400.0;
  EXPECT_NEAR(std::pow(w, -0.5), w * std::pow(w, -1.5), 1e-15);
  EXPECT_NEAR(learning_rate_at(1, 300, 8000, inf), std::pow(300.0, -0.5) * std::pow(8000.0, -1.5), 1e-18);
  EXPECT_THROW(learning_rate_at(0, 300, 8000, 1e-4), UsageError);
}

TEST(LearningRate, CapAndShape) {
  const double inf = std::numeric_limits<double>::infinity();
  double prev = 0.0;
  for (long s = 1; s <= 30000; ++s) {
    double capped = learning_rate_at(s, 300, 8000, 1e-4);
    EXPECT_LE(capped, 1e-4);
    double lr = learning_rate_at(s, 300, 8000, inf);
    if (s <= 8000) {
      EXPECT_GE(lr, prev) << s;
    } else {
      EXPECT_LE(lr, prev) << s;
    }
    prev = lr;
  }
}

TEST(Adam, ZeroLearningRateIsANoOp) {
  Data d = synthetic_data(8);
  CemModel m(small_config(d.vocab), 1);
  std::vector<Mat> before;
  for (int i = 0; i < m.params().size(); ++i) before.push_back(m.params().value(i));
  ag::Gradients g(m.params());
  ObjectiveOptions opt;
  opt.frequencies = &d.freq;
  batch_objective(m, first_batch(d.train, 4), opt, &g);
  Adam adam(m.params(), {});
  adam.step(m.params(), g, 0.0);
  for (int i = 0; i < m.params().size(); ++i) EXPECT_EQ(m.params().value(i), before[static_cast<std::size_t>(i)]);
  EXPECT_EQ(adam.steps(), 1);
}

TEST(Adam, FirstStepMatchesClosedForm) {
  ag::ParamStore ps;
  int id = ps.add("x", (Mat(1, 3) << 1.0, -2.0, 0.5).finished());
  ag::Gradients g(ps);
  g.at(id) = (Mat(1, 3) << 0.3, -4.0, 0.0).finished();
  Adam adam(ps, {0.9, 0.98, 1e-9});
  adam.step(ps, g, 0.01);
  // Bias-corrected first step: m_hat = g, v_hat = g^2.
  EXPECT_NEAR(ps.value(id)(0, 0), 1.0 - 0.01 * 0.3 / (0.3 + 1e-9), 1e-15);
  EXPECT_NEAR(ps.value(id)(0, 1), -2.0 + 0.01 * 4.0 / (4.0 + 1e-9), 1e-15);
  EXPECT_EQ(ps.value(id)(0, 2), 0.5);
  // Second step with the same gradient, by hand.
  adam.step(ps, g, 0.01);
  double m2 = 0.9 * 0.1 * 0.3 + 0.1 * 0.3, v2 = 0.98 * 0.02 * 0.09 + 0.02 * 0.09;
  double upd = 0.01 * (m2 / (1 - 0.81)) / (std::sqrt(v2 / (1 - 0.98 * 0.98)) + 1e-9);
  EXPECT_NEAR(ps.value(id)(0, 0), 1.0 - 0.01 * 0.3 / (0.3 + 1e-9) - upd, 1e-15);
}

TEST(Clipping, PreservesDirection) {
  ag::ParamStore ps;
  int a = ps.add("a", Mat::Zero(2, 2));
  int b = ps.add("b", Mat::Zero(1, 3));
  ag::Gradients g(ps);
  g.at(a) = (Mat(2, 2) << 3, 0, -4, 1).finished();
  g.at(b) = (Mat(1, 3) << 2, 2, -1).finished();
  Mat a0 = g.at(a), b0 = g.at(b);
  const double n0 = std::sqrt(g.squared_norm());
  EXPECT_DOUBLE_EQ(clip_gradients(g, 1.0), n0);
  EXPECT_NEAR(std::sqrt(g.squared_norm()), 1.0, 1e-12);
  EXPECT_LT((g.at(a) - a0 / n0).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_LT((g.at(b) - b0 / n0).cwiseAbs().maxCoeff(), 1e-15);
  // Below the threshold nothing changes.
  Mat a1 = g.at(a);
  clip_gradients(g, 10.0);
  EXPECT_EQ(g.at(a), a1);
  clip_gradients(g, 0.0);
  EXPECT_EQ(g.at(a), a1);
}

TEST(EarlyStopping, PatienceOneStopsAfterTwoWorseningRounds) {
  EarlyStopping es(1);
  EXPECT_FALSE(es.update(5.0));
  EXPECT_TRUE(es.update(6.0));
  EarlyStopping es3(3);
  int rounds = 0;
  for (double l : {4.0, 3.0, 3.5, 3.2, 2.9, 3.0, 3.0, 3.1, 1.0}) {
    ++rounds;
    if (es3.update(l)) break;
  }
  EXPECT_EQ(rounds, 8);
  EXPECT_EQ(es3.best(), 2.9);
  EXPECT_THROW(EarlyStopping(0), UsageError);
}

TEST(TrainConfig, Defaults) {
  TrainConfig tc;
  EXPECT_EQ(tc.beta1, 0.9);
  EXPECT_EQ(tc.beta2, 0.98);
  EXPECT_EQ(tc.lr_cap, 1e-4);
  EXPECT_EQ(tc.warmup, 8000);
  EXPECT_EQ(tc.batch_size, 16);
  EXPECT_EQ(tc.patience, 3);
  EXPECT_EQ(tc.clip_norm, 1.0);
  tc.patience = 0;
  EXPECT_THROW(tc.validate(), UsageError);
  tc.patience = 1;
  tc.warmup = 0;
  EXPECT_THROW(tc.validate(), UsageError);
}

TEST(Checkpoint, BitExactForwardParity) {
  Data d = synthetic_data(8);
  CemModel m(small_config(d.vocab), 3);
  Trainer tr(m, fast_config(), &d.freq, d.vocab.hash());
  Batch b = first_batch(d.train, 5);
  for (int i = 0; i < 3; ++i) tr.step(b, 0.0);
  cem::testing::TempDir tmp("ckpt");
  save_checkpoint(m, d.vocab.hash(), &tr.optimizer(), tmp.file("m.ckpt"), json{{"note", "x"}});
  Checkpoint ck = read_checkpoint(tmp.file("m.ckpt"), d.vocab.hash());
  EXPECT_EQ(ck.config, m.config());
  EXPECT_EQ(ck.meta["note"], "x");
  EXPECT_EQ(ck.optimizer_steps, 3);
  CemModel loaded = model_from_checkpoint(ck);
  for (int i = 0; i < m.params().size(); ++i) EXPECT_EQ(loaded.params().value(i), m.params().value(i));
  ModelOutput a = m.forward(b), c = loaded.forward(b);
  for (std::size_t r = 0; r < a.logits.size(); ++r) EXPECT_EQ(a.logits[r], c.logits[r]);
  EXPECT_EQ(a.emotion_probs, c.emotion_probs);
}

TEST(Checkpoint, RefusesOtherVocabularyOrVersion) {
  Data d = synthetic_data(8);
  CemModel m(small_config(d.vocab), 3);
  cem::testing::TempDir tmp("ckpt");
  save_checkpoint(m, d.vocab.hash(), nullptr, tmp.file("m.ckpt"));
  EXPECT_THROW(read_checkpoint(tmp.file("m.ckpt"), d.vocab.hash() ^ 1), DataError);
  std::string bytes = cem::testing::read_file(tmp.file("m.ckpt"));
  bytes[8] = 2;  // version field follows the 8-byte magic
  cem::testing::write_file(tmp.file("v2.ckpt"), bytes);
  try {
    read_checkpoint(tmp.file("v2.ckpt"));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
  bytes[8] = 1;
  cem::testing::write_file(tmp.file("short.ckpt"), bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(read_checkpoint(tmp.file("short.ckpt")), DataError);
  cem::testing::write_file(tmp.file("junk.ckpt"), "hello world");
  EXPECT_THROW(read_checkpoint(tmp.file("junk.ckpt")), DataError);
}

TEST(Checkpoint, ResumeContinuesStepCountAndTrajectory) {
  Data d = synthetic_data(8);
  Batch b = first_batch(d.train, 6);
  cem::testing::TempDir tmp("ckpt");

  CemModel straight(small_config(d.vocab), 9);
  Trainer ts(straight, fast_config(), &d.freq);
  for (int i = 0; i < 5; ++i) ts.step(b, 0.0);

  CemModel first(small_config(d.vocab), 9);
  Trainer tf(first, fast_config(), &d.freq);
  for (int i = 0; i < 3; ++i) tf.step(b, 0.0);
  save_checkpoint(first, d.vocab.hash(), &tf.optimizer(), tmp.file("r.ckpt"));

  Checkpoint ck = read_checkpoint(tmp.file("r.ckpt"), d.vocab.hash());
  CemModel resumed = model_from_checkpoint(ck);
  Trainer tr(resumed, fast_config(), &d.freq);
  tr.resume(ck);
  EXPECT_EQ(tr.optimizer().steps(), 3);
  tr.step(b, 0.0);
  EXPECT_EQ(tr.optimizer().steps(), 4);
  EXPECT_EQ(tr.last_lr(), learning_rate_at(4, 16, 10, 3e-3));
  tr.step(b, 0.0);
  for (int i = 0; i < straight.params().size(); ++i)
    EXPECT_EQ(resumed.params().value(i), straight.params().value(i)) << straight.params().name(i);
}

TEST(Trainer, LossDecreasesOnAFixedBatch) {
  Data d = synthetic_data(8);
  CemModel m(small_config(d.vocab), 4);
  TrainConfig tc = fast_config();
  Trainer tr(m, tc, &d.freq);
  Batch b = first_batch(d.train, 4);
  std::vector<double> losses;
  for (int i = 0; i < 50; ++i) losses.push_back(tr.step(b, 0.0).total);
  int violations = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) violations += losses[i] > losses[i - 1] ? 1 : 0;
  EXPECT_LE(violations, 5);
  EXPECT_LT(losses.back(), 0.5 * losses.front());
}

TEST(Trainer, DeterministicAcrossRuns) {
  Data d = synthetic_data(16);
  auto run = [&] {
    CemModel m(small_config(d.vocab, 0.1), 11);
    TrainConfig tc = fast_config();
    tc.max_epochs = 1;
    Trainer tr(m, tc, &d.freq);
    return tr.train(d.train, d.valid);
  };
  TrainReport a = run(), b = run();
  ASSERT_EQ(a.rounds.size(), 1u);
  EXPECT_EQ(a.rounds[0].train.total, b.rounds[0].train.total);
  EXPECT_EQ(a.rounds[0].valid->total, b.rounds[0].valid->total);
  EXPECT_EQ(a.lr_trace, b.lr_trace);
}

TEST(Trainer, EarlyStopHonoursPatienceAndRestoresBest) {
  Data d = synthetic_data(16);
  CemModel m(small_config(d.vocab), 12);
  TrainConfig tc = fast_config();
  tc.lr_cap = 0.05;  // aggressive enough that validation loss turns upward
  tc.warmup = 2;
  tc.patience = 1;
  tc.max_epochs = 25;
  cem::testing::TempDir tmp("train");
  tc.checkpoint_path = tmp.file("best.ckpt");
  Trainer tr(m, tc, &d.freq, d.vocab.hash());
  std::ostringstream progress;
  TrainReport rep = tr.train(d.train, d.valid, {&progress, nullptr});
  ASSERT_FALSE(rep.rounds.empty());

  // Stopped exactly at the first non-improving round, or ran out of epochs.
  double best = std::numeric_limits<double>::infinity();
  std::size_t stop_at = rep.rounds.size();
  for (std::size_t i = 0; i < rep.rounds.size(); ++i) {
    double v = rep.rounds[i].valid->total;
    if (v >= best) {
      stop_at = i + 1;
      break;
    }
    best = v;
  }
  EXPECT_EQ(rep.rounds.size(), stop_at);
  EXPECT_EQ(rep.stop_reason, "early_stopping");
  EXPECT_LT(stop_at, 25u);

  // Best total is the minimum of the trace; parameters are the best ones.
  double min_total = std::numeric_limits<double>::infinity();
  for (const auto& r : rep.rounds) min_total = std::min(min_total, r.valid->total);
  EXPECT_EQ(rep.best_valid_total, min_total);
  EvalTotals now = evaluate_losses(m, d.valid, &d.freq, tr.gamma(), tc.batch_size);
  EXPECT_NEAR(now.loss.total, min_total, 1e-9);
  Checkpoint ck = read_checkpoint(rep.best_checkpoint_path, d.vocab.hash());
  EXPECT_EQ(ck.meta["epoch"], rep.best_epoch);

  // One progress line per round with the required fields.
  std::istringstream lines(progress.str());
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    json j = json::parse(line);
    for (const char* k : {"epoch", "step", "lr", "L_nll", "L_emo", "L_div", "total", "emo_acc"})
      EXPECT_TRUE(j.contains(k)) << k;
    ++n;
  }
  EXPECT_EQ(n, rep.rounds.size());
}

TEST(Trainer, LrTraceFollowsSchedule) {
  Data d = synthetic_data(16);
  CemModel m(small_config(d.vocab), 13);
  TrainConfig tc = fast_config();
  tc.max_epochs = 2;
  Trainer tr(m, tc, &d.freq);
  TrainReport rep = tr.train(d.train, {});
  ASSERT_EQ(rep.lr_trace.size(), static_cast<std::size_t>(rep.steps));
  for (std::size_t i = 0; i < rep.lr_trace.size(); ++i)
    EXPECT_EQ(rep.lr_trace[i], learning_rate_at(static_cast<long>(i + 1), 16, tc.warmup, tc.lr_cap));
  EXPECT_EQ(rep.stop_reason, "max_epochs");
  EXPECT_EQ(rep.rounds.size(), 2u);
  EXPECT_FALSE(rep.rounds[0].valid);
}

TEST(Trainer, MaxStepsStopsEarly) {
  Data d = synthetic_data(16);
  CemModel m(small_config(d.vocab), 13);
  TrainConfig tc = fast_config();
  tc.max_steps = 3;
  Trainer tr(m, tc, &d.freq);
  TrainReport rep = tr.train(d.train, d.valid);
  EXPECT_EQ(rep.steps, 3);
  EXPECT_EQ(rep.stop_reason, "max_steps");
}

TEST(Trainer, NonFiniteLossAbortsWithStep) {
  Data d = synthetic_data(8);
  CemModel m(small_config(d.vocab), 14);
  m.params().value(m.word_embedding_id()).setConstant(std::numeric_limits<double>::infinity());
  Trainer tr(m, fast_config(), &d.freq);
  try {
    tr.step(first_batch(d.train, 2), 0.0);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
}
