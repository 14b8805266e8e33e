#pragma once

// The commonsense-aware encoder-decoder: shared embeddings, context and
// commonsense encoders, token-level refinement, gated knowledge selection,
// an emotion head, and a decoder whose cross-attention reads the fused
// context.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cem/batch.hpp"
#include "cem/errors.hpp"
#include "cem/knowledge.hpp"
#include "cem/tensor.hpp"

namespace cem {

using ag::Tape;
using ag::Var;

enum class Architecture { cem, vanilla, multitask };

// Model variant. `diversity` only affects the objective.
struct Variant {
  Architecture arch = Architecture::cem;
  bool affective = true;
  bool cognitive = true;
  bool diversity = true;

  bool uses_knowledge() const { return arch == Architecture::cem; }
  bool has_emotion_head() const { return arch != Architecture::vanilla; }

  void validate() const {
    if (arch == Architecture::cem && !affective && !cognitive)
      throw UsageError("ablations no-aff and no-cog cannot be combined");
  }

  std::vector<std::string> flags() const {
    if (arch == Architecture::vanilla) return {"vanilla"};
    if (arch == Architecture::multitask) return {"multitask"};
    std::vector<std::string> f;
    if (!affective) f.push_back("no-aff");
    if (!cognitive) f.push_back("no-cog");
    if (!diversity) f.push_back("no-div");
    return f;
  }

  std::string name() const {
    auto f = flags();
    if (f.empty()) return "full";
    std::string s;
    for (std::size_t i = 0; i < f.size(); ++i) s += (i ? "+" : "") + f[i];
    return s;
  }

  bool operator==(const Variant&) const = default;
};

inline Variant parse_ablations(const std::vector<std::string>& flags) {
  Variant v;
  bool baseline = false;
  for (const auto& f : flags) {
    if (f == "no-aff") {
      v.affective = false;
    } else if (f == "no-cog") {
      v.cognitive = false;
    } else if (f == "no-div") {
      v.diversity = false;
    } else if (f == "vanilla" || f == "multitask") {
      if (baseline) throw UsageError("only one of vanilla/multitask may be given");
      baseline = true;
      v.arch = f == "vanilla" ? Architecture::vanilla : Architecture::multitask;
      v.diversity = false;
    } else if (f == "full" || f.empty()) {
    } else {
      throw UsageError("unknown ablation '" + f + "'");
    }
  }
  if (baseline && flags.size() > 1) throw UsageError("vanilla/multitask cannot be combined with other ablations");
  v.validate();
  return v;
}

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 300;
  int n_layers = 1;
  int n_heads = 2;
  int ffn_dim = 0;  // 0 means 4 * d_model
  int n_emotions = 32;
  double dropout = 0.1;
  int max_decode_steps = 30;
  int max_positions = 512;
  Variant variant;

  int ffn() const { return ffn_dim > 0 ? ffn_dim : 4 * d_model; }

  void validate() const {
    if (vocab_size <= kNumSpecials) throw UsageError("vocab_size must exceed the special tokens");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      throw UsageError("d_model must be divisible by n_heads");
    if (n_layers < 1) throw UsageError("n_layers must be >= 1");
    if (n_emotions < 2) throw UsageError("n_emotions must be >= 2");
    if (dropout < 0.0 || dropout >= 1.0) throw UsageError("dropout must be in [0, 1)");
    if (max_decode_steps < 1) throw UsageError("max_decode_steps must be >= 1");
    if (max_positions < 2) throw UsageError("max_positions must be >= 2");
    variant.validate();
  }

  json to_json() const {
    return json{{"vocab_size", vocab_size}, {"d_model", d_model},         {"n_layers", n_layers},
                {"n_heads", n_heads},       {"ffn_dim", ffn()},           {"n_emotions", n_emotions},
                {"dropout", dropout},       {"max_decode_steps", max_decode_steps},
                {"max_positions", max_positions}, {"ablation", variant.flags()}};
  }

  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.ffn_dim = j.at("ffn_dim").get<int>();
    c.n_emotions = j.at("n_emotions").get<int>();
    c.dropout = j.at("dropout").get<double>();
    c.max_decode_steps = j.at("max_decode_steps").get<int>();
    c.max_positions = j.at("max_positions").get<int>();
    c.variant = parse_ablations(j.at("ablation").get<std::vector<std::string>>());
    return c;
  }

  bool operator==(const ModelConfig&) const = default;
};

// One forward pass: the tape it records on plus dropout state.
struct Pass {
  Tape& tape;
  double dropout = 0.0;
  std::mt19937_64* rng = nullptr;
};

inline constexpr double kMaskedLogit = -1e9;

namespace nn {

struct Linear {
  int weight = -1;  // (in, out)
  int bias = -1;    // (1, out), optional

  Var operator()(Pass& p, Var x) const {
    Var y = ag::matmul(p.tape, x, p.tape.param(weight));
    if (bias >= 0) y = ag::add_row(p.tape, y, p.tape.param(bias));
    return y;
  }
};

struct LayerNorm {
  int gain = -1;
  int bias = -1;
  Var operator()(Pass& p, Var x) const {
    return ag::layer_norm(p.tape, x, p.tape.param(gain), p.tape.param(bias));
  }
};

inline Var dropout(Pass& p, Var x) {
  if (p.dropout <= 0.0 || !p.rng) return x;
  const Mat& v = p.tape.value(x);
  Mat mask(v.rows(), v.cols());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep = 1.0 - p.dropout;
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = u(*p.rng) < keep ? 1.0 / keep : 0.0;
  return ag::mul(p.tape, x, p.tape.constant(std::move(mask)));
}

struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;

  // `bias` is an additive (Lq, Lk) score mask; pass an empty matrix for none.
  Var operator()(Pass& p, Var query, Var memory, const Mat& bias, std::vector<Mat>* weights = nullptr) const {
    Tape& t = p.tape;
    Var Q = q(p, query), K = k(p, memory), V = v(p, memory);
    const Eigen::Index d = t.value(Q).cols();
    const Eigen::Index dh = d / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    Var bias_node = bias.size() ? t.constant(bias) : Var{};
    std::vector<Var> outs;
    for (int h = 0; h < heads; ++h) {
      Var qh = ag::slice_cols(t, Q, h * dh, dh);
      Var kh = ag::slice_cols(t, K, h * dh, dh);
      Var vh = ag::slice_cols(t, V, h * dh, dh);
      Var s = ag::scale(t, ag::matmul_nt(t, qh, kh), inv);
      if (bias_node.valid()) s = ag::add(t, s, bias_node);
      Var a = ag::softmax_rows(t, s);
      if (weights) weights->push_back(t.value(a));
      outs.push_back(ag::matmul(t, a, vh));
    }
    Var cat = heads == 1 ? outs[0] : ag::concat_cols(t, outs);
    return o(p, cat);
  }
};

struct FeedForward {
  Linear in, out;
  Var operator()(Pass& p, Var x) const { return out(p, ag::relu(p.tape, in(p, x))); }
};

struct EncoderLayer {
  MultiHeadAttention attn;
  LayerNorm ln1;
  FeedForward ffn;
  LayerNorm ln2;

  Var operator()(Pass& p, Var x, const Mat& bias) const {
    Var a = attn(p, x, x, bias);
    x = ln1(p, ag::add(p.tape, x, dropout(p, a)));
    Var f = ffn(p, x);
    return ln2(p, ag::add(p.tape, x, dropout(p, f)));
  }
};

struct Encoder {
  std::optional<Linear> input_proj;
  std::vector<EncoderLayer> layers;

  Var operator()(Pass& p, Var x, const Mat& bias) const {
    if (input_proj) x = (*input_proj)(p, x);
    for (const auto& l : layers) x = l(p, x, bias);
    return x;
  }
};

struct DecoderLayer {
  MultiHeadAttention self_attn;
  LayerNorm ln1;
  MultiHeadAttention cross_attn;
  LayerNorm ln2;
  FeedForward ffn;
  LayerNorm ln3;

  Var operator()(Pass& p, Var x, const Mat& self_bias, Var memory, const Mat& memory_bias,
                 std::vector<Mat>* cross_weights = nullptr) const {
    Var s = self_attn(p, x, x, self_bias);
    x = ln1(p, ag::add(p.tape, x, dropout(p, s)));
    Var c = cross_attn(p, x, memory, memory_bias, cross_weights);
    x = ln2(p, ag::add(p.tape, x, dropout(p, c)));
    Var f = ffn(p, x);
    return ln3(p, ag::add(p.tape, x, dropout(p, f)));
  }
};

// Builds parameters with deterministic initialization.
class Builder {
 public:
  Builder(ag::ParamStore& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  int uniform(const std::string& name, int rows, int cols, double limit) {
    std::uniform_real_distribution<double> u(-limit, limit);
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng_);
    return store_.add(name, std::move(m));
  }
  int constant(const std::string& name, int rows, int cols, double value) {
    return store_.add(name, Mat::Constant(rows, cols, value));
  }

  Linear linear(const std::string& name, int in, int out, bool bias = true) {
    Linear l;
    l.weight = uniform(name + ".w", in, out, std::sqrt(6.0 / (in + out)));
    if (bias) l.bias = constant(name + ".b", 1, out, 0.0);
    return l;
  }
  LayerNorm layer_norm(const std::string& name, int d) {
    return {constant(name + ".gain", 1, d, 1.0), constant(name + ".bias", 1, d, 0.0)};
  }
  MultiHeadAttention attention(const std::string& name, int d, int heads) {
    return {linear(name + ".q", d, d, false), linear(name + ".k", d, d, false), linear(name + ".v", d, d, false),
            linear(name + ".o", d, d), heads};
  }
  FeedForward ffn(const std::string& name, int d, int hidden) {
    return {linear(name + ".in", d, hidden), linear(name + ".out", hidden, d)};
  }
  Encoder encoder(const std::string& name, const ModelConfig& c, int in_dim) {
    Encoder e;
    if (in_dim != c.d_model) e.input_proj = linear(name + ".proj", in_dim, c.d_model, false);
    for (int i = 0; i < c.n_layers; ++i) {
      std::string ln = name + ".l" + std::to_string(i);
      e.layers.push_back({attention(ln + ".attn", c.d_model, c.n_heads), layer_norm(ln + ".ln1", c.d_model),
                          ffn(ln + ".ffn", c.d_model, c.ffn()), layer_norm(ln + ".ln2", c.d_model)});
    }
    return e;
  }
  std::vector<DecoderLayer> decoder(const std::string& name, const ModelConfig& c) {
    std::vector<DecoderLayer> out;
    for (int i = 0; i < c.n_layers; ++i) {
      std::string ln = name + ".l" + std::to_string(i);
      out.push_back({attention(ln + ".self", c.d_model, c.n_heads), layer_norm(ln + ".ln1", c.d_model),
                     attention(ln + ".cross", c.d_model, c.n_heads), layer_norm(ln + ".ln2", c.d_model),
                     ffn(ln + ".ffn", c.d_model, c.ffn()), layer_norm(ln + ".ln3", c.d_model)});
    }
    return out;
  }

 private:
  ag::ParamStore& store_;
  std::mt19937_64 rng_;
};

}  // namespace nn

inline Mat sinusoidal_positions(int max_positions, int d) {
  Mat pe(max_positions, d);
  for (int pos = 0; pos < max_positions; ++pos)
    for (int i = 0; i < d; ++i) {
      double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
      pe(pos, i) = (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
    }
  return pe;
}

// Additive mask hiding key columns whose mask entry is 0.
inline Mat key_padding_bias(int query_len, std::span<const int> key_mask) {
  Mat b = Mat::Zero(query_len, static_cast<Eigen::Index>(key_mask.size()));
  for (std::size_t j = 0; j < key_mask.size(); ++j)
    if (!key_mask[j]) b.col(static_cast<Eigen::Index>(j)).setConstant(kMaskedLogit);
  return b;
}

inline Mat causal_bias(int len) {
  Mat b = Mat::Zero(len, len);
  for (int i = 0; i < len; ++i)
    for (int j = i + 1; j < len; ++j) b(i, j) = kMaskedLogit;
  return b;
}

inline int argmax_lowest(std::span<const double> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  return best;
}

struct PooledEncoding {
  Var hidden;
  Var pooled;  // (1, d)
};

struct EmotionPrediction {
  Var logits;  // (1, q)
  Mat probs;   // (1, q)
  int argmax = 0;
};

struct Selection {
  Var refine;  // (L, k*d)
  Var fused;   // (L, d)
};

// Every intermediate of a single-example forward pass.
struct RowForward {
  Var context_hidden;                       // H_CTX
  std::vector<Var> refined;                 // H_Aff then H_Cog,r for enabled paths
  std::vector<Var> concatenated;            // U_r, same order as refined
  Var refine;                               // H_Refine (cem only)
  Var memory;                               // decoder memory: fused or H_CTX
  std::optional<EmotionPrediction> emotion;
  Var logits;                               // (T_max - 1, V)
  std::vector<int> predicted;               // target ids the logits predict
  std::vector<double> target_mask;          // 1 on real target positions
};

struct ModelOutput {
  std::vector<Mat> logits;    // per row (T, V)
  Mat emotion_probs;          // (B, q); empty without an emotion head
  std::vector<int> emotion_argmax;
  std::vector<Mat> fused;     // per row (L, d)
  std::vector<Mat> refine;    // per row (L, k*d)
};

class CemModel {
 public:
  CemModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    const int d = config_.d_model;
    const Variant& v = config_.variant;
    nn::Builder b(params_, seed);
    word_ = b.uniform("embed.word", config_.vocab_size, d, 0.5);
    state_ = b.uniform("embed.state", 3, d, 0.5);
    positions_ = sinusoidal_positions(config_.max_positions, d);
    enc_ctx_ = b.encoder("enc_ctx", config_, d);
    if (v.uses_knowledge()) {
      if (v.affective) {
        enc_aff_ = b.encoder("enc_aff", config_, d);
        enc_ctx_aff_ = b.encoder("enc_ctx_aff", config_, 2 * d);
      }
      if (v.cognitive) {
        enc_cog_ = b.encoder("enc_cog", config_, d);
        enc_ctx_cog_ = b.encoder("enc_ctx_cog", config_, 2 * d);
        select_hidden_ = b.linear("select.hidden", refine_blocks() * d, d);
        select_out_ = b.linear("select.out", d, d);
      } else {
        select_out_ = b.linear("select.linear", refine_blocks() * d, d);
      }
    }
    if (v.has_emotion_head()) emotion_ = b.uniform("emotion.w", d, config_.n_emotions, std::sqrt(6.0 / (d + config_.n_emotions)));
    decoder_ = b.decoder("dec", config_);
  }

  const ModelConfig& config() const { return config_; }
  ag::ParamStore& params() { return params_; }
  const ag::ParamStore& params() const { return params_; }
  int word_embedding_id() const { return word_; }
  int state_embedding_id() const { return state_; }
  std::optional<int> emotion_weight_id() const { return emotion_; }
  const Mat& positions() const { return positions_; }

  // Number of d-wide blocks concatenated into the refined representation.
  int refine_blocks() const {
    const Variant& v = config_.variant;
    return (v.affective ? 1 : 0) + (v.cognitive ? 4 : 0);
  }

  // word[token] + pos[i] (+ state[state_i] when states are given).
  Var embed_sequence(Pass& p, std::span<const int> tokens, std::span<const int> states = {}) const {
    if (static_cast<int>(tokens.size()) > config_.max_positions)
      throw DataError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds positional table of " +
                      std::to_string(config_.max_positions));
    if (!states.empty() && states.size() != tokens.size())
      throw std::invalid_argument("embed_sequence: state length mismatch");
    Tape& t = p.tape;
    Var e = ag::embed_rows(t, word_, tokens);
    e = ag::add(t, e, t.constant(positions_.topRows(static_cast<Eigen::Index>(tokens.size()))));
    if (!states.empty()) e = ag::add(t, e, ag::embed_rows(t, state_, states));
    return e;
  }

  Var encode_context_seq(Pass& p, Var embedded, std::span<const int> mask) const {
    Var x = nn::dropout(p, embedded);
    return enc_ctx_(p, x, key_padding_bias(static_cast<int>(mask.size()), mask));
  }

  // Affective sequences pool by masked mean, cognitive ones by the [CLS] row.
  PooledEncoding encode_commonsense(Pass& p, Relation r, std::span<const int> tokens,
                                    std::span<const int> mask) const {
    const bool cognitive = relation_group(r) == RelationGroup::cognitive;
    if (tokens.empty()) throw KnowledgeError("empty relation sequence");
    if (cognitive != (tokens[0] == kCls))
      throw KnowledgeError(std::string("relation sequence for ") + relation_name(r) +
                           (cognitive ? " must" : " must not") + " start with [CLS]");
    const nn::Encoder* enc = cognitive ? (enc_cog_ ? &*enc_cog_ : nullptr) : (enc_aff_ ? &*enc_aff_ : nullptr);
    if (!enc) throw UsageError(std::string("model variant has no encoder for ") + relation_name(r));
    Var x = nn::dropout(p, embed_sequence(p, tokens));
    Var h = (*enc)(p, x, key_padding_bias(static_cast<int>(mask.size()), mask));
    Var pooled;
    if (cognitive) {
      pooled = ag::slice_rows(p.tape, h, 0, 1);
    } else {
      std::vector<double> m(mask.begin(), mask.end());
      pooled = ag::masked_mean_rows(p.tape, h, m);
    }
    return {h, pooled};
  }

  // U[i] = H_CTX[i] ++ pooled, then the group's refinement encoder.
  Var refine_context(Pass& p, Var context_hidden, Var pooled, RelationGroup group, std::span<const int> mask,
                     Var* concatenated = nullptr) const {
    Tape& t = p.tape;
    const Mat& H = t.value(context_hidden);
    if (t.value(pooled).rows() != 1 || t.value(pooled).cols() != H.cols())
      throw std::invalid_argument("refine_context: pooled vector must have dimension d");
    const nn::Encoder* enc = group == RelationGroup::affective ? (enc_ctx_aff_ ? &*enc_ctx_aff_ : nullptr)
                                                               : (enc_ctx_cog_ ? &*enc_ctx_cog_ : nullptr);
    if (!enc) throw UsageError("model variant has no refinement encoder for this group");
    std::array<Var, 2> parts{context_hidden, ag::repeat_row(t, pooled, H.rows())};
    Var u = ag::concat_cols(t, parts);
    if (concatenated) *concatenated = u;
    return (*enc)(p, u, key_padding_bias(static_cast<int>(mask.size()), mask));
  }

  // Softmax(W_e^T h) over the first row of `hidden`.
  EmotionPrediction classify_emotion(Pass& p, Var hidden) const {
    if (!emotion_) throw UsageError("model variant has no emotion head");
    Var h0 = ag::slice_rows(p.tape, hidden, 0, 1);
    EmotionPrediction e;
    e.logits = ag::matmul(p.tape, h0, p.tape.param(*emotion_));
    e.probs = ag::softmax_rows_value(p.tape.value(e.logits));
    e.argmax = argmax_lowest({e.probs.data(), static_cast<std::size_t>(e.probs.size())});
    return e;
  }

  // sigmoid(H) * H over the concatenated blocks, then the mixing MLP.
  Selection select_knowledge(Pass& p, std::span<const Var> blocks) const {
    if (static_cast<int>(blocks.size()) != refine_blocks())
      throw std::invalid_argument("select_knowledge: expected " + std::to_string(refine_blocks()) + " blocks");
    Tape& t = p.tape;
    const Eigen::Index L = t.value(blocks[0]).rows();
    for (Var b : blocks)
      if (t.value(b).rows() != L || t.value(b).cols() != config_.d_model)
        throw std::invalid_argument("select_knowledge: refined contexts must share (L, d)");
    Selection s;
    s.refine = blocks.size() == 1 ? blocks[0] : ag::concat_cols(t, blocks);
    Var gated = ag::mul(t, ag::sigmoid(t, s.refine), s.refine);
    if (select_hidden_) {
      Var h = ag::relu(t, (*select_hidden_)(p, gated));
      s.fused = (*select_out_)(p, h);
    } else {
      s.fused = (*select_out_)(p, gated);
    }
    return s;
  }

  // Teacher-forced decoder over `prefix` (starting with [SOS]); row t of the
  // result scores the token following prefix[0..t].
  Var decode(Pass& p, std::span<const int> prefix, Var memory, std::span<const int> memory_mask,
             std::vector<Mat>* cross_weights = nullptr) const {
    if (prefix.empty() || prefix[0] != kSos) throw std::invalid_argument("decoder prefix must begin with [SOS]");
    if (static_cast<int>(prefix.size()) > config_.max_positions)
      throw DataError("decoder prefix exceeds positional table");
    Tape& t = p.tape;
    const int T = static_cast<int>(prefix.size());
    Var x = nn::dropout(p, embed_sequence(p, prefix));
    Mat self_bias = causal_bias(T);
    Mat mem_bias = key_padding_bias(T, memory_mask);
    for (const auto& layer : decoder_) x = layer(p, x, self_bias, memory, mem_bias, cross_weights);
    return ag::matmul_nt(t, x, t.param(word_));
  }

  // Encoder side for row b of a batch, on padded widths: everything up to
  // the decoder memory, plus the emotion prediction.
  RowForward encode_row(Pass& p, const Batch& batch, int b) const {
    const Variant& v = config_.variant;
    const auto Lmax = static_cast<std::size_t>(batch.context.cols());
    std::span<const int> ctx(batch.context.row(b).data(), Lmax);
    std::span<const int> st(batch.states.row(b).data(), Lmax);
    std::span<const int> mask(batch.context_mask.row(b).data(), Lmax);
    RowForward out;
    out.context_hidden = encode_context_seq(p, embed_sequence(p, ctx, st), mask);
    out.memory = out.context_hidden;
    if (v.uses_knowledge()) {
      for (Relation r : kRelations) {
        const bool affective = relation_group(r) == RelationGroup::affective;
        if ((affective && !v.affective) || (!affective && !v.cognitive)) continue;
        auto ri = static_cast<std::size_t>(relation_index(r));
        const IdMatrix& rm = batch.relations[ri];
        const int len = batch.relation_lengths[ri][static_cast<std::size_t>(b)];
        std::span<const int> toks(rm.row(b).data(), static_cast<std::size_t>(rm.cols()));
        std::vector<int> rmask(static_cast<std::size_t>(rm.cols()), 0);
        for (int i = 0; i < len; ++i) rmask[static_cast<std::size_t>(i)] = 1;
        auto enc = encode_commonsense(p, r, toks, rmask);
        Var u;
        out.refined.push_back(refine_context(p, out.context_hidden, enc.pooled, relation_group(r), mask, &u));
        out.concatenated.push_back(u);
      }
      auto sel = select_knowledge(p, out.refined);
      out.refine = sel.refine;
      out.memory = sel.fused;
    }
    if (v.has_emotion_head()) {
      Var source = (v.uses_knowledge() && v.affective) ? out.refined[0] : out.context_hidden;
      out.emotion = classify_emotion(p, source);
    }
    return out;
  }

  // Full teacher-forced pipeline for row b of a batch.
  RowForward forward_row(Pass& p, const Batch& batch, int b) const {
    RowForward out = encode_row(p, batch, b);
    const auto Tmax = batch.targets.cols();
    const int tlen = batch.target_lengths[static_cast<std::size_t>(b)];
    std::span<const int> mask(batch.context_mask.row(b).data(), static_cast<std::size_t>(batch.context.cols()));
    std::span<const int> prefix(batch.targets.row(b).data(), static_cast<std::size_t>(Tmax - 1));
    out.logits = decode(p, prefix, out.memory, mask);
    out.predicted.assign(batch.targets.row(b).data() + 1, batch.targets.row(b).data() + Tmax);
    out.target_mask.assign(static_cast<std::size_t>(Tmax - 1), 0.0);
    for (int i = 0; i + 1 < tlen; ++i) out.target_mask[static_cast<std::size_t>(i)] = 1.0;
    return out;
  }

  // Inference-mode forward over a batch.
  ModelOutput forward(const Batch& batch) const {
    ModelOutput out;
    if (config_.variant.has_emotion_head()) out.emotion_probs = Mat::Zero(batch.size(), config_.n_emotions);
    for (int b = 0; b < batch.size(); ++b) {
      Tape t(params_);
      Pass p{t};
      auto row = forward_row(p, batch, b);
      out.logits.push_back(t.value(row.logits));
      out.fused.push_back(t.value(row.memory));
      if (row.refine.valid()) out.refine.push_back(t.value(row.refine));
      if (row.emotion) {
        out.emotion_probs.row(b) = row.emotion->probs.row(0);
        out.emotion_argmax.push_back(row.emotion->argmax);
      }
    }
    return out;
  }

  // Greedy decoding from [SOS]; stops at [EOS] or after max_steps tokens.
  std::vector<int> generate(const ContextSequence& context, const KnowledgeSequences& knowledge,
                            int max_steps = -1) const {
    if (max_steps < 0) max_steps = config_.max_decode_steps;
    max_steps = std::min(max_steps, config_.max_decode_steps);
    Example ex;
    ex.context = context;
    ex.target = {kSos, kEos};
    ex.knowledge = knowledge;
    Batch batch = collate({&ex});
    // Encoder side once; the decoder reruns over the growing prefix.
    Tape t(params_);
    Pass p{t};
    const auto L = batch.context.cols();
    std::span<const int> mask(batch.context_mask.row(0).data(), static_cast<std::size_t>(L));
    Var memory = encode_row(p, batch, 0).memory;
    std::vector<int> prefix{kSos};
    std::vector<int> out;
    for (int step = 0; step < max_steps; ++step) {
      Tape dt(params_);
      Pass dp{dt};
      Var mem = dt.constant(t.value(memory));
      Var logits = decode(dp, prefix, mem, mask);
      const Mat& lv = dt.value(logits);
      // Framing tokens other than [EOS] are never emitted.
      std::vector<double> scores(lv.row(lv.rows() - 1).data(), lv.row(lv.rows() - 1).data() + lv.cols());
      for (int banned : {kPad, kCls, kSos}) scores[static_cast<std::size_t>(banned)] = kMaskedLogit;
      int next = argmax_lowest(scores);
      if (next == kEos) break;
      out.push_back(next);
      prefix.push_back(next);
    }
    return out;
  }

  const std::vector<nn::DecoderLayer>& decoder_layers() const { return decoder_; }

 private:
  ModelConfig config_;
  ag::ParamStore params_;
  int word_ = -1;
  int state_ = -1;
  Mat positions_;
  nn::Encoder enc_ctx_;
  std::optional<nn::Encoder> enc_aff_, enc_cog_, enc_ctx_aff_, enc_ctx_cog_;
  std::optional<nn::Linear> select_hidden_, select_out_;
  std::optional<int> emotion_;
  std::vector<nn::DecoderLayer> decoder_;
};

// Reads "word v_1 ... v_d" lines into the shared embedding table; returns
// the number of vocabulary rows initialized.
inline int load_pretrained_embeddings(CemModel& model, const Vocabulary& vocab, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embedding file " + path);
  Mat& table = model.params().value(model.word_embedding_id());
  const int d = model.config().d_model;
  int found = 0;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::string word;
    if (!(ss >> word) || !vocab.contains(word)) continue;
    std::vector<double> vals;
    double x;
    while (ss >> x) vals.push_back(x);
    if (static_cast<int>(vals.size()) != d)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(d) + " values");
    int id = vocab.id(word);
    for (int i = 0; i < d; ++i) table(id, i) = vals[static_cast<std::size_t>(i)];
    ++found;
  }
  return found;
}

}  // namespace cem
