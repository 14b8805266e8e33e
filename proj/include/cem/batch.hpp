#pragma once

// Training examples and right-padded batches.

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "cem/corpus.hpp"
#include "cem/knowledge.hpp"

namespace cem {

using IdMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Example {
  ContextSequence context;
  std::vector<int> target;  // [SOS] ... [EOS]
  KnowledgeSequences knowledge;
  KnowledgeKey key;
  bool operator==(const Example&) const = default;
};

struct EncodeOptions {
  int max_context_tokens = 256;
  int max_knowledge_tokens = 64;
};

// One example per listener turn that has at least one preceding utterance.
inline std::vector<Example> build_examples(const std::vector<Dialogue>& dialogues, const Vocabulary& vocab,
                                           KnowledgeProvider& provider, const EncodeOptions& opt = {},
                                           const EmotionSet& emotions = EmotionSet::standard()) {
  std::vector<Example> out;
  for (const auto& d : dialogues) {
    for (std::size_t k = 1; k < d.utterances.size(); ++k) {
      if (d.utterances[k].role != Role::listener) continue;
      Example ex;
      ex.key = {d.conv_id, static_cast<int>(k) - 1};
      ex.context = encode_context(d, static_cast<int>(k), vocab, opt.max_context_tokens, emotions);
      ex.target = encode_response(d.utterances[k].text, vocab);
      KnowledgeQuery q{ex.key, d.utterances[k - 1].text};
      ex.knowledge = assemble_bundle(provider.bundle(q), vocab, opt.max_knowledge_tokens);
      out.push_back(std::move(ex));
    }
  }
  return out;
}

struct Batch {
  IdMatrix context;  // (B, L_max)
  IdMatrix states;
  IdMatrix context_mask;  // 1 for real tokens
  std::vector<int> context_lengths;
  IdMatrix targets;  // (B, T_max), [SOS] ... [EOS] then [PAD]
  std::vector<int> target_lengths;
  std::vector<int> emotion_ids;
  std::array<IdMatrix, kNumRelations> relations;
  std::array<std::vector<int>, kNumRelations> relation_lengths;

  int size() const { return static_cast<int>(emotion_ids.size()); }

  std::vector<int> context_row(int b) const {
    return {context.row(b).data(), context.row(b).data() + context_lengths[static_cast<std::size_t>(b)]};
  }
  std::vector<int> state_row(int b) const {
    return {states.row(b).data(), states.row(b).data() + context_lengths[static_cast<std::size_t>(b)]};
  }
  std::vector<int> target_row(int b) const {
    return {targets.row(b).data(), targets.row(b).data() + target_lengths[static_cast<std::size_t>(b)]};
  }
  std::vector<int> relation_row(Relation r, int b) const {
    auto ri = static_cast<std::size_t>(relation_index(r));
    const IdMatrix& m = relations[ri];
    return {m.row(b).data(), m.row(b).data() + relation_lengths[ri][static_cast<std::size_t>(b)]};
  }
};

namespace detail {

inline IdMatrix pad_rows(const std::vector<const std::vector<int>*>& rows, std::vector<int>& lengths) {
  std::size_t width = 0;
  for (auto* r : rows) width = std::max(width, r->size());
  IdMatrix m = IdMatrix::Constant(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width), kPad);
  lengths.clear();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i]->size(); ++j)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (*rows[i])[j];
    lengths.push_back(static_cast<int>(rows[i]->size()));
  }
  return m;
}

}  // namespace detail

inline Batch collate(const std::vector<const Example*>& items) {
  Batch b;
  std::vector<const std::vector<int>*> ctx, st, tgt;
  for (auto* e : items) {
    ctx.push_back(&e->context.token_ids);
    st.push_back(&e->context.state_ids);
    tgt.push_back(&e->target);
    b.emotion_ids.push_back(e->context.emotion_id);
  }
  b.context = detail::pad_rows(ctx, b.context_lengths);
  std::vector<int> unused;
  b.states = detail::pad_rows(st, unused);
  b.context_mask = IdMatrix::Zero(b.context.rows(), b.context.cols());
  for (std::size_t i = 0; i < items.size(); ++i)
    b.context_mask.row(static_cast<Eigen::Index>(i)).head(b.context_lengths[i]).setOnes();
  b.targets = detail::pad_rows(tgt, b.target_lengths);
  for (std::size_t r = 0; r < kNumRelations; ++r) {
    std::vector<const std::vector<int>*> rows;
    for (auto* e : items) rows.push_back(&e->knowledge[r].token_ids);
    b.relations[r] = detail::pad_rows(rows, b.relation_lengths[r]);
  }
  return b;
}

// Fisher-Yates with an explicit generator so orders are stable across
// standard library implementations.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
  return idx;
}

// Without a seed the examples keep their order.
inline std::vector<Batch> make_batches(const std::vector<Example>& examples, int batch_size,
                                       std::optional<std::uint64_t> shuffle_seed = std::nullopt) {
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (examples.empty()) throw DataError("cannot batch an empty example list");
  std::vector<std::size_t> order;
  if (shuffle_seed) {
    order = shuffled_indices(examples.size(), *shuffle_seed);
  } else {
    for (std::size_t i = 0; i < examples.size(); ++i) order.push_back(i);
  }
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<const Example*> items;
    for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(batch_size)); ++i)
      items.push_back(&examples[order[i]]);
    out.push_back(collate(items));
  }
  return out;
}

}  // namespace cem
