#pragma once

// Commonsense inferences: relation taxonomy, the on-disk cache, providers,
// and assembly of relation token sequences.

#include <array>
#include <atomic>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <httplib.h>
// <resolv.h> defines _res as a macro, which collides with Eigen parameter names.
#ifdef _res
#undef _res
#endif
#include <json.hpp>

#include "cem/corpus.hpp"
#include "cem/errors.hpp"

namespace cem {

enum class Relation { xReact = 0, xWant = 1, xNeed = 2, xIntent = 3, xEffect = 4 };
enum class RelationGroup { affective, cognitive };

inline constexpr int kNumRelations = 5;
inline constexpr int kInferencesPerRelation = 5;
inline constexpr std::array<Relation, kNumRelations> kRelations{
    Relation::xReact, Relation::xWant, Relation::xNeed, Relation::xIntent, Relation::xEffect};
inline constexpr std::array<Relation, 4> kCognitiveRelations{Relation::xWant, Relation::xNeed,
                                                             Relation::xIntent, Relation::xEffect};

inline const char* relation_name(Relation r) {
  switch (r) {
    case Relation::xReact: return "xReact";
    case Relation::xWant: return "xWant";
    case Relation::xNeed: return "xNeed";
    case Relation::xIntent: return "xIntent";
    case Relation::xEffect: return "xEffect";
  }
  return "?";
}

inline RelationGroup relation_group(Relation r) {
  return r == Relation::xReact ? RelationGroup::affective : RelationGroup::cognitive;
}

// xAttr and anything outside the five supported relations is rejected.
inline Relation relation_from_name(std::string_view name) {
  for (Relation r : kRelations)
    if (name == relation_name(r)) return r;
  if (name == "xAttr") throw KnowledgeError("relation xAttr is not used");
  throw KnowledgeError("unknown relation '" + std::string(name) + "'");
}

inline int relation_index(Relation r) { return static_cast<int>(r); }

using Inferences = std::array<std::string, kInferencesPerRelation>;

struct KnowledgeKey {
  std::string conv_id;
  int turn_index = 0;
  auto operator<=>(const KnowledgeKey&) const = default;
};

inline std::string to_string(const KnowledgeKey& k) {
  return "(" + k.conv_id + ", " + std::to_string(k.turn_index) + ")";
}

struct CommonsenseBundle {
  KnowledgeKey key;
  std::array<Inferences, kNumRelations> relations;

  const Inferences& at(Relation r) const { return relations[static_cast<std::size_t>(relation_index(r))]; }
  Inferences& at(Relation r) { return relations[static_cast<std::size_t>(relation_index(r))]; }
  bool operator==(const CommonsenseBundle&) const = default;
};

inline void validate(const CommonsenseBundle& b) {
  for (Relation r : kRelations)
    for (const auto& s : b.at(r))
      if (trim(s).empty())
        throw KnowledgeError("empty inference for " + std::string(relation_name(r)) + " at " + to_string(b.key));
}

inline Inferences inferences_from_json(const json& arr, const std::string& where) {
  if (!arr.is_array() || arr.size() != kInferencesPerRelation)
    throw KnowledgeError(where + ": expected exactly 5 inferences");
  Inferences inf;
  for (std::size_t i = 0; i < inf.size(); ++i) inf[i] = arr[i].get<std::string>();
  return inf;
}

inline json to_json(const CommonsenseBundle& b) {
  json rel = json::object();
  for (Relation r : kRelations) rel[relation_name(r)] = b.at(r);
  return json{{"conv_id", b.key.conv_id}, {"turn_index", b.key.turn_index}, {"relations", std::move(rel)}};
}

inline CommonsenseBundle bundle_from_json(const json& j, const std::string& where) {
  CommonsenseBundle b;
  b.key.conv_id = j.at("conv_id").get<std::string>();
  b.key.turn_index = j.at("turn_index").get<int>();
  const json& rel = j.at("relations");
  if (rel.size() != kNumRelations) throw KnowledgeError(where + ": expected exactly 5 relations");
  for (Relation r : kRelations) b.at(r) = inferences_from_json(rel.at(relation_name(r)), where);
  validate(b);
  return b;
}

using KnowledgeCache = std::map<KnowledgeKey, CommonsenseBundle>;

inline std::size_t write_cache(const std::vector<CommonsenseBundle>& bundles, const std::string& path) {
  std::map<KnowledgeKey, bool> seen;
  for (const auto& b : bundles) {
    validate(b);
    if (!seen.emplace(b.key, true).second) throw KnowledgeError("duplicate knowledge key " + to_string(b.key));
  }
  std::ofstream out(path);
  if (!out) throw KnowledgeError("cannot write knowledge cache " + path);
  for (const auto& b : bundles) out << to_json(b).dump() << '\n';
  return bundles.size();
}

inline std::size_t write_cache(const KnowledgeCache& cache, const std::string& path) {
  std::vector<CommonsenseBundle> v;
  v.reserve(cache.size());
  for (const auto& [k, b] : cache) v.push_back(b);
  return write_cache(v, path);
}

inline KnowledgeCache read_cache(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw KnowledgeError("cannot open knowledge cache " + path);
  KnowledgeCache cache;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::string where = path + ":" + std::to_string(lineno);
    CommonsenseBundle b;
    try {
      b = bundle_from_json(json::parse(line), where);
    } catch (const json::exception& e) {
      throw KnowledgeError(where + ": corrupt record: " + e.what());
    } catch (const KnowledgeError& e) {
      throw KnowledgeError(std::string(e.what()).rfind(where, 0) == 0 ? e.what() : where + ": " + e.what());
    }
    if (!cache.emplace(b.key, b).second) throw KnowledgeError(where + ": duplicate key " + to_string(b.key));
  }
  return cache;
}

// ---------------------------------------------------------------------------
// Providers

struct KnowledgeQuery {
  KnowledgeKey key;
  std::string text;  // last utterance of the history
};

class KnowledgeProvider {
 public:
  virtual ~KnowledgeProvider() = default;
  virtual Inferences query(const KnowledgeQuery& q, Relation r) = 0;

  Inferences query(const KnowledgeQuery& q, std::string_view relation) {
    return query(q, relation_from_name(relation));
  }

  CommonsenseBundle bundle(const KnowledgeQuery& q) {
    CommonsenseBundle b;
    b.key = q.key;
    for (Relation r : kRelations) b.at(r) = query(q, r);
    return b;
  }
};

enum class Fallback { error, neutral };

inline Fallback fallback_from_name(std::string_view s) {
  if (s == "error") return Fallback::error;
  if (s == "neutral") return Fallback::neutral;
  throw UsageError("fallback must be 'error' or 'neutral', got '" + std::string(s) + "'");
}

class CacheProvider : public KnowledgeProvider {
 public:
  explicit CacheProvider(KnowledgeCache cache, Fallback fallback = Fallback::error,
                         std::string neutral = "none")
      : cache_(std::move(cache)), fallback_(fallback), neutral_(std::move(neutral)) {}

  using KnowledgeProvider::query;
  Inferences query(const KnowledgeQuery& q, Relation r) override {
    auto it = cache_.find(q.key);
    if (it != cache_.end()) return it->second.at(r);
    if (fallback_ == Fallback::error) throw KnowledgeError("missing knowledge for key " + to_string(q.key));
    Inferences inf;
    inf.fill(neutral_);
    return inf;
  }

  bool contains(const KnowledgeKey& k) const { return cache_.count(k) != 0; }
  const KnowledgeCache& cache() const { return cache_; }

 private:
  KnowledgeCache cache_;
  Fallback fallback_;
  std::string neutral_;
};

struct RemoteConfig {
  std::string url;  // e.g. http://127.0.0.1:8080/generate
  double timeout_seconds = 10.0;
  int retries = 2;
};

// POSTs {text, relation, num_generations: 5}; expects {inferences: [5]}.
class RemoteProvider : public KnowledgeProvider {
 public:
  explicit RemoteProvider(RemoteConfig cfg) : cfg_(std::move(cfg)) {
    auto scheme = cfg_.url.find("://");
    if (scheme == std::string::npos) throw UsageError("knowledge url must include a scheme: " + cfg_.url);
    auto path_start = cfg_.url.find('/', scheme + 3);
    host_ = cfg_.url.substr(0, path_start);
    path_ = path_start == std::string::npos ? "/" : cfg_.url.substr(path_start);
  }

  static std::string query_text(const std::string& utterance, Relation r) {
    return utterance + " [" + relation_name(r) + "]";
  }

  using KnowledgeProvider::query;
  Inferences query(const KnowledgeQuery& q, Relation r) override {
    json body{{"text", query_text(q.text, r)},
              {"relation", relation_name(r)},
              {"num_generations", kInferencesPerRelation}};
    httplib::Client cli(host_);
    auto secs = static_cast<time_t>(cfg_.timeout_seconds);
    auto usecs = static_cast<time_t>((cfg_.timeout_seconds - static_cast<double>(secs)) * 1e6);
    cli.set_connection_timeout(secs, usecs);
    cli.set_read_timeout(secs, usecs);
    cli.set_write_timeout(secs, usecs);
    std::string last_error = "no attempt";
    for (int attempt = 0; attempt <= cfg_.retries; ++attempt) {
      auto res = cli.Post(path_, body.dump(), "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      try {
        return inferences_from_json(json::parse(res->body).at("inferences"), "remote response");
      } catch (const std::exception& e) {
        throw KnowledgeError(std::string("malformed remote response: ") + e.what());
      }
    }
    throw KnowledgeError("transport error after " + std::to_string(cfg_.retries) + " retries for key " +
                         to_string(q.key) + ": " + last_error);
  }

 private:
  RemoteConfig cfg_;
  std::string host_;
  std::string path_;
};

// Queries a provider for every key, at most `max_in_flight` at a time.
// Results are placed by index so completion order does not matter.
inline std::vector<CommonsenseBundle> fetch_bundles(const std::vector<KnowledgeQuery>& queries,
                                                    const std::function<std::unique_ptr<KnowledgeProvider>()>& make,
                                                    int max_in_flight = 1) {
  std::vector<CommonsenseBundle> out(queries.size());
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::optional<KnowledgeError> first_error;
  auto worker = [&] {
    auto provider = make();
    for (std::size_t i = next++; i < queries.size(); i = next++) {
      try {
        out[i] = provider->bundle(queries[i]);
      } catch (const KnowledgeError& e) {
        std::lock_guard lk(err_mu);
        if (!first_error) first_error = e;
        return;
      }
    }
  };
  int n = std::max(1, std::min<int>(max_in_flight, static_cast<int>(queries.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) throw *first_error;
  return out;
}

// Every listener turn at index k > 0 needs knowledge for the utterance k-1.
inline std::vector<KnowledgeQuery> knowledge_queries(const std::vector<Dialogue>& dialogues) {
  std::vector<KnowledgeQuery> out;
  for (const auto& d : dialogues)
    for (std::size_t k = 1; k < d.utterances.size(); ++k)
      if (d.utterances[k].role == Role::listener)
        out.push_back({{d.conv_id, static_cast<int>(k) - 1}, d.utterances[k - 1].text});
  return out;
}

// ---------------------------------------------------------------------------
// Relation sequences

struct RelationSequence {
  Relation relation = Relation::xReact;
  std::vector<int> token_ids;
  int length() const { return static_cast<int>(token_ids.size()); }
  bool operator==(const RelationSequence&) const = default;
};

// Concatenates the five inferences; cognitive sequences get a leading
// [CLS]. Overlong sequences are cut from the tail.
inline RelationSequence assemble_relation_sequence(const std::vector<std::string>& inferences, Relation r,
                                                   const Vocabulary& vocab, int max_tokens = 64) {
  if (inferences.size() != kInferencesPerRelation)
    throw KnowledgeError("expected 5 inferences for " + std::string(relation_name(r)) + ", got " +
                         std::to_string(inferences.size()));
  if (max_tokens < 2) throw UsageError("max_knowledge_tokens must be >= 2");
  RelationSequence seq;
  seq.relation = r;
  if (relation_group(r) == RelationGroup::cognitive) seq.token_ids.push_back(kCls);
  for (const auto& s : inferences) {
    auto ids = vocab.encode(s);
    if (ids.empty()) throw KnowledgeError("empty inference for " + std::string(relation_name(r)));
    seq.token_ids.insert(seq.token_ids.end(), ids.begin(), ids.end());
  }
  if (seq.length() > max_tokens) seq.token_ids.resize(static_cast<std::size_t>(max_tokens));
  return seq;
}

inline RelationSequence assemble_relation_sequence(const Inferences& inferences, Relation r,
                                                   const Vocabulary& vocab, int max_tokens = 64) {
  return assemble_relation_sequence(std::vector<std::string>(inferences.begin(), inferences.end()), r, vocab,
                                    max_tokens);
}

using KnowledgeSequences = std::array<RelationSequence, kNumRelations>;

inline KnowledgeSequences assemble_bundle(const CommonsenseBundle& b, const Vocabulary& vocab, int max_tokens) {
  KnowledgeSequences out;
  for (Relation r : kRelations)
    out[static_cast<std::size_t>(relation_index(r))] = assemble_relation_sequence(b.at(r), r, vocab, max_tokens);
  return out;
}

}  // namespace cem
