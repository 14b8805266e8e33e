#pragma once

// Dialogue records, vocabulary, and context encoding.

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "cem/errors.hpp"
#include "cem/text.hpp"

namespace cem {

using json = nlohmann::json;

enum class Role { speaker, listener };

inline const char* role_name(Role r) { return r == Role::speaker ? "speaker" : "listener"; }

enum class Split { train, valid, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::valid: return "valid";
    case Split::test: return "test";
  }
  return "?";
}

struct Utterance {
  Role role = Role::speaker;
  std::string text;
  bool operator==(const Utterance&) const = default;
};

struct Dialogue {
  std::string conv_id;
  std::string emotion;
  std::vector<Utterance> utterances;
  bool operator==(const Dialogue&) const = default;
};

inline void validate(const Dialogue& d, const EmotionSet& emotions) {
  if (d.conv_id.empty()) throw DataError("dialogue has empty conv_id");
  if (!emotions.contains(d.emotion))
    throw DataError("unknown emotion label '" + d.emotion + "' in dialogue " + d.conv_id);
  if (d.utterances.empty()) throw DataError("dialogue " + d.conv_id + " has no utterances");
  for (std::size_t i = 0; i < d.utterances.size(); ++i)
    if (tokenize(d.utterances[i].text).empty())
      throw DataError("dialogue " + d.conv_id + " utterance " + std::to_string(i) + " is empty");
}

inline json to_json(const Dialogue& d) {
  json utts = json::array();
  for (const auto& u : d.utterances) utts.push_back({{"speaker", role_name(u.role)}, {"text", u.text}});
  return json{{"conv_id", d.conv_id}, {"emotion", d.emotion}, {"utterances", std::move(utts)}};
}

inline Dialogue dialogue_from_json(const json& j) {
  Dialogue d;
  d.conv_id = j.at("conv_id").get<std::string>();
  d.emotion = j.at("emotion").get<std::string>();
  for (const auto& u : j.at("utterances")) {
    auto who = u.at("speaker").get<std::string>();
    Utterance utt;
    if (who == "speaker")
      utt.role = Role::speaker;
    else if (who == "listener")
      utt.role = Role::listener;
    else
      throw DataError("unknown speaker role '" + who + "'");
    utt.text = u.at("text").get<std::string>();
    d.utterances.push_back(std::move(utt));
  }
  return d;
}

inline std::vector<Dialogue> parse_dialogues(std::istream& in, const std::string& source,
                                             const EmotionSet& emotions = EmotionSet::standard()) {
  std::vector<Dialogue> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    Dialogue d;
    try {
      d = dialogue_from_json(json::parse(line));
    } catch (const json::exception& e) {
      throw DataError(source + ":" + std::to_string(lineno) + ": malformed record: " + e.what());
    } catch (const DataError& e) {
      throw DataError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      validate(d, emotions);
    } catch (const DataError& e) {
      throw DataError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(std::move(d));
  }
  return out;
}

inline std::vector<Dialogue> load_dialogues(const std::string& path, Split split,
                                            const EmotionSet& emotions = EmotionSet::standard()) {
  std::ifstream in(path);
  if (!in) throw DataError(std::string("cannot open ") + split_name(split) + " split " + path);
  return parse_dialogues(in, path, emotions);
}

inline void write_dialogues(const std::string& path, const std::vector<Dialogue>& dialogues) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path);
  for (const auto& d : dialogues) out << to_json(d).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Vocabulary

inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kCls = 2;
inline constexpr int kSos = 3;
inline constexpr int kEos = 4;
inline constexpr int kNumSpecials = 5;

inline const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> s{"[PAD]", "[UNK]", "[CLS]", "[SOS]", "[EOS]"};
  return s;
}

inline bool is_special(int id) { return id >= 0 && id < kNumSpecials; }

class Vocabulary {
 public:
  Vocabulary() {
    for (const auto& s : special_tokens()) append(s, 0);
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  long count(int id) const { return counts_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
  }
  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& t : tokenize(text)) ids.push_back(id(t));
    return ids;
  }

  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
  }

  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : tokens_) {
      h = fnv1a(t, h);
      h = fnv1a("\n", h);
    }
    return h;
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw DataError("cannot write vocabulary " + path);
    for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << counts_[i] << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open vocabulary " + path);
    Vocabulary v;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      auto tab = line.find('\t');
      if (tab == std::string::npos) throw DataError(path + ":" + std::to_string(lineno) + ": missing tab");
      std::string tok = line.substr(0, tab);
      long cnt = 0;
      try {
        cnt = std::stol(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw DataError(path + ":" + std::to_string(lineno) + ": bad count");
      }
      if (lineno <= kNumSpecials) {
        if (tok != special_tokens()[static_cast<std::size_t>(lineno - 1)])
          throw DataError(path + ": specials must come first in fixed order");
        continue;
      }
      if (v.contains(tok)) throw DataError(path + ":" + std::to_string(lineno) + ": duplicate token");
      v.append(tok, cnt);
    }
    return v;
  }

  void append(const std::string& tok, long cnt) {
    index_.emplace(tok, static_cast<int>(tokens_.size()));
    tokens_.push_back(tok);
    counts_.push_back(cnt);
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<long> counts_;
  std::unordered_map<std::string, int> index_;
};

// Tokens are ordered by descending count, then lexicographically.
inline Vocabulary build_vocabulary(const std::vector<Dialogue>& dialogues, int min_freq,
                                   const std::vector<std::string>& extra_texts = {}) {
  if (min_freq < 1) throw UsageError("min_freq must be >= 1");
  std::map<std::string, long> counts;
  auto add_text = [&](const std::string& text) {
    for (auto& t : tokenize(text)) ++counts[t];
  };
  for (const auto& d : dialogues)
    for (const auto& u : d.utterances) add_text(u.text);
  for (const auto& t : extra_texts) add_text(t);
  if (counts.empty()) throw DataError("cannot build a vocabulary from an empty corpus");
  std::vector<std::pair<std::string, long>> items;
  for (auto& [tok, c] : counts) {
    bool reserved = std::find(special_tokens().begin(), special_tokens().end(), tok) != special_tokens().end();
    if (c >= min_freq && !reserved) items.emplace_back(tok, c);
  }
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (auto& [tok, c] : items) v.append(tok, c);
  return v;
}

// ---------------------------------------------------------------------------
// Context encoding

inline constexpr int kStateCls = 0;
inline constexpr int kStateSpeaker = 1;
inline constexpr int kStateListener = 2;

struct ContextSequence {
  std::vector<int> token_ids;
  std::vector<int> state_ids;
  std::vector<int> positions;
  int emotion_id = 0;

  int length() const { return static_cast<int>(token_ids.size()); }
  bool operator==(const ContextSequence&) const = default;
};

// [CLS] followed by utterances [0, upto); keeps [CLS] and the newest tokens
// when the history exceeds max_tokens.
inline ContextSequence encode_history(const Dialogue& d, int upto, const Vocabulary& vocab,
                                      int max_tokens, const EmotionSet& emotions = EmotionSet::standard()) {
  if (upto < 1 || upto > static_cast<int>(d.utterances.size()))
    throw DataError("context end " + std::to_string(upto) + " out of range for dialogue " + d.conv_id);
  if (max_tokens < 2) throw UsageError("max_context_tokens must be >= 2");
  std::vector<int> toks, states;
  for (int i = 0; i < upto; ++i) {
    const auto& u = d.utterances[static_cast<std::size_t>(i)];
    int state = u.role == Role::speaker ? kStateSpeaker : kStateListener;
    for (int id : vocab.encode(u.text)) {
      toks.push_back(id);
      states.push_back(state);
    }
  }
  std::size_t keep = static_cast<std::size_t>(max_tokens - 1);
  std::size_t drop = toks.size() > keep ? toks.size() - keep : 0;
  ContextSequence c;
  c.token_ids.push_back(kCls);
  c.state_ids.push_back(kStateCls);
  c.token_ids.insert(c.token_ids.end(), toks.begin() + static_cast<long>(drop), toks.end());
  c.state_ids.insert(c.state_ids.end(), states.begin() + static_cast<long>(drop), states.end());
  c.positions.resize(c.token_ids.size());
  for (std::size_t i = 0; i < c.positions.size(); ++i) c.positions[i] = static_cast<int>(i);
  c.emotion_id = emotions.id(d.emotion);
  return c;
}

// Context preceding the target response at index `upto`.
inline ContextSequence encode_context(const Dialogue& d, int upto, const Vocabulary& vocab,
                                      int max_tokens = 256,
                                      const EmotionSet& emotions = EmotionSet::standard()) {
  if (upto < 1 || upto >= static_cast<int>(d.utterances.size()))
    throw DataError("target index " + std::to_string(upto) + " out of range for dialogue " + d.conv_id);
  return encode_history(d, upto, vocab, max_tokens, emotions);
}

// [SOS] tokens [EOS]
inline std::vector<int> encode_response(std::string_view text, const Vocabulary& vocab) {
  std::vector<int> ids{kSos};
  for (int id : vocab.encode(text)) ids.push_back(id);
  ids.push_back(kEos);
  return ids;
}

// ---------------------------------------------------------------------------
// EmpatheticDialogues CSV adapter

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string unescape_ed(std::string s) {
  const std::string tag = "_comma_";
  for (auto pos = s.find(tag); pos != std::string::npos; pos = s.find(tag, pos + 1)) s.replace(pos, tag.size(), ",");
  return s;
}

// Rows sharing a conv_id become one dialogue; odd utterance_idx rows are the
// speaker, even rows the listener.
inline std::vector<Dialogue> read_empathetic_csv(std::istream& in, const std::string& source,
                                                 const EmotionSet& emotions = EmotionSet::standard()) {
  std::string header;
  if (!std::getline(in, header)) throw DataError(source + ": empty CSV");
  auto cols = split_csv_line(header);
  auto col = [&](const std::string& name) {
    auto it = std::find(cols.begin(), cols.end(), name);
    if (it == cols.end()) throw DataError(source + ": missing column '" + name + "'");
    return static_cast<std::size_t>(it - cols.begin());
  };
  const std::size_t c_conv = col("conv_id"), c_idx = col("utterance_idx"), c_emo = col("context"),
                    c_utt = col("utterance");
  std::vector<Dialogue> out;
  std::unordered_map<std::string, std::size_t> by_id;
  std::vector<std::vector<std::pair<int, std::string>>> turns;
  std::string line;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() < cols.size())
      throw DataError(source + ":" + std::to_string(lineno) + ": expected " + std::to_string(cols.size()) +
                      " fields, got " + std::to_string(f.size()));
    int idx = 0;
    try {
      idx = std::stoi(f[c_idx]);
    } catch (const std::exception&) {
      throw DataError(source + ":" + std::to_string(lineno) + ": bad utterance_idx");
    }
    auto [it, fresh] = by_id.emplace(f[c_conv], out.size());
    if (fresh) {
      Dialogue d;
      d.conv_id = f[c_conv];
      d.emotion = f[c_emo];
      out.push_back(std::move(d));
      turns.emplace_back();
    }
    turns[it->second].emplace_back(idx, unescape_ed(f[c_utt]));
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& t = turns[i];
    std::stable_sort(t.begin(), t.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [idx, text] : t)
      out[i].utterances.push_back({idx % 2 == 1 ? Role::speaker : Role::listener, std::move(text)});
    validate(out[i], emotions);
  }
  return out;
}

}  // namespace cem
