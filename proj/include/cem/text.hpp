#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cem/errors.hpp"

#ifndef CEM_DATA_DIR
#define CEM_DATA_DIR "data"
#endif

namespace cem {

// Lowercases, splits on whitespace, and emits every ASCII punctuation
// character as its own token.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (c < 128 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(c < 128 ? std::tolower(c) : c));
    }
  }
  flush();
  return out;
}

inline std::string join(const std::vector<std::string>& tokens, std::string_view sep = " ") {
  std::string s;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) s += sep;
    s += tokens[i];
  }
  return s;
}

inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Closed, ordered emotion label set. Ids are positions in the list file.
class EmotionSet {
 public:
  EmotionSet() = default;
  explicit EmotionSet(std::vector<std::string> labels) : labels_(std::move(labels)) {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (!index_.emplace(labels_[i], static_cast<int>(i)).second)
        throw DataError("duplicate emotion label '" + labels_[i] + "'");
    }
  }

  static EmotionSet load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open emotion list " + path);
    std::vector<std::string> labels;
    std::string line;
    while (std::getline(in, line)) {
      auto l = trim(line);
      if (!l.empty()) labels.push_back(l);
    }
    if (labels.size() < 2) throw DataError("emotion list " + path + " has fewer than 2 labels");
    return EmotionSet(std::move(labels));
  }

  static const EmotionSet& standard() {
    static const EmotionSet set = load(std::string(CEM_DATA_DIR) + "/emotions.txt");
    return set;
  }

  int size() const { return static_cast<int>(labels_.size()); }
  bool contains(const std::string& label) const { return index_.count(label) != 0; }
  int id(const std::string& label) const {
    auto it = index_.find(label);
    if (it == index_.end()) throw DataError("unknown emotion label '" + label + "'");
    return it->second;
  }
  const std::string& label(int id) const { return labels_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& labels() const { return labels_; }

 private:
  std::vector<std::string> labels_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace cem
