#pragma once

// Template-generated dialogues for desk-scale experiments. Every emotion owns
// a disjoint cue lexicon, and the listener reply is a fixed function of the
// emotion and the topic, so both classification and generation are learnable.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "cem/batch.hpp"
#include "cem/corpus.hpp"
#include "cem/knowledge.hpp"

namespace cem {

namespace synth {

struct Lexicon {
  std::string label;
  std::array<std::string, 2> cues;
};

inline const std::unordered_map<std::string, std::array<std::string, 2>>& cue_table() {
  static const std::unordered_map<std::string, std::array<std::string, 2>> t{
      {"surprised", {"shocked", "stunned"}},       {"excited", {"thrilled", "pumped"}},
      {"annoyed", {"irritated", "bugged"}},        {"proud", {"honored", "accomplished"}},
      {"angry", {"mad", "enraged"}},               {"sad", {"unhappy", "down"}},
      {"grateful", {"thankful", "appreciative"}},  {"lonely", {"isolated", "alone"}},
      {"impressed", {"amazed", "wowed"}},          {"afraid", {"scared", "frightened"}},
      {"disgusted", {"grossed", "repulsed"}},      {"confident", {"sure", "certain"}},
      {"terrified", {"petrified", "horrified"}},   {"hopeful", {"optimistic", "wishful"}},
      {"anxious", {"nervous", "worried"}},         {"disappointed", {"letdown", "dismayed"}},
      {"joyful", {"cheerful", "delighted"}},       {"prepared", {"ready", "organized"}},
      {"guilty", {"remorseful", "culpable"}},      {"furious", {"livid", "fuming"}},
      {"nostalgic", {"reminiscing", "wistful"}},   {"jealous", {"envious", "covetous"}},
      {"anticipating", {"awaiting", "expecting"}}, {"embarrassed", {"mortified", "awkward"}},
      {"content", {"satisfied", "peaceful"}},      {"devastated", {"crushed", "heartbroken"}},
      {"sentimental", {"tender", "mushy"}},        {"caring", {"nurturing", "compassionate"}},
      {"trusting", {"reliant", "believing"}},      {"ashamed", {"humiliated", "disgraced"}},
      {"apprehensive", {"uneasy", "wary"}},        {"faithful", {"loyal", "devoted"}},
  };
  return t;
}

inline Lexicon lexicon_for(const std::string& label) {
  auto it = cue_table().find(label);
  if (it != cue_table().end()) return {label, it->second};
  return {label, {label + "ish", "very" + label}};
}

inline const std::vector<std::string>& topics() {
  static const std::vector<std::string> t{"dog",  "cat",   "job",    "car",     "exam", "house",
                                          "garden", "sister", "brother", "trip", "phone", "bike"};
  return t;
}

inline const std::vector<std::string>& openers() {
  static const std::vector<std::string> o{"oh wow", "i am sorry to hear that", "that is great", "oh no"};
  return o;
}

inline const std::vector<std::string>& closings() {
  static const std::vector<std::string> c{"i hope you enjoy", "take good care of", "good luck with",
                                          "i understand about"};
  return c;
}

inline std::string first_reply(int emotion_rank, const std::string& label, const std::string& topic) {
  return openers()[static_cast<std::size_t>(emotion_rank) % openers().size()] + " . you must be " + label +
         " about your " + topic + " .";
}

inline std::string second_reply(int emotion_rank, const std::string& topic) {
  return closings()[static_cast<std::size_t>(emotion_rank) % closings().size()] + " the " + topic + " .";
}

template <typename T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  return v[rng() % v.size()];
}

}  // namespace synth

// Balanced: emotion i % n_emotions for i in [0, n_dialogues), then shuffled.
inline std::vector<Dialogue> generate_synthetic_corpus(int n_dialogues, int n_emotions, std::uint64_t seed,
                                                       const EmotionSet& emotions = EmotionSet::standard()) {
  if (n_emotions < 2 || n_emotions > emotions.size())
    throw UsageError("n_emotions must be in [2, " + std::to_string(emotions.size()) + "]");
  if (n_dialogues < 1) throw UsageError("n_dialogues must be >= 1");
  std::mt19937_64 rng(seed);
  static const std::vector<std::string> tails{"today", "lately", "this week", "again"};
  std::vector<int> order_emotion(static_cast<std::size_t>(n_dialogues));
  auto perm = shuffled_indices(static_cast<std::size_t>(n_dialogues), seed ^ 0x9E3779B97F4A7C15ULL);
  for (int i = 0; i < n_dialogues; ++i) order_emotion[perm[static_cast<std::size_t>(i)]] = i % n_emotions;

  std::vector<Dialogue> out;
  for (int i = 0; i < n_dialogues; ++i) {
    int e = order_emotion[static_cast<std::size_t>(i)];
    auto lex = synth::lexicon_for(emotions.label(e));
    std::vector<std::string> cues{lex.label, lex.cues[0], lex.cues[1]};
    const std::string& topic = synth::pick(synth::topics(), rng);
    const std::string& cue = synth::pick(cues, rng);
    const std::string& tail = synth::pick(tails, rng);
    std::string opening;
    switch (rng() % 3) {
      case 0: opening = "i feel " + cue + " about my " + topic + " " + tail; break;
      case 1: opening = "my " + topic + " made me " + cue + " " + tail; break;
      default: opening = tail + " i was " + cue + " because of my " + topic; break;
    }
    Dialogue d;
    d.conv_id = "synth-" + std::to_string(i);
    d.emotion = lex.label;
    d.utterances.push_back({Role::speaker, opening});
    d.utterances.push_back({Role::listener, synth::first_reply(e, lex.label, topic)});
    if (rng() % 4 == 0) {
      std::string topic2 = synth::pick(synth::topics(), rng);
      std::string cue2 = synth::pick(cues, rng);
      d.utterances.push_back({Role::speaker, "yes , and the " + topic2 + " too . i am still " + cue2});
      d.utterances.push_back({Role::listener, synth::second_reply(e, topic2)});
    }
    out.push_back(std::move(d));
  }
  return out;
}

// Deterministic stand-in for a commonsense generator over synthetic text:
// recognizes cue words and topics and emits relation-shaped inferences.
class SyntheticProvider : public KnowledgeProvider {
 public:
  explicit SyntheticProvider(const EmotionSet& emotions = EmotionSet::standard()) {
    for (const auto& label : emotions.labels()) {
      auto lex = synth::lexicon_for(label);
      cue_to_label_[lex.label] = lex.label;
      for (const auto& c : lex.cues) cue_to_label_[c] = lex.label;
    }
  }

  using KnowledgeProvider::query;
  Inferences query(const KnowledgeQuery& q, Relation r) override {
    std::string label, topic;
    for (const auto& tok : tokenize(q.text)) {
      auto it = cue_to_label_.find(tok);
      if (it != cue_to_label_.end() && label.empty()) label = it->second;
      for (const auto& t : synth::topics())
        if (tok == t && topic.empty()) topic = t;
    }
    if (label.empty()) return Inferences{"none", "none", "none", "none", "none"};
    if (topic.empty()) topic = "thing";
    auto lex = synth::lexicon_for(label);
    switch (r) {
      case Relation::xReact:
        return {lex.cues[0], lex.label, lex.cues[1], lex.label, lex.cues[0]};
      case Relation::xWant:
        return {"to talk about the " + topic, "to share", "to be heard", "to tell a friend", "to rest"};
      case Relation::xNeed:
        return {"to have a " + topic, "to care", "to notice", "to wait", "to think"};
      case Relation::xIntent:
        return {"to express being " + label, "to connect", "to explain", "to be understood", "to open up"};
      case Relation::xEffect:
        return {"gets " + label, "thinks about the " + topic, "talks", "sighs", "smiles"};
    }
    return {};
  }

 private:
  std::unordered_map<std::string, std::string> cue_to_label_;
};

}  // namespace cem
