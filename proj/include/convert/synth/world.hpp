#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "convert/faq/dataset.hpp"
#include "convert/pairgen/pairgen.hpp"

// A toy world of topics for desk-scale experiments. Each topic owns a few
// concepts, each concept has several interchangeable surface forms (made-up
// words). Text about a topic mentions its concepts through random forms, so a
// model has to learn which forms belong together to match a question with an
// answer that words things differently.
namespace convert::synth {

struct WorldConfig {
  std::size_t topics = 40;
  std::size_t faq_answers = 30;        // the first topics get an FAQ entry
  std::size_t concepts_per_topic = 8;
  std::size_t forms_per_concept = 3;
  std::size_t common_forms = 2;        // forms that show up in chat threads
  std::size_t questions_per_answer = 16;
  std::uint64_t seed = 7;
};

class World {
 public:
  explicit World(WorldConfig cfg) : cfg_(cfg) {
    if (cfg.topics == 0 || cfg.concepts_per_topic < 3 || cfg.forms_per_concept == 0) {
      fail(ErrorCode::config, "world needs topics with at least 3 concepts and 1 form each");
    }
    if (cfg.faq_answers > cfg.topics) fail(ErrorCode::config, "more FAQ answers than topics");
    if (cfg.common_forms == 0 || cfg.common_forms > cfg.forms_per_concept) {
      fail(ErrorCode::config, "common_forms must be in [1, forms_per_concept]");
    }
    std::mt19937_64 rng(cfg.seed);
    std::set<std::string> used(function_words().begin(), function_words().end());
    forms_.resize(cfg.topics);
    for (auto& topic : forms_) {
      topic.resize(cfg.concepts_per_topic);
      for (auto& concept_forms : topic) {
        for (std::size_t f = 0; f < cfg.forms_per_concept; ++f) concept_forms.push_back(fresh_word(rng, used));
      }
    }
  }

  const WorldConfig& config() const { return cfg_; }
  const std::string& form(std::size_t topic, std::size_t concept_id, std::size_t f) const {
    return forms_.at(topic).at(concept_id).at(f);
  }

  // Paragraphs of capitalized statements, one topic each.
  std::vector<std::string> paragraphs(std::size_t count, std::size_t sentences, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::vector<std::string> out;
    for (std::size_t p = 0; p < count; ++p) {
      const std::size_t topic = pick(rng, cfg_.topics);
      std::string text;
      for (std::size_t s = 0; s < sentences; ++s) {
        if (!text.empty()) text += ' ';
        text += capitalize(fill(statement_patterns(), topic, cfg_.forms_per_concept, rng));
      }
      out.push_back(std::move(text));
    }
    return out;
  }

  // Adjacent-sentence pairs through the regular general-pair builder.
  std::vector<pairs::UtterancePair> general_pairs(std::size_t count, std::uint64_t seed) const {
    std::vector<pairs::UtterancePair> out;
    pairs::GeneralPairBuilder builder;
    std::uint64_t round = seed;
    while (out.size() < count) {
      for (const auto& p : paragraphs(256, 6, round++)) {
        builder.add_paragraph(p, [&](pairs::UtterancePair pair) {
          if (out.size() < count) out.push_back(std::move(pair));
        });
      }
    }
    return out;
  }

  // Question threads: a root question with replies, some replies followed up.
  // Only the common forms appear, chat being narrower than edited text.
  std::vector<pairs::CommentNode> threads(std::size_t count, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::vector<pairs::CommentNode> nodes;
    for (std::size_t t = 0; t < count; ++t) {
      const std::size_t topic = pick(rng, cfg_.topics);
      const std::string root = "t" + std::to_string(t);
      nodes.push_back({root, std::nullopt, fill(question_patterns(), topic, cfg_.common_forms, rng)});
      for (std::size_t r = 0; r < 2; ++r) {
        const std::string reply = root + "r" + std::to_string(r);
        nodes.push_back({reply, root, fill(answer_patterns(), topic, cfg_.common_forms, rng)});
      }
    }
    return nodes;
  }

  std::vector<pairs::UtterancePair> conversational_pairs(std::size_t count, std::uint64_t seed) const {
    auto out = pairs::make_conversational_pairs(threads((count + 1) / 2, seed));
    out.resize(count);
    return out;
  }

  // One answer per FAQ topic (ids 100, 101, ...), worded with common forms;
  // questions draw from every form.
  faq::FaqDataset faq(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    faq::FaqDataset ds;
    ds.provenance = "synthetic world seed " + std::to_string(cfg_.seed) + ", faq seed " + std::to_string(seed);
    for (std::size_t t = 0; t < cfg_.faq_answers; ++t) {
      const faq::AnswerId id = faq::AnswerId(100 + t);
      ds.answers.emplace(id, capitalize(fill(answer_patterns(), t, cfg_.common_forms, rng)));
      for (std::size_t q = 0; q < cfg_.questions_per_answer; ++q) {
        ds.rows.push_back({fill(question_patterns(), t, cfg_.forms_per_concept, rng), id});
      }
    }
    return ds;
  }

 private:
  static const std::vector<std::string>& function_words() {
    static const std::vector<std::string> w = {"how", "do", "i", "can", "what", "is", "the", "a", "for", "with",
                                               "when", "should", "my", "where", "tell", "me", "about", "and",
                                               "you", "your", "it", "will", "we", "they", "are", "this", "near",
                                               "was", "in", "of", "need", "to", "after", "before", "use"};
    return w;
  }
  // X marks a concept slot.
  static const std::vector<std::string>& statement_patterns() {
    static const std::vector<std::string> p = {"the X was X in the X.", "a X and a X are X.",
                                               "this X is about X and X.", "they X the X near X.",
                                               "we use X for X after X.", "it was X with X and the X."};
    return p;
  }
  static const std::vector<std::string>& question_patterns() {
    static const std::vector<std::string> p = {"how do i X with X?",      "what is the X for X?",
                                               "can i X my X?",           "when should i X the X?",
                                               "where can i X X?",        "is X needed for X?",
                                               "tell me about X and X.",  "what about X X?"};
    return p;
  }
  static const std::vector<std::string>& answer_patterns() {
    static const std::vector<std::string> p = {"you can X the X with X.", "the X is X for X.",
                                               "we X X when X.",          "it will X your X and X.",
                                               "use X before X and X."};
    return p;
  }

  static std::size_t pick(std::mt19937_64& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  }

  static std::string fresh_word(std::mt19937_64& rng, std::set<std::string>& used) {
    static const char* const syllables[] = {"ba", "ko", "li", "tu", "ren", "sa", "mi", "do", "ve", "zu",
                                            "pa", "ni", "go", "ra", "fe", "lu", "ti", "mo", "ka", "sel",
                                            "dri", "vo", "nu", "quo", "bel", "ish", "tor", "ga", "wen", "yo"};
    constexpr std::size_t n = sizeof syllables / sizeof *syllables;
    for (;;) {
      std::string w;
      const std::size_t parts = 2 + pick(rng, 2);
      for (std::size_t i = 0; i < parts; ++i) w += syllables[pick(rng, n)];
      if (used.insert(w).second) return w;
    }
  }

  static std::string capitalize(std::string s) {
    if (!s.empty()) s[0] = char(std::toupper(static_cast<unsigned char>(s[0])));
    return s;
  }

  // Distinct concepts of `topic`, each through one of its first `forms` forms.
  std::string fill(const std::vector<std::string>& patterns, std::size_t topic, std::size_t forms,
                   std::mt19937_64& rng) const {
    const std::string& pattern = patterns[pick(rng, patterns.size())];
    std::vector<std::size_t> concepts(cfg_.concepts_per_topic);
    for (std::size_t i = 0; i < concepts.size(); ++i) concepts[i] = i;
    std::shuffle(concepts.begin(), concepts.end(), rng);
    std::string out;
    std::size_t slot = 0;
    for (char c : pattern) {
      if (c == 'X') {
        out += forms_[topic][concepts[slot++ % concepts.size()]][pick(rng, forms)];
      } else {
        out += c;
      }
    }
    return out;
  }

  WorldConfig cfg_;
  std::vector<std::vector<std::vector<std::string>>> forms_;  // topic -> concept -> forms
};

}  // namespace convert::synth
