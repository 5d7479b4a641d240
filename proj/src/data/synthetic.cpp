#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <string>
#include <vector>

#include "blocklm/data.hpp"

namespace blocklm {

namespace {

constexpr std::array<const char*, 18> kOnsets = {"b", "c", "d", "f", "g", "h", "k", "l", "m",
                                                 "n", "p", "r", "s", "t", "v", "br", "st", "tr"};
constexpr std::array<const char*, 7> kVowels = {"a", "e", "i", "o", "u", "ea", "ou"};
constexpr std::array<const char*, 8> kCodas = {"", "", "n", "r", "s", "t", "l", "nd"};

constexpr std::array<const char*, 6> kDeterminers = {"the", "a", "this", "every", "some", "that"};
constexpr std::array<const char*, 7> kPrepositions = {"in", "on", "with", "under", "near", "from", "over"};
constexpr std::array<const char*, 4> kConjunctions = {"and", "but", "while", "because"};

class Lexicon {
 public:
  Lexicon(Rng& rng, size_t count, int min_syll, int max_syll, const char* suffix) {
    std::uniform_int_distribution<int> syll(min_syll, max_syll);
    while (words_.size() < count) {
      std::string w;
      const int n = syll(rng);
      for (int i = 0; i < n; ++i) {
        w += kOnsets[rng() % kOnsets.size()];
        w += kVowels[rng() % kVowels.size()];
        w += kCodas[rng() % kCodas.size()];
      }
      w += suffix;
      if (std::find(words_.begin(), words_.end(), w) == words_.end()) words_.push_back(w);
    }
    // Zipf weights 1/(rank+1)
    std::vector<double> weights;
    for (size_t i = 0; i < words_.size(); ++i) weights.push_back(1.0 / static_cast<double>(i + 1));
    dist_ = std::discrete_distribution<size_t>(weights.begin(), weights.end());
  }

  const std::string& pick(Rng& rng) const { return words_[dist_(rng)]; }

  const std::string& pick_from(Rng& rng, const std::vector<size_t>& subset) const {
    return words_[subset[rng() % subset.size()]];
  }

  size_t size() const { return words_.size(); }

 private:
  std::vector<std::string> words_;
  mutable std::discrete_distribution<size_t> dist_;
};

}  // namespace

std::vector<std::string> synthesize_corpus(size_t target_bytes, uint64_t seed) {
  Rng rng(derive_seed(seed, "synthetic-corpus"));
  const Lexicon nouns(rng, 400, 1, 3, "");
  const Lexicon verbs(rng, 120, 1, 2, "s");
  const Lexicon adjectives(rng, 80, 1, 2, "y");
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  std::vector<std::string> docs;
  size_t total = 0;
  while (total < target_bytes) {
    // Each document favours a small topic vocabulary of nouns.
    std::vector<size_t> topic;
    for (int i = 0; i < 12; ++i) topic.push_back(rng() % nouns.size());
    auto noun = [&]() -> const std::string& { return unit(rng) < 0.6 ? nouns.pick_from(rng, topic) : nouns.pick(rng); };
    auto phrase = [&](std::string& s) {
      s += kDeterminers[rng() % kDeterminers.size()];
      s += ' ';
      if (unit(rng) < 0.4) {
        s += adjectives.pick(rng);
        s += ' ';
      }
      s += noun();
    };

    std::string doc;
    const int sentences = 3 + static_cast<int>(rng() % 28);
    for (int i = 0; i < sentences; ++i) {
      std::string s;
      phrase(s);
      s += ' ';
      s += verbs.pick(rng);
      s += ' ';
      phrase(s);
      if (unit(rng) < 0.5) {
        s += ' ';
        s += kPrepositions[rng() % kPrepositions.size()];
        s += ' ';
        phrase(s);
      }
      if (unit(rng) < 0.25) {
        s += ", ";
        s += kConjunctions[rng() % kConjunctions.size()];
        s += ' ';
        phrase(s);
        s += ' ';
        s += verbs.pick(rng);
      }
      if (unit(rng) < 0.1) s += " " + std::to_string(rng() % 1000);
      s += unit(rng) < 0.9 ? "." : "?";
      s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
      doc += s;
      doc += (unit(rng) < 0.15) ? "\n\n" : " ";
    }
    total += doc.size();
    docs.push_back(std::move(doc));
  }
  return docs;
}

}  // namespace blocklm
