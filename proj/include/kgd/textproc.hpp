#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kgd/errors.hpp"

namespace kgd {

using TokenSeq = std::vector<std::string>;

namespace detail {

inline bool is_ascii_punct(char c) {
  return (c >= '!' && c <= '/') || (c >= ':' && c <= '@') ||
         (c >= '[' && c <= '`') || (c >= '{' && c <= '~');
}

inline bool is_unicode_space(char32_t cp) {
  switch (cp) {
    case 0x09: case 0x0a: case 0x0b: case 0x0c: case 0x0d: case 0x20:
    case 0x85: case 0xa0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202f: case 0x205f: case 0x3000:
      return true;
    default:
      return cp >= 0x2000 && cp <= 0x200a;
  }
}

// Decodes one UTF-8 code point at s[i]; advances i. Malformed bytes are
// treated as Latin-1 so tokenization never fails on binary junk.
inline char32_t decode_utf8(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  int extra = 0;
  char32_t cp = b0;
  if (b0 >= 0xf0) {
    extra = 3;
    cp = b0 & 0x07u;
  } else if (b0 >= 0xe0) {
    extra = 2;
    cp = b0 & 0x0fu;
  } else if (b0 >= 0xc0) {
    extra = 1;
    cp = b0 & 0x1fu;
  }
  if (i + extra >= s.size()) {
    ++i;
    return b0;
  }
  for (int k = 1; k <= extra; ++k) {
    const auto bk = static_cast<unsigned char>(s[i + k]);
    if ((bk & 0xc0u) != 0x80u) {
      ++i;
      return b0;
    }
    cp = (cp << 6) | (bk & 0x3fu);
  }
  i += extra + 1;
  return cp;
}

}  // namespace detail

// Deterministic whitespace tokenizer: lowercases ASCII letters, splits on
// Unicode whitespace, strips leading/trailing ASCII punctuation per token,
// drops tokens that end up empty. Internal punctuation ("wi-fi") survives.
inline TokenSeq tokenize(std::string_view text) {
  TokenSeq out;
  std::string cur;
  auto flush = [&] {
    std::size_t b = 0, e = cur.size();
    while (b < e && detail::is_ascii_punct(cur[b])) ++b;
    while (e > b && detail::is_ascii_punct(cur[e - 1])) --e;
    if (e > b) out.emplace_back(cur.substr(b, e - b));
    cur.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t start = i;
    const char32_t cp = detail::decode_utf8(text, i);
    if (detail::is_unicode_space(cp)) {
      flush();
    } else if (cp < 0x80) {
      char c = static_cast<char>(cp);
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
      cur.push_back(c);
    } else {
      cur.append(text.substr(start, i - start));
    }
  }
  flush();
  return out;
}

inline std::string join_tokens(const TokenSeq& tokens, char sep = ' ') {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(sep);
    out += tokens[i];
  }
  return out;
}

// Special token ids are frozen: downstream models and checkpoints rely on
// this exact order.
enum SpecialToken : int {
  kBos = 0,
  kEos = 1,
  kCls = 2,
  kSep = 3,
  kUser = 4,
  kSys = 5,
  kKnow = 6,
  kUnk = 7,
  kPad = 8,
};

inline const std::array<std::string, 9>& special_token_strings() {
  static const std::array<std::string, 9> s = {
      "[BOS]", "[EOS]", "[CLS]", "[SEP]", "[user]",
      "[sys]", "[know]", "[UNK]", "[PAD]"};
  return s;
}

inline bool is_special_token(std::string_view tok) {
  for (const auto& s : special_token_strings()) {
    if (tok == s) return true;
  }
  return false;
}

class Vocabulary {
 public:
  Vocabulary() {
    for (const auto& s : special_token_strings()) add_token(s);
  }

  int add_token(const std::string& tok) {
    auto [it, inserted] = token_to_id_.emplace(tok, static_cast<int>(id_to_token_.size()));
    if (inserted) id_to_token_.push_back(tok);
    return it->second;
  }

  // Unknown tokens map to [UNK]; the single OOV policy for all models.
  int encode(std::string_view tok) const {
    auto it = token_to_id_.find(std::string(tok));
    return it == token_to_id_.end() ? kUnk : it->second;
  }

  std::vector<int> encode_seq(const TokenSeq& toks) const {
    std::vector<int> ids;
    ids.reserve(toks.size());
    for (const auto& t : toks) ids.push_back(encode(t));
    return ids;
  }

  const std::string& decode(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
  bool contains(std::string_view tok) const {
    return token_to_id_.count(std::string(tok)) != 0;
  }
  int size() const { return static_cast<int>(id_to_token_.size()); }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write vocabulary file: " + path);
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
      os << id_to_token_[i] << '\t' << i << '\n';
    }
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read vocabulary file: " + path);
    Vocabulary v;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos) {
        throw ParseError("vocabulary line " + std::to_string(lineno) + " has no tab");
      }
      const std::string tok = line.substr(0, tab);
      const int id = std::stoi(line.substr(tab + 1));
      if (id < 9) {
        if (tok != special_token_strings()[static_cast<std::size_t>(id)]) {
          throw ParseError("vocabulary special token mismatch at id " + std::to_string(id));
        }
        continue;
      }
      if (id != v.size()) {
        throw ParseError("vocabulary ids must be dense and ordered, got " + line);
      }
      v.add_token(tok);
    }
    return v;
  }

 private:
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::string> id_to_token_;
};

// Specials first (ids 0-8), then tokens with frequency >= min_freq ordered by
// descending frequency with lexicographic tie-break. max_size, when positive,
// caps the number of non-special tokens kept.
inline Vocabulary build_vocab(const std::vector<std::string>& texts, int min_freq,
                              std::size_t max_size = 0) {
  if (min_freq < 1) throw ConfigError("build_vocab: min_freq must be >= 1");
  std::unordered_map<std::string, std::int64_t> freq;
  for (const auto& text : texts) {
    for (auto& tok : tokenize(text)) freq[std::move(tok)]++;
  }
  std::vector<std::pair<std::string, std::int64_t>> items;
  items.reserve(freq.size());
  for (auto& kv : freq) {
    if (kv.second >= min_freq && !is_special_token(kv.first)) items.emplace_back(kv);
  }
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (max_size > 0 && items.size() > max_size) items.resize(max_size);
  Vocabulary v;
  for (const auto& [tok, f] : items) v.add_token(tok);
  return v;
}

// TF-IDF with smoothed idf = ln((1+N)/(1+df)) + 1 and raw term counts.
// Terms never seen in the reference corpus get df = 0, so every non-empty
// sequence has a positive-norm vector and cosine is total.
class TfIdfIndex {
 public:
  TfIdfIndex() = default;

  explicit TfIdfIndex(const std::vector<TokenSeq>& docs) : n_docs_(docs.size()) {
    for (const auto& doc : docs) {
      std::unordered_map<std::string, int> seen;
      for (const auto& tok : doc) seen[tok]++;
      for (const auto& [tok, cnt] : seen) df_[tok]++;
    }
    doc_vectors_.reserve(docs.size());
    doc_norms_.reserve(docs.size());
    for (const auto& doc : docs) {
      doc_vectors_.push_back(vectorize(doc));
      doc_norms_.push_back(norm_of(doc_vectors_.back()));
    }
  }

  double idf(const std::string& term) const {
    auto it = df_.find(term);
    const double df = it == df_.end() ? 0.0 : double(it->second);
    return std::log((1.0 + double(n_docs_)) / (1.0 + df)) + 1.0;
  }

  std::map<std::string, double> vectorize(const TokenSeq& seq) const {
    std::map<std::string, double> tf;
    for (const auto& tok : seq) tf[tok] += 1.0;
    for (auto& [term, w] : tf) w *= idf(term);
    return tf;
  }

  std::size_t num_docs() const { return n_docs_; }
  const std::map<std::string, double>& doc_vector(std::size_t i) const {
    return doc_vectors_.at(i);
  }
  double doc_norm(std::size_t i) const { return doc_norms_.at(i); }

  static double norm_of(const std::map<std::string, double>& v) {
    double s = 0.0;
    for (const auto& [t, w] : v) s += w * w;
    return std::sqrt(s);
  }

  static double dot(const std::map<std::string, double>& a,
                    const std::map<std::string, double>& b) {
    const auto& small = a.size() <= b.size() ? a : b;
    const auto& big = a.size() <= b.size() ? b : a;
    double s = 0.0;
    for (const auto& [t, w] : small) {
      auto it = big.find(t);
      if (it != big.end()) s += w * it->second;
    }
    return s;
  }

 private:
  std::size_t n_docs_ = 0;
  std::unordered_map<std::string, std::int64_t> df_;
  std::vector<std::map<std::string, double>> doc_vectors_;
  std::vector<double> doc_norms_;
};

// Cosine of the tf-idf embeddings of two token sequences; 0 when either side
// has no mass. Symmetric, in [0, 1] up to rounding.
inline double tfidf_cosine(const TokenSeq& a, const TokenSeq& b, const TfIdfIndex& index) {
  const auto va = index.vectorize(a);
  const auto vb = index.vectorize(b);
  const double na = TfIdfIndex::norm_of(va);
  const double nb = TfIdfIndex::norm_of(vb);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::min(1.0, TfIdfIndex::dot(va, vb) / (na * nb));
}

// N-gram multiset as gram -> count. Tokens contain no whitespace, so joining
// with a space is injective.
inline std::map<std::string, int> ngram_counts(const TokenSeq& seq, int n) {
  if (n < 1) throw ConfigError("ngram_counts: n must be >= 1");
  std::map<std::string, int> grams;
  if (seq.size() < static_cast<std::size_t>(n)) return grams;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    std::string key = seq[i];
    for (std::size_t j = 1; j < static_cast<std::size_t>(n); ++j) {
      key.push_back(' ');
      key += seq[i + j];
    }
    grams[std::move(key)]++;
  }
  return grams;
}

// Longest common subsequence length, O(|a|*|b|) rolling rows.
inline int lcs_length(const TokenSeq& a, const TokenSeq& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace kgd
