#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "kgd/errors.hpp"
#include "kgd/rng.hpp"
#include "kgd/textproc.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format assumes a little-endian host");

namespace kgd {

// Sparse hashed features: ids strictly below dim, sorted, no explicit zeros.
struct FeatureVector {
  std::vector<std::pair<std::uint32_t, double>> items;
  std::uint32_t dim = 0;
};

inline FeatureVector make_feature_vector(std::unordered_map<std::uint32_t, double>&& acc,
                                         std::uint32_t dim) {
  FeatureVector fv;
  fv.dim = dim;
  fv.items.reserve(acc.size());
  for (const auto& [id, v] : acc) {
    if (v != 0.0) fv.items.emplace_back(id, v);
  }
  std::sort(fv.items.begin(), fv.items.end());
  return fv;
}

// Hashing-trick encoder standing in for a transformer representation:
// unigram and bigram counts of the marker-bearing token sequence, hashed with
// FNV-1a 64 modulo dim. When the sequence contains a [SEP], three interaction
// features are added at the reserved tail ids:
//   dim-1  unigram overlap count across the [SEP] boundary
//   dim-2  tf-idf cosine across the boundary
//   dim-3  entity-name-match indicator (all entity tokens occur left of [SEP])
// Marker tokens never participate in the interaction features.
class Featurizer {
 public:
  explicit Featurizer(std::uint32_t dim = 1u << 18, const TfIdfIndex* idf = nullptr)
      : dim_(dim), idf_(idf) {
    if (dim_ < (1u << 10)) throw ConfigError("featurizer dimension must be >= 2^10");
  }

  std::uint32_t dim() const { return dim_; }

  FeatureVector features(const TokenSeq& tokens, const TokenSeq& entity_tokens = {}) const {
    std::unordered_map<std::uint32_t, double> acc;
    acc.reserve(tokens.size() * 2 + 4);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      acc[hash_of(tokens[i])] += 1.0;
      if (i + 1 < tokens.size()) acc[hash_of(tokens[i] + " " + tokens[i + 1])] += 1.0;
    }
    const auto sep = std::find(tokens.begin(), tokens.end(), "[SEP]");
    if (sep != tokens.end()) {
      TokenSeq left, right;
      for (auto it = tokens.begin(); it != sep; ++it) {
        if (!is_special_token(*it)) left.push_back(*it);
      }
      for (auto it = sep + 1; it != tokens.end(); ++it) {
        if (!is_special_token(*it)) right.push_back(*it);
      }
      acc[dim_ - 1] += overlap_count(left, right);
      acc[dim_ - 2] += boundary_cosine(left, right);
      acc[dim_ - 3] += entity_match(left, entity_tokens);
    }
    return make_feature_vector(std::move(acc), dim_);
  }

 private:
  std::uint32_t hash_of(const std::string& gram) const {
    return std::uint32_t(fnv1a64(gram) % dim_);
  }

  static double overlap_count(const TokenSeq& left, const TokenSeq& right) {
    std::map<std::string, int> lc, rc;
    for (const auto& t : left) lc[t]++;
    for (const auto& t : right) rc[t]++;
    double overlap = 0.0;
    for (const auto& [t, c] : lc) {
      auto it = rc.find(t);
      if (it != rc.end()) overlap += std::min(c, it->second);
    }
    return overlap;
  }

  double boundary_cosine(const TokenSeq& left, const TokenSeq& right) const {
    static const TfIdfIndex empty_index;  // df=0 everywhere -> idf = 1
    return tfidf_cosine(left, right, idf_ ? *idf_ : empty_index);
  }

  static double entity_match(const TokenSeq& left, const TokenSeq& entity_tokens) {
    if (entity_tokens.empty()) return 0.0;
    for (const auto& t : entity_tokens) {
      if (std::find(left.begin(), left.end(), t) == left.end()) return 0.0;
    }
    return 1.0;
  }

  std::uint32_t dim_;
  const TfIdfIndex* idf_;
};

// ------------------------------------------------------------------ heads

struct LinearHead {
  std::vector<double> w;
  double b = 0.0;

  static LinearHead zeros(std::uint32_t dim) {
    LinearHead h;
    h.w.assign(dim, 0.0);
    return h;
  }
  std::uint32_t dim() const { return std::uint32_t(w.size()); }
};

struct HeadGrad {
  std::vector<double> w;
  double b = 0.0;

  explicit HeadGrad(const LinearHead& h) : w(h.w.size(), 0.0) {}
  void zero() {
    std::fill(w.begin(), w.end(), 0.0);
    b = 0.0;
  }
};

inline void apply_update(LinearHead& h, const HeadGrad& g, double scale) {
  for (std::size_t i = 0; i < h.w.size(); ++i) h.w[i] -= scale * g.w[i];
  h.b -= scale * g.b;
}

inline double dot(const LinearHead& h, const FeatureVector& x) {
  double s = h.b;
  for (const auto& [id, v] : x.items) s += h.w[id] * v;
  return s;
}

inline double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double sigmoid_score(const LinearHead& head, const FeatureVector& x) {
  if (x.dim != head.dim()) throw ConfigError("feature dimension does not match head");
  return stable_sigmoid(dot(head, x));
}

constexpr double kProbClamp = 1e-12;

inline double clamp_prob(double p) {
  return std::min(1.0 - kProbClamp, std::max(kProbClamp, p));
}

// Log of the probability assigned to the true outcome. Any nonzero
// probability is clamped to [1e-12, 1-1e-12] first; an exact floating-point
// zero means the softmax/sigmoid underflowed (a logit gap of ~745 nats) and
// surfaces as -inf so sgd_train can raise DivergedError.
inline double log_true_prob(double p) {
  if (p == 0.0) return -std::numeric_limits<double>::infinity();
  return std::log(clamp_prob(p));
}

struct BceExample {
  FeatureVector x;
  double y = 0.0;  // label in {0, 1}
};

// Summed binary cross entropy over the examples plus (l2/2)*||w||^2, with the
// analytically exact gradient of that expression. Probabilities are clamped
// before the logarithms only.
inline double bce_loss_grad(const LinearHead& head, std::span<const BceExample> examples,
                            double l2, HeadGrad& grad) {
  if (examples.empty()) throw ConfigError("bce_loss_grad: no examples");
  double loss = 0.0;
  for (const auto& ex : examples) {
    const double p = stable_sigmoid(dot(head, ex.x));
    if (ex.y > 0.0) loss -= ex.y * log_true_prob(p);
    if (ex.y < 1.0) loss -= (1.0 - ex.y) * log_true_prob(1.0 - p);
    const double coef = p - ex.y;
    for (const auto& [id, v] : ex.x.items) grad.w[id] += coef * v;
    grad.b += coef;
  }
  if (l2 > 0.0) {
    double sq = 0.0;
    for (std::size_t i = 0; i < head.w.size(); ++i) {
      grad.w[i] += l2 * head.w[i];
      sq += head.w[i] * head.w[i];
    }
    loss += 0.5 * l2 * sq;
  }
  return loss;
}

// Softmax cross entropy over a candidate list with the gold at index 0.
inline double softmax_ce_loss_grad(const LinearHead& head,
                                   std::span<const FeatureVector> candidates, double l2,
                                   HeadGrad& grad) {
  if (candidates.size() < 2) throw ConfigError("softmax_ce_loss_grad: need >= 2 candidates");
  std::vector<double> scores;
  scores.reserve(candidates.size());
  for (const auto& x : candidates) scores.push_back(dot(head, x));
  const double mx = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (const double s : scores) z += std::exp(s - mx);
  double loss = -log_true_prob(std::exp(scores[0] - mx) / z);
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    const double pj = std::exp(scores[j] - mx) / z;
    const double coef = pj - (j == 0 ? 1.0 : 0.0);
    for (const auto& [id, v] : candidates[j].items) grad.w[id] += coef * v;
    grad.b += coef;
  }
  if (l2 > 0.0) {
    double sq = 0.0;
    for (std::size_t i = 0; i < head.w.size(); ++i) {
      grad.w[i] += l2 * head.w[i];
      sq += head.w[i] * head.w[i];
    }
    loss += 0.5 * l2 * sq;
  }
  return loss;
}

// --------------------------------------------------------------- neural LM

// Fixed-window next-token model: concatenated embeddings -> tanh hidden ->
// affine -> softmax.
struct NeuralLM {
  int vocab_size = 0;
  int window = 8;
  int embed_dim = 32;
  int hidden_dim = 64;
  std::vector<double> embed;  // V x d
  std::vector<double> w1;     // (N*d) x h
  std::vector<double> b1;     // h
  std::vector<double> w2;     // h x V
  std::vector<double> b2;     // V

  static NeuralLM init(int vocab_size, int window, int embed_dim, int hidden_dim,
                       double init_scale, std::uint64_t seed) {
    if (vocab_size < 9 || window < 1 || embed_dim < 1 || hidden_dim < 1) {
      throw ConfigError("bad language model dimensions");
    }
    NeuralLM lm;
    lm.vocab_size = vocab_size;
    lm.window = window;
    lm.embed_dim = embed_dim;
    lm.hidden_dim = hidden_dim;
    Rng rng(seed);
    auto fill = [&](std::vector<double>& v, std::size_t n) {
      v.resize(n);
      for (auto& x : v) x = (rng.uniform_real() * 2.0 - 1.0) * init_scale;
    };
    fill(lm.embed, std::size_t(vocab_size) * std::size_t(embed_dim));
    fill(lm.w1, std::size_t(window) * std::size_t(embed_dim) * std::size_t(hidden_dim));
    fill(lm.b1, std::size_t(hidden_dim));
    fill(lm.w2, std::size_t(hidden_dim) * std::size_t(vocab_size));
    fill(lm.b2, std::size_t(vocab_size));
    return lm;
  }
};

struct LmGrad {
  std::vector<double> embed, w1, b1, w2, b2;

  explicit LmGrad(const NeuralLM& lm)
      : embed(lm.embed.size(), 0.0),
        w1(lm.w1.size(), 0.0),
        b1(lm.b1.size(), 0.0),
        w2(lm.w2.size(), 0.0),
        b2(lm.b2.size(), 0.0) {}
  void zero() {
    std::fill(embed.begin(), embed.end(), 0.0);
    std::fill(w1.begin(), w1.end(), 0.0);
    std::fill(b1.begin(), b1.end(), 0.0);
    std::fill(w2.begin(), w2.end(), 0.0);
    std::fill(b2.begin(), b2.end(), 0.0);
  }
};

inline void apply_update(NeuralLM& lm, const LmGrad& g, double scale) {
  auto axpy = [scale](std::vector<double>& p, const std::vector<double>& gv) {
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= scale * gv[i];
  };
  axpy(lm.embed, g.embed);
  axpy(lm.w1, g.w1);
  axpy(lm.b1, g.b1);
  axpy(lm.w2, g.w2);
  axpy(lm.b2, g.b2);
}

namespace detail {

struct LmWorkspace {
  std::vector<double> x;       // N*d concatenated embeddings
  std::vector<double> hidden;  // h, post-tanh
  std::vector<double> probs;   // V
  std::vector<double> dhidden;
  std::vector<double> dx;
};

inline void lm_forward_into(const NeuralLM& lm, std::span<const int> window, LmWorkspace& ws) {
  const int N = lm.window, d = lm.embed_dim, h = lm.hidden_dim, V = lm.vocab_size;
  ws.x.assign(std::size_t(N) * d, 0.0);
  for (int i = 0; i < N; ++i) {
    const int tok = window[std::size_t(i)];
    std::memcpy(ws.x.data() + std::size_t(i) * d, lm.embed.data() + std::size_t(tok) * d,
                sizeof(double) * std::size_t(d));
  }
  ws.hidden.assign(std::size_t(h), 0.0);
  for (int i = 0; i < N * d; ++i) {
    const double xi = ws.x[std::size_t(i)];
    if (xi == 0.0) continue;
    const double* row = lm.w1.data() + std::size_t(i) * h;
    for (int j = 0; j < h; ++j) ws.hidden[std::size_t(j)] += xi * row[j];
  }
  for (int j = 0; j < h; ++j) ws.hidden[std::size_t(j)] = std::tanh(ws.hidden[std::size_t(j)] + lm.b1[std::size_t(j)]);
  ws.probs.assign(lm.b2.begin(), lm.b2.end());
  for (int j = 0; j < h; ++j) {
    const double hj = ws.hidden[std::size_t(j)];
    const double* row = lm.w2.data() + std::size_t(j) * V;
    for (int v = 0; v < V; ++v) ws.probs[std::size_t(v)] += hj * row[v];
  }
  const double mx = *std::max_element(ws.probs.begin(), ws.probs.end());
  double z = 0.0;
  for (auto& p : ws.probs) {
    p = std::exp(p - mx);
    z += p;
  }
  for (auto& p : ws.probs) p /= z;
}

}  // namespace detail

// Probability distribution over the vocabulary for one window of exactly
// lm.window token ids.
inline std::vector<double> lm_forward(const NeuralLM& lm, std::span<const int> window) {
  if (int(window.size()) != lm.window) {
    throw ConfigError("lm_forward: window must hold exactly N token ids");
  }
  detail::LmWorkspace ws;
  detail::lm_forward_into(lm, window, ws);
  return ws.probs;
}

// One training sequence: token ids plus the first position whose token is
// predicted. Prompt positions before it condition the model but produce no
// loss terms.
struct LmSequence {
  std::vector<int> ids;
  std::size_t first_predicted = 1;
};

// Negative log likelihood of the predicted region with full backpropagation.
// Windows are left-padded with [PAD].
inline double lm_nll_grad(const NeuralLM& lm, const LmSequence& seq, LmGrad& grad) {
  if (seq.ids.size() < 2) throw ConfigError("lm_nll_grad: sequence length must be >= 2");
  if (seq.first_predicted < 1 || seq.first_predicted >= seq.ids.size()) {
    throw ConfigError("lm_nll_grad: first_predicted out of range");
  }
  const int N = lm.window, d = lm.embed_dim, h = lm.hidden_dim, V = lm.vocab_size;
  detail::LmWorkspace ws;
  std::vector<int> window(std::size_t(N), kPad);
  double loss = 0.0;
  for (std::size_t t = seq.first_predicted; t < seq.ids.size(); ++t) {
    for (int i = 0; i < N; ++i) {
      const std::ptrdiff_t src = std::ptrdiff_t(t) - N + i;
      window[std::size_t(i)] = src < 0 ? kPad : seq.ids[std::size_t(src)];
    }
    detail::lm_forward_into(lm, window, ws);
    const int target = seq.ids[t];
    loss -= log_true_prob(ws.probs[std::size_t(target)]);
    if (!std::isfinite(loss)) return loss;

    // dlogits = probs - onehot(target), reusing ws.probs in place
    ws.probs[std::size_t(target)] -= 1.0;
    ws.dhidden.assign(std::size_t(h), 0.0);
    for (int j = 0; j < h; ++j) {
      const double hj = ws.hidden[std::size_t(j)];
      double* w2row = grad.w2.data() + std::size_t(j) * V;
      const double* w2p = lm.w2.data() + std::size_t(j) * V;
      double acc = 0.0;
      for (int v = 0; v < V; ++v) {
        const double dv = ws.probs[std::size_t(v)];
        w2row[v] += hj * dv;
        acc += w2p[v] * dv;
      }
      ws.dhidden[std::size_t(j)] = acc * (1.0 - hj * hj);
    }
    for (int v = 0; v < V; ++v) grad.b2[std::size_t(v)] += ws.probs[std::size_t(v)];
    for (int j = 0; j < h; ++j) grad.b1[std::size_t(j)] += ws.dhidden[std::size_t(j)];
    ws.dx.assign(std::size_t(N) * d, 0.0);
    for (int i = 0; i < N * d; ++i) {
      const double xi = ws.x[std::size_t(i)];
      const double* w1row = lm.w1.data() + std::size_t(i) * h;
      double* g1row = grad.w1.data() + std::size_t(i) * h;
      double acc = 0.0;
      for (int j = 0; j < h; ++j) {
        const double dj = ws.dhidden[std::size_t(j)];
        g1row[j] += xi * dj;
        acc += w1row[j] * dj;
      }
      ws.dx[std::size_t(i)] = acc;
    }
    for (int i = 0; i < N; ++i) {
      double* erow = grad.embed.data() + std::size_t(window[std::size_t(i)]) * d;
      const double* dxrow = ws.dx.data() + std::size_t(i) * d;
      for (int j = 0; j < d; ++j) erow[j] += dxrow[j];
    }
  }
  return loss;
}

// ------------------------------------------------------------------- SGD

struct TrainConfig {
  double lr = 0.1;
  int epochs = 10;
  int batch_size = 32;
  double l2 = 0.0;
  std::uint64_t seed = 42;
  double init_scale = 0.05;

  void validate() const {
    if (lr < 0.0) throw ConfigError("learning rate must be >= 0");
    if (epochs < 0) throw ConfigError("epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("batch size must be >= 1");
    if (l2 < 0.0) throw ConfigError("l2 coefficient must be >= 0");
    if (init_scale <= 0.0) throw ConfigError("init scale must be > 0");
  }
};

// Generic mini-batch SGD over example indices. The callback accumulates the
// total loss and gradient of one batch into `grad` (already zeroed); the
// update applies lr * grad / batch_size. Returns the per-example mean loss of
// each epoch. Shuffling is seeded, so traces are reproducible bit for bit.
template <class Params, class Grad, class BatchLossGrad>
std::vector<double> sgd_train(Params& params, std::size_t n_examples, const TrainConfig& config,
                              BatchLossGrad&& batch_loss_grad) {
  config.validate();
  if (n_examples == 0) throw ConfigError("sgd_train: no examples");
  std::vector<double> trace;
  trace.reserve(std::size_t(config.epochs));
  std::vector<std::size_t> order(n_examples);
  for (std::size_t i = 0; i < n_examples; ++i) order[i] = i;
  Rng rng(config.seed);
  Grad grad(params);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n_examples; start += std::size_t(config.batch_size)) {
      const std::size_t end = std::min(n_examples, start + std::size_t(config.batch_size));
      grad.zero();
      const double loss =
          batch_loss_grad(std::as_const(params),
                          std::span<const std::size_t>(order.data() + start, end - start), grad);
      if (!std::isfinite(loss)) {
        throw DivergedError("training loss became non-finite at epoch " + std::to_string(epoch));
      }
      epoch_loss += loss;
      apply_update(params, grad, config.lr / double(end - start));
    }
    trace.push_back(epoch_loss / double(n_examples));
  }
  return trace;
}

// ------------------------------------------------------------ checkpoints

namespace detail {

inline void write_bytes(std::ofstream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), std::streamsize(n));
}

inline void write_u64(std::ofstream& os, std::uint64_t v) { write_bytes(os, &v, 8); }

inline void write_f64s(std::ofstream& os, const std::vector<double>& v) {
  write_bytes(os, v.data(), v.size() * 8);
}

inline void read_bytes(std::ifstream& is, void* p, std::size_t n, const std::string& path) {
  if (!is.read(static_cast<char*>(p), std::streamsize(n))) {
    throw ParseError(path + ": truncated checkpoint");
  }
}

inline std::uint64_t read_u64(std::ifstream& is, const std::string& path) {
  std::uint64_t v = 0;
  read_bytes(is, &v, 8, path);
  return v;
}

inline void read_f64s(std::ifstream& is, std::vector<double>& v, std::size_t n,
                      const std::string& path) {
  v.resize(n);
  read_bytes(is, v.data(), n * 8, path);
}

}  // namespace detail

// Head checkpoint: magic "KGDHEAD1", u64 dim, f64 bias, f64 w[dim].
inline void save_head(const std::string& path, const LinearHead& head) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path);
  os.write("KGDHEAD1", 8);
  detail::write_u64(os, head.w.size());
  detail::write_bytes(os, &head.b, 8);
  detail::write_f64s(os, head.w);
  if (!os.flush()) throw IoError("failed writing checkpoint: " + path);
}

inline LinearHead load_head(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint: " + path);
  char magic[8];
  detail::read_bytes(is, magic, 8, path);
  if (std::memcmp(magic, "KGDHEAD1", 8) != 0) {
    throw ParseError(path + ": not a linear head checkpoint");
  }
  LinearHead head;
  const auto dim = detail::read_u64(is, path);
  detail::read_bytes(is, &head.b, 8, path);
  detail::read_f64s(is, head.w, dim, path);
  return head;
}

// LM checkpoint: magic "KGDLM001", u64 V,N,d,h, then embed, w1, b1, w2, b2.
inline void save_lm(const std::string& path, const NeuralLM& lm) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint: " + path);
  os.write("KGDLM001", 8);
  detail::write_u64(os, std::uint64_t(lm.vocab_size));
  detail::write_u64(os, std::uint64_t(lm.window));
  detail::write_u64(os, std::uint64_t(lm.embed_dim));
  detail::write_u64(os, std::uint64_t(lm.hidden_dim));
  detail::write_f64s(os, lm.embed);
  detail::write_f64s(os, lm.w1);
  detail::write_f64s(os, lm.b1);
  detail::write_f64s(os, lm.w2);
  detail::write_f64s(os, lm.b2);
  if (!os.flush()) throw IoError("failed writing checkpoint: " + path);
}

inline NeuralLM load_lm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint: " + path);
  char magic[8];
  detail::read_bytes(is, magic, 8, path);
  if (std::memcmp(magic, "KGDLM001", 8) != 0) {
    throw ParseError(path + ": not a language model checkpoint");
  }
  NeuralLM lm;
  lm.vocab_size = int(detail::read_u64(is, path));
  lm.window = int(detail::read_u64(is, path));
  lm.embed_dim = int(detail::read_u64(is, path));
  lm.hidden_dim = int(detail::read_u64(is, path));
  if (lm.vocab_size < 9 || lm.window < 1 || lm.embed_dim < 1 || lm.hidden_dim < 1) {
    throw ParseError(path + ": implausible language model dimensions");
  }
  const auto V = std::size_t(lm.vocab_size), N = std::size_t(lm.window);
  const auto d = std::size_t(lm.embed_dim), h = std::size_t(lm.hidden_dim);
  detail::read_f64s(is, lm.embed, V * d, path);
  detail::read_f64s(is, lm.w1, N * d * h, path);
  detail::read_f64s(is, lm.b1, h, path);
  detail::read_f64s(is, lm.w2, h * V, path);
  detail::read_f64s(is, lm.b2, V, path);
  return lm;
}

}  // namespace kgd
