#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "kgd/corpus.hpp"
#include "kgd/errors.hpp"
#include "kgd/rng.hpp"
#include "kgd/textproc.hpp"

namespace kgd {

enum class NegCategory : int {
  Random = 0,
  InEntity = 1,
  InDomain = 2,
  SemanticallySimilar = 3,
};

constexpr int kNumNegCategories = 4;

inline const char* to_string(NegCategory c) {
  switch (c) {
    case NegCategory::Random: return "random";
    case NegCategory::InEntity: return "in_entity";
    case NegCategory::InDomain: return "in_domain";
    case NegCategory::SemanticallySimilar: return "semantically_similar";
  }
  return "?";
}

struct SamplerConfig {
  // category weights in the order random, in-entity, in-domain, similar
  std::array<double, kNumNegCategories> weights = {2.0, 1.0, 2.0, 2.0};
  int k = 4;                 // negatives per positive
  int sim_pool_size = 10;    // M most-similar snippets per gold
  std::uint64_t seed = 42;
  bool exact_ratio = false;  // deterministic per-positive category counts

  void validate() const {
    double total = 0.0;
    for (double w : weights) {
      if (w < 0.0) throw ConfigError("sampler weights must be non-negative");
      total += w;
    }
    if (total <= 0.0) throw ConfigError("at least one sampler weight must be positive");
    if (k < 1) throw ConfigError("sampler k must be >= 1");
    if (sim_pool_size < 1) throw ConfigError("sampler sim_pool_size must be >= 1");
  }
};

// One drawn negative: snippet ordinal in the store plus the category that
// produced it.
struct NegativeBatch {
  std::vector<std::pair<std::size_t, NegCategory>> negatives;
};

// pools[gold ordinal] = up to M most-similar snippet ordinals, descending
// tf-idf cosine over "title body" text, ties by ordinal.
struct SimilarityPools {
  std::vector<std::vector<std::size_t>> pools;
};

inline TokenSeq snippet_sim_tokens(const KnowledgeSnippet& s) {
  return tokenize(s.title + " " + s.body);
}

inline SimilarityPools build_similarity_pools(const KnowledgeStore& store, int M) {
  if (store.size() < 2) throw ConfigError("similarity pools need a store with n >= 2");
  if (M < 1) throw ConfigError("similarity pool size must be >= 1");
  std::vector<TokenSeq> docs;
  docs.reserve(store.size());
  for (const auto& s : store.snippets()) docs.push_back(snippet_sim_tokens(s));
  const TfIdfIndex index(docs);

  SimilarityPools out;
  out.pools.resize(store.size());
  std::vector<std::pair<double, std::size_t>> scored;
  for (std::size_t g = 0; g < store.size(); ++g) {
    scored.clear();
    for (std::size_t j = 0; j < store.size(); ++j) {
      if (j == g) continue;
      double sim = 0.0;
      const double ng = index.doc_norm(g), nj = index.doc_norm(j);
      if (ng > 0.0 && nj > 0.0) {
        sim = TfIdfIndex::dot(index.doc_vector(g), index.doc_vector(j)) / (ng * nj);
      }
      scored.emplace_back(sim, j);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    const std::size_t keep = std::min<std::size_t>(std::size_t(M), scored.size());
    out.pools[g].reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out.pools[g].push_back(scored[i].second);
  }
  return out;
}

// The candidate pool of one category relative to a gold snippet. The gold is
// never included. In-domain deliberately keeps same-entity snippets; the
// category tag records how a negative was drawn, not an exclusive partition.
// Domain-level "*" snippets have no in-entity pool.
inline std::vector<std::size_t> category_pool(const KnowledgeStore& store,
                                              const SimilarityPools& pools,
                                              std::size_t gold, NegCategory cat) {
  const auto& g = store.at(gold);
  std::vector<std::size_t> out;
  switch (cat) {
    case NegCategory::Random:
      out.reserve(store.size() - 1);
      for (std::size_t j = 0; j < store.size(); ++j) {
        if (j != gold) out.push_back(j);
      }
      break;
    case NegCategory::InEntity: {
      if (g.entity_id == "*") break;
      const auto& bucket = store.entity_index().at({g.domain, g.entity_id});
      for (const auto j : bucket) {
        if (j != gold) out.push_back(j);
      }
      break;
    }
    case NegCategory::InDomain: {
      const auto& bucket = store.domain_index().at(g.domain);
      for (const auto j : bucket) {
        if (j != gold) out.push_back(j);
      }
      break;
    }
    case NegCategory::SemanticallySimilar:
      out = pools.pools.at(gold);
      break;
  }
  return out;
}

namespace detail {

inline std::vector<std::size_t> remaining(const std::vector<std::size_t>& pool,
                                          const std::vector<std::size_t>& drawn) {
  std::vector<std::size_t> out;
  out.reserve(pool.size());
  for (const auto j : pool) {
    if (std::find(drawn.begin(), drawn.end(), j) == drawn.end()) out.push_back(j);
  }
  return out;
}

// Largest-remainder apportionment of k draws over the category weights;
// ties go to the lower category index. (2,1,2,2) with k=4 yields (1,1,1,1).
inline std::array<int, kNumNegCategories> exact_counts(
    const std::array<double, kNumNegCategories>& weights, int k) {
  double total = 0.0;
  for (double w : weights) total += w;
  std::array<int, kNumNegCategories> counts{};
  std::array<double, kNumNegCategories> rem{};
  int assigned = 0;
  for (int c = 0; c < kNumNegCategories; ++c) {
    const double quota = double(k) * weights[c] / total;
    counts[c] = int(quota);
    rem[c] = quota - double(counts[c]);
    assigned += counts[c];
  }
  while (assigned < k) {
    int best = -1;
    for (int c = 0; c < kNumNegCategories; ++c) {
      if (best < 0 || rem[c] > rem[best]) best = c;
    }
    counts[best]++;
    rem[best] = -1.0;
    ++assigned;
  }
  return counts;
}

}  // namespace detail

// Draws k distinct negatives for one positive. Each draw picks a category
// with probability proportional to its weight among categories whose
// remaining pool is non-empty, then a uniform snippet from that pool.
inline NegativeBatch sample_negatives(const KnowledgeStore& store, const SimilarityPools& pools,
                                      std::size_t gold, const SamplerConfig& config, Rng& rng) {
  config.validate();
  if (store.size() <= std::size_t(config.k)) {
    throw ConfigError("need store size n > k negatives, n=" + std::to_string(store.size()) +
                      " k=" + std::to_string(config.k));
  }
  std::array<std::vector<std::size_t>, kNumNegCategories> cat_pools;
  for (int c = 0; c < kNumNegCategories; ++c) {
    cat_pools[c] = category_pool(store, pools, gold, NegCategory(c));
  }

  NegativeBatch batch;
  std::vector<std::size_t> drawn;
  auto draw_from = [&](int c) -> bool {
    const auto rem = detail::remaining(cat_pools[c], drawn);
    if (rem.empty()) return false;
    const auto pick = rem[rng.uniform_index(rem.size())];
    drawn.push_back(pick);
    batch.negatives.emplace_back(pick, NegCategory(c));
    return true;
  };
  auto weighted_draw = [&]() {
    std::array<double, kNumNegCategories> avail{};
    double total = 0.0;
    for (int c = 0; c < kNumNegCategories; ++c) {
      if (config.weights[c] > 0.0 && !detail::remaining(cat_pools[c], drawn).empty()) {
        avail[c] = config.weights[c];
        total += avail[c];
      }
    }
    if (total <= 0.0) {
      // unreachable while n > k: the random pool covers every non-gold snippet
      throw ExhaustedPools("all negative-sample pools exhausted before k draws");
    }
    const double u = rng.uniform_real() * total;
    double acc = 0.0;
    int chosen = kNumNegCategories - 1;
    for (int c = 0; c < kNumNegCategories; ++c) {
      acc += avail[c];
      if (avail[c] > 0.0 && u < acc) {
        chosen = c;
        break;
      }
    }
    draw_from(chosen);
  };

  if (config.exact_ratio) {
    const auto counts = detail::exact_counts(config.weights, config.k);
    for (int c = 0; c < kNumNegCategories; ++c) {
      for (int i = 0; i < counts[c]; ++i) {
        if (!draw_from(c)) break;  // shortfall refilled below
      }
    }
  }
  while (int(batch.negatives.size()) < config.k) weighted_draw();
  return batch;
}

}  // namespace kgd
