#pragma once

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "kgd/corpus.hpp"
#include "kgd/errors.hpp"
#include "kgd/models.hpp"
#include "kgd/negsampler.hpp"
#include "kgd/textproc.hpp"

namespace kgd {

// Snippet rendering order is domain, entity name, title, body. An empty
// entity name (domain-level FAQ) contributes nothing.
inline TokenSeq snippet_render_tokens(const KnowledgeSnippet& s) {
  std::string text = s.domain;
  if (!s.entity_name.empty()) text += " " + s.entity_name;
  text += " " + s.title + " " + s.body;
  return tokenize(text);
}

// Selection input layout (no speaker markers in the context segment):
//   [CLS] u_1 s_2 ... u_m [SEP] k_j [EOS]
// Truncation drops oldest context tokens first and never knowledge tokens.
inline TokenSeq build_selection_input(const DialogueContext& context,
                                      const KnowledgeSnippet& snippet, int max_tokens = 256) {
  if (context.turns.empty()) throw ConfigError("selection input needs at least one turn");
  if (max_tokens < 8) throw ConfigError("selection max_tokens must be >= 8");
  TokenSeq ctx;
  for (const auto& t : context.turns) {
    const auto toks = tokenize(t.text);
    ctx.insert(ctx.end(), toks.begin(), toks.end());
  }
  const TokenSeq know = snippet_render_tokens(snippet);
  const std::size_t overhead = 3;  // [CLS], [SEP], [EOS]
  if (overhead + know.size() + ctx.size() > std::size_t(max_tokens)) {
    const std::size_t keep = std::size_t(max_tokens) > overhead + know.size()
                                 ? std::size_t(max_tokens) - overhead - know.size()
                                 : 0;
    ctx.erase(ctx.begin(), ctx.end() - std::ptrdiff_t(std::min(keep, ctx.size())));
  }
  TokenSeq out;
  out.reserve(overhead + ctx.size() + know.size());
  out.push_back("[CLS]");
  out.insert(out.end(), ctx.begin(), ctx.end());
  out.push_back("[SEP]");
  out.insert(out.end(), know.begin(), know.end());
  out.push_back("[EOS]");
  return out;
}

// Featurizer resources derived deterministically from a knowledge store: the
// tf-idf reference corpus behind the boundary-cosine interaction feature.
struct SelectionResources {
  TfIdfIndex index;
  Featurizer featurizer;

  SelectionResources(const KnowledgeStore& store, std::uint32_t dim)
      : index(make_docs(store)), featurizer(dim, &index) {}

 private:
  static std::vector<TokenSeq> make_docs(const KnowledgeStore& store) {
    std::vector<TokenSeq> docs;
    docs.reserve(store.size());
    for (const auto& s : store.snippets()) docs.push_back(snippet_sim_tokens(s));
    return docs;
  }
};

inline FeatureVector selection_features(const SelectionResources& res,
                                        const DialogueContext& context,
                                        const KnowledgeSnippet& snippet, int max_tokens) {
  return res.featurizer.features(build_selection_input(context, snippet, max_tokens),
                                 tokenize(snippet.entity_name));
}

struct SelectionConfig {
  TrainConfig train;
  SamplerConfig sampler;
  std::uint32_t feature_dim = 1u << 18;
  int max_tokens = 256;
};

struct SelectorTrainResult {
  LinearHead head;
  std::vector<double> trace;
};

// Softmax-over-candidates training: one SGD step per positive per epoch on
// [gold; k fresh negatives]. Negatives are redrawn each epoch from seeds
// derived as mix(sampler seed, epoch, positive ordinal).
inline SelectorTrainResult train_selector(const Corpus& corpus, const KnowledgeStore& store,
                                          const SelectionConfig& config) {
  config.train.validate();
  config.sampler.validate();
  std::vector<std::size_t> positives;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus.labels[i].target) positives.push_back(i);
  }
  if (positives.empty()) throw NoPositives("selection training needs target=true examples");

  const SelectionResources res(store, config.feature_dim);
  const auto pools = build_similarity_pools(store, config.sampler.sim_pool_size);

  SelectorTrainResult result{LinearHead::zeros(config.feature_dim), {}};
  TrainConfig step_config = config.train;
  step_config.batch_size = 1;  // one step per positive, as trained
  std::size_t steps = 0;
  result.trace = sgd_train<LinearHead, HeadGrad>(
      result.head, positives.size(), step_config,
      [&](const LinearHead& h, std::span<const std::size_t> idx, HeadGrad& grad) {
        const std::size_t epoch = steps / positives.size();
        ++steps;
        const std::size_t example = positives[idx[0]];
        const auto& context = corpus.contexts[example];
        const std::size_t gold = store.resolve(*corpus.labels[example].gold);
        Rng rng(mix_seed(config.sampler.seed, epoch, example));
        const auto batch = sample_negatives(store, pools, gold, config.sampler, rng);
        std::vector<FeatureVector> cands;
        cands.reserve(batch.negatives.size() + 1);
        cands.push_back(selection_features(res, context, store.at(gold), config.max_tokens));
        for (const auto& [neg, cat] : batch.negatives) {
          cands.push_back(selection_features(res, context, store.at(neg), config.max_tokens));
        }
        return softmax_ce_loss_grad(h, cands, config.train.l2, grad);
      });
  return result;
}

struct Ranking {
  // (snippet ordinal, raw linear score), descending score, ties by ordinal
  std::vector<std::pair<std::size_t, double>> items;
};

// Scores every snippet (or an explicit candidate subset) and returns the
// top_k. The scores are raw linear values; any monotone transform gives the
// same order.
inline Ranking rank_knowledge(const LinearHead& head, const DialogueContext& context,
                              const KnowledgeStore& store, const SelectionResources& res,
                              std::size_t top_k, int max_tokens = 256,
                              const std::vector<std::size_t>* candidates = nullptr) {
  std::vector<std::size_t> all;
  if (!candidates) {
    all.resize(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) all[i] = i;
    candidates = &all;
  }
  Ranking ranking;
  ranking.items.reserve(candidates->size());
  for (const auto ordinal : *candidates) {
    const auto fv = selection_features(res, context, store.at(ordinal), max_tokens);
    ranking.items.emplace_back(ordinal, dot(head, fv));
  }
  std::sort(ranking.items.begin(), ranking.items.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (ranking.items.size() > top_k) ranking.items.resize(top_k);
  return ranking;
}

inline Ranking rank_knowledge(const LinearHead& head, const DialogueContext& context,
                              const KnowledgeStore& store, std::size_t top_k) {
  const SelectionResources res(store, head.dim());
  return rank_knowledge(head, context, store, res, top_k);
}

}  // namespace kgd
