#pragma once

#include <span>
#include <string>
#include <vector>

#include "kgd/corpus.hpp"
#include "kgd/errors.hpp"
#include "kgd/models.hpp"
#include "kgd/textproc.hpp"

namespace kgd {

// Detection input layout:
//   [BOS] [user] u_1 ... [sys] s_2 ... [user] u_m ... [EOS]
// When the result exceeds max_tokens, whole oldest turns are dropped first;
// if the final user turn alone still does not fit, its head is truncated.
// [BOS], [EOS] and the tail of the final user turn always survive.
inline TokenSeq build_detection_input(const DialogueContext& context, int max_tokens = 256) {
  if (context.turns.empty()) throw ConfigError("detection input needs at least one turn");
  if (max_tokens < 8) throw ConfigError("detection max_tokens must be >= 8");

  struct TurnTokens {
    std::string marker;
    TokenSeq tokens;
  };
  std::vector<TurnTokens> turns;
  turns.reserve(context.turns.size());
  std::size_t total = 2;  // [BOS], [EOS]
  for (const auto& t : context.turns) {
    TurnTokens tt{t.speaker == Speaker::User ? "[user]" : "[sys]", tokenize(t.text)};
    total += 1 + tt.tokens.size();
    turns.push_back(std::move(tt));
  }
  std::size_t first = 0;
  while (total > std::size_t(max_tokens) && turns.size() - first > 1) {
    total -= 1 + turns[first].tokens.size();
    ++first;
  }
  if (total > std::size_t(max_tokens)) {
    // single remaining turn: keep its tail within [BOS] marker ... [EOS]
    auto& toks = turns[first].tokens;
    const std::size_t budget = std::size_t(max_tokens) - 3;
    if (toks.size() > budget) toks.erase(toks.begin(), toks.end() - std::ptrdiff_t(budget));
  }
  TokenSeq out;
  out.reserve(std::size_t(max_tokens));
  out.push_back("[BOS]");
  for (std::size_t i = first; i < turns.size(); ++i) {
    out.push_back(turns[i].marker);
    out.insert(out.end(), turns[i].tokens.begin(), turns[i].tokens.end());
  }
  out.push_back("[EOS]");
  return out;
}

struct DetectionExample {
  FeatureVector features;
  double label = 0.0;
};

struct DetectorTrainResult {
  LinearHead head;
  std::vector<double> trace;  // per-epoch mean loss
};

struct DetectionConfig {
  TrainConfig train;
  std::uint32_t feature_dim = 1u << 18;
  int max_tokens = 256;
  double threshold = 0.5;
};

// Trains the sigmoid linear detector on every turn of the corpus.
inline DetectorTrainResult train_detector(const Corpus& corpus, const DetectionConfig& config) {
  config.train.validate();
  if (corpus.size() == 0) throw ConfigError("train_detector: empty corpus");
  bool has_pos = false, has_neg = false;
  for (const auto& lab : corpus.labels) (lab.target ? has_pos : has_neg) = true;
  if (!has_pos || !has_neg) {
    throw SingleClassError("detection corpus must contain both classes");
  }

  const Featurizer featurizer(config.feature_dim);
  std::vector<BceExample> examples;
  examples.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    examples.push_back({featurizer.features(build_detection_input(corpus.contexts[i], config.max_tokens)),
                        corpus.labels[i].target ? 1.0 : 0.0});
  }

  DetectorTrainResult result{LinearHead::zeros(config.feature_dim), {}};
  result.trace = sgd_train<LinearHead, HeadGrad>(
      result.head, examples.size(), config.train,
      [&](const LinearHead& h, std::span<const std::size_t> idx, HeadGrad& grad) {
        std::vector<BceExample> batch;
        batch.reserve(idx.size());
        for (const auto i : idx) batch.push_back(examples[i]);
        return bce_loss_grad(h, batch, config.train.l2, grad);
      });
  return result;
}

struct Detection {
  int decision = 0;
  double score = 0.0;
};

// decision = [score >= threshold]; the boundary is inclusive.
inline Detection detect(const LinearHead& head, const DialogueContext& context,
                        double threshold = 0.5, int max_tokens = 256) {
  const Featurizer featurizer(head.dim());
  const double score = sigmoid_score(head, featurizer.features(build_detection_input(context, max_tokens)));
  return {score >= threshold ? 1 : 0, score};
}

}  // namespace kgd
