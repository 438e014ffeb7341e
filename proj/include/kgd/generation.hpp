#pragma once

#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgd/corpus.hpp"
#include "kgd/errors.hpp"
#include "kgd/models.hpp"
#include "kgd/textproc.hpp"

namespace kgd {

// Generation prompt layout:
//   [BOS] [know] k_r [user] u_1 [sys] s_2 ... [user] u_m
// [EOS] is not part of the prompt; it terminates the generated response.
// Knowledge is rendered as "title body". Over budget, whole oldest dialogue
// turns are dropped before any knowledge token.
struct GenPrompt {
  std::vector<int> ids;
  std::size_t response_start = 0;  // equals ids.size() for a fresh prompt
};

inline GenPrompt build_gen_prompt(const DialogueContext& context, const KnowledgeSnippet& snippet,
                                  const Vocabulary& vocab, int max_tokens = 256) {
  if (context.turns.empty()) throw ConfigError("generation prompt needs at least one turn");
  if (max_tokens < 8) throw ConfigError("generation max_tokens must be >= 8");
  const TokenSeq know = tokenize(snippet.title + " " + snippet.body);

  struct TurnTokens {
    int marker;
    std::vector<int> ids;
  };
  std::vector<TurnTokens> turns;
  turns.reserve(context.turns.size());
  std::size_t total = 2 + know.size();  // [BOS] [know] + knowledge
  for (const auto& t : context.turns) {
    TurnTokens tt{t.speaker == Speaker::User ? kUser : kSys, vocab.encode_seq(tokenize(t.text))};
    total += 1 + tt.ids.size();
    turns.push_back(std::move(tt));
  }
  std::size_t first = 0;
  while (total > std::size_t(max_tokens) && first < turns.size()) {
    total -= 1 + turns[first].ids.size();
    ++first;
  }
  GenPrompt prompt;
  prompt.ids.push_back(kBos);
  prompt.ids.push_back(kKnow);
  for (const auto& tok : know) prompt.ids.push_back(vocab.encode(tok));
  for (std::size_t i = first; i < turns.size(); ++i) {
    prompt.ids.push_back(turns[i].marker);
    prompt.ids.insert(prompt.ids.end(), turns[i].ids.begin(), turns[i].ids.end());
  }
  prompt.response_start = prompt.ids.size();
  return prompt;
}

enum class PhaseTag { PostTrain, FineTune, StyleTransfer };

inline const char* to_string(PhaseTag t) {
  switch (t) {
    case PhaseTag::PostTrain: return "post_train";
    case PhaseTag::FineTune: return "fine_tune";
    case PhaseTag::StyleTransfer: return "style_transfer";
  }
  return "?";
}

inline PhaseTag phase_tag_from(const std::string& s) {
  if (s == "post_train") return PhaseTag::PostTrain;
  if (s == "fine_tune") return PhaseTag::FineTune;
  if (s == "style_transfer") return PhaseTag::StyleTransfer;
  throw ConfigError("unknown phase tag \"" + s + "\"");
}

// One schedule entry. post_train phases read a plain text file (one utterance
// per line). fine_tune and style_transfer phases read a directory holding
// logs.json, labels.json and knowledge.json, and train on the response region
// of (prompt, response) sequences only.
struct TrainingPhase {
  PhaseTag tag = PhaseTag::FineTune;
  std::string corpus_path;
  int epochs = 1;
  double lr = 0.05;
};

struct TrainingPhasePlan {
  std::vector<TrainingPhase> phases;

  void validate() const {
    if (phases.empty()) throw ConfigError("training plan needs at least one phase");
    for (const auto& p : phases) {
      if (p.epochs < 0) throw ConfigError("phase epochs must be >= 0");
      if (p.lr < 0.0) throw ConfigError("phase lr must be >= 0");
    }
  }
};

// Plan file: [{"corpus": path, "epochs": int, "lr": real, "tag": str}, ...]
inline TrainingPhasePlan load_phase_plan(const std::string& path) {
  const ojson root = detail::parse_json_file(path);
  if (!root.is_array()) throw ParseError(path + ": plan root must be an array");
  TrainingPhasePlan plan;
  for (const auto& entry : root) {
    if (!entry.is_object() || !entry.contains("corpus") || !entry.contains("epochs") ||
        !entry.contains("lr") || !entry.contains("tag")) {
      throw ParseError(path + ": phase needs corpus, epochs, lr, tag");
    }
    plan.phases.push_back({phase_tag_from(entry["tag"].get<std::string>()),
                           entry["corpus"].get<std::string>(), entry["epochs"].get<int>(),
                           entry["lr"].get<double>()});
  }
  plan.validate();
  return plan;
}

namespace detail {

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open corpus file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!tokenize(line).empty()) lines.push_back(line);
  }
  return lines;
}

struct LabeledDir {
  Corpus corpus;
  KnowledgeStore store;
};

inline LabeledDir load_labeled_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto logs = (fs::path(dir) / "logs.json").string();
  const auto labels = (fs::path(dir) / "labels.json").string();
  const auto knowledge = (fs::path(dir) / "knowledge.json").string();
  LabeledDir out;
  out.store = load_knowledge(knowledge);
  out.corpus = load_corpus(logs, labels, out.store);
  return out;
}

}  // namespace detail

// Texts of one phase corpus, used for vocabulary building.
inline std::vector<std::string> phase_corpus_texts(const TrainingPhase& phase) {
  std::vector<std::string> texts;
  if (phase.tag == PhaseTag::PostTrain) {
    return detail::read_lines(phase.corpus_path);
  }
  const auto data = detail::load_labeled_dir(phase.corpus_path);
  for (const auto& ctx : data.corpus.contexts) {
    for (const auto& turn : ctx.turns) texts.push_back(turn.text);
  }
  for (const auto& lab : data.corpus.labels) {
    if (lab.response) texts.push_back(*lab.response);
  }
  for (const auto& s : data.store.snippets()) {
    texts.push_back(s.title);
    texts.push_back(s.body);
  }
  return texts;
}

// Vocabulary over the union of all phase corpora; frozen before phase 1 so
// parameter shapes stay stable across the whole schedule.
inline Vocabulary build_generation_vocab(const TrainingPhasePlan& plan, int min_freq = 1,
                                         std::size_t max_size = 5000) {
  plan.validate();
  std::vector<std::string> texts;
  for (const auto& phase : plan.phases) {
    auto t = phase_corpus_texts(phase);
    texts.insert(texts.end(), t.begin(), t.end());
  }
  return build_vocab(texts, min_freq, max_size);
}

// Training sequences of one phase. Post-training treats every token of each
// line as predictable; fine-tuning and style transfer predict the response
// region plus the terminal [EOS] only. A corpus whose encoded tokens are more
// than half [UNK] is rejected as the wrong file.
inline std::vector<LmSequence> phase_sequences(const TrainingPhase& phase, const Vocabulary& vocab,
                                               int max_prompt_tokens = 256) {
  std::vector<LmSequence> seqs;
  std::size_t total_tokens = 0, unk_tokens = 0;
  auto count_unk = [&](std::span<const int> ids, std::size_t from) {
    for (std::size_t i = from; i < ids.size(); ++i) {
      if (ids[i] >= 9 || ids[i] == kUnk) {
        ++total_tokens;
        if (ids[i] == kUnk) ++unk_tokens;
      }
    }
  };
  if (phase.tag == PhaseTag::PostTrain) {
    for (const auto& line : detail::read_lines(phase.corpus_path)) {
      LmSequence seq;
      seq.ids.push_back(kBos);
      for (const auto& tok : tokenize(line)) seq.ids.push_back(vocab.encode(tok));
      seq.ids.push_back(kEos);
      seq.first_predicted = 1;
      count_unk(seq.ids, 1);
      seqs.push_back(std::move(seq));
    }
  } else {
    const auto data = detail::load_labeled_dir(phase.corpus_path);
    for (std::size_t i = 0; i < data.corpus.size(); ++i) {
      const auto& lab = data.corpus.labels[i];
      if (!lab.target) continue;
      const auto& snippet = data.store.at(data.store.resolve(*lab.gold));
      auto prompt = build_gen_prompt(data.corpus.contexts[i], snippet, vocab, max_prompt_tokens);
      LmSequence seq;
      seq.ids = std::move(prompt.ids);
      seq.first_predicted = seq.ids.size();
      for (const auto& tok : tokenize(*lab.response)) seq.ids.push_back(vocab.encode(tok));
      seq.ids.push_back(kEos);
      count_unk(seq.ids, 0);
      seqs.push_back(std::move(seq));
    }
  }
  if (total_tokens > 0 && double(unk_tokens) > 0.5 * double(total_tokens)) {
    throw VocabMismatch(phase.corpus_path + ": more than half of the corpus maps to [UNK]");
  }
  return seqs;
}

struct PhaseTrace {
  PhaseTag tag = PhaseTag::FineTune;
  std::vector<double> losses;  // per-epoch mean loss per sequence
};

struct GenerationConfig {
  int window = 8;
  int embed_dim = 32;
  int hidden_dim = 64;
  int max_prompt_tokens = 256;
  TrainConfig train;  // lr/epochs superseded per phase
};

// Runs the phases in order on the same parameter set. A phase with zero
// sequences or zero epochs is a no-op.
inline std::vector<PhaseTrace> train_generator(NeuralLM& lm, const TrainingPhasePlan& plan,
                                               const Vocabulary& vocab,
                                               const GenerationConfig& config) {
  plan.validate();
  if (lm.vocab_size != vocab.size()) {
    throw VocabMismatch("language model was built for a different vocabulary size");
  }
  std::vector<PhaseTrace> traces;
  for (std::size_t p = 0; p < plan.phases.size(); ++p) {
    const auto& phase = plan.phases[p];
    const auto seqs = phase_sequences(phase, vocab, config.max_prompt_tokens);
    PhaseTrace trace;
    trace.tag = phase.tag;
    if (!seqs.empty() && phase.epochs > 0) {
      TrainConfig tc = config.train;
      tc.lr = phase.lr;
      tc.epochs = phase.epochs;
      tc.seed = mix_seed(config.train.seed, p);
      trace.losses = sgd_train<NeuralLM, LmGrad>(
          lm, seqs.size(), tc,
          [&](const NeuralLM& m, std::span<const std::size_t> idx, LmGrad& grad) {
            double loss = 0.0;
            for (const auto i : idx) loss += lm_nll_grad(m, seqs[i], grad);
            return loss;
          });
    }
    traces.push_back(std::move(trace));
  }
  return traces;
}

// Convenience wrapper: one extra StyleTransfer phase on the given corpus.
inline std::vector<PhaseTrace> style_transfer_phase(NeuralLM& lm, const std::string& style_corpus,
                                                    const Vocabulary& vocab,
                                                    const GenerationConfig& config, int epochs,
                                                    double lr) {
  TrainingPhasePlan plan;
  plan.phases.push_back({PhaseTag::StyleTransfer, style_corpus, epochs, lr});
  return train_generator(lm, plan, vocab, config);
}

// Greedy decoding: argmax over non-special tokens plus [EOS] (ties resolved
// to the lowest id), stopping at [EOS] or max_len. The output never contains
// special tokens.
inline TokenSeq generate(const NeuralLM& lm, const GenPrompt& prompt, const Vocabulary& vocab,
                         int max_len = 60) {
  std::vector<int> ids = prompt.ids;
  TokenSeq out;
  detail::LmWorkspace ws;
  std::vector<int> window(std::size_t(lm.window), kPad);
  for (int step = 0; step < max_len; ++step) {
    const std::size_t len = ids.size();
    for (int i = 0; i < lm.window; ++i) {
      const std::ptrdiff_t src = std::ptrdiff_t(len) - lm.window + i;
      window[std::size_t(i)] = src < 0 ? kPad : ids[std::size_t(src)];
    }
    detail::lm_forward_into(lm, window, ws);
    int best = kEos;
    double best_p = ws.probs[kEos];
    for (int v = 9; v < lm.vocab_size; ++v) {
      if (v == kUnk) continue;
      if (ws.probs[std::size_t(v)] > best_p) {
        best = v;
        best_p = ws.probs[std::size_t(v)];
      }
    }
    if (best == kEos) break;
    ids.push_back(best);
    out.push_back(vocab.decode(best));
  }
  return out;
}

// Mean per-token negative log likelihood of (prompt, response) pairs; the
// held-out quality measure used next to BLEU.
inline double response_nll(const NeuralLM& lm, std::span<const LmSequence> seqs) {
  double loss = 0.0;
  std::size_t tokens = 0;
  LmGrad scratch(lm);
  for (const auto& seq : seqs) {
    loss += lm_nll_grad(lm, seq, scratch);
    tokens += seq.ids.size() - seq.first_predicted;
  }
  return tokens == 0 ? 0.0 : loss / double(tokens);
}

}  // namespace kgd
