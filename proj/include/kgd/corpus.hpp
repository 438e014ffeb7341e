#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kgd/errors.hpp"

namespace kgd {

using ojson = nlohmann::ordered_json;

namespace detail {

inline std::string trim_copy(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Parses a JSON stream and rejects duplicate keys anywhere in the tree.
// The DOM parser would silently keep one of them otherwise.
inline ojson parse_json_checked(std::istream& is, const std::string& what) {
  std::vector<std::set<std::string>> key_stack;
  ojson::parser_callback_t cb = [&](int /*depth*/, ojson::parse_event_t event, ojson& parsed) {
    switch (event) {
      case ojson::parse_event_t::object_start:
        key_stack.emplace_back();
        break;
      case ojson::parse_event_t::object_end:
        key_stack.pop_back();
        break;
      case ojson::parse_event_t::key: {
        const auto key = parsed.get<std::string>();
        if (!key_stack.back().insert(key).second) {
          throw ParseError(what + ": duplicate key \"" + key + "\"");
        }
        break;
      }
      default:
        break;
    }
    return true;
  };
  try {
    return ojson::parse(is, cb);
  } catch (const ojson::exception& e) {
    throw ParseError(what + ": " + e.what());
  }
}

inline ojson parse_json_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open file: " + path);
  return parse_json_checked(is, path);
}

// DSTC labels carry entity/doc ids as either strings or integers.
inline std::string id_as_string(const ojson& v, const std::string& what) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<std::int64_t>());
  throw ParseError(what + ": id must be a string or an integer");
}

}  // namespace detail

struct SnippetRef {
  std::string domain;
  std::string entity_id;
  std::string doc_id;

  friend bool operator==(const SnippetRef&, const SnippetRef&) = default;
  friend auto operator<=>(const SnippetRef&, const SnippetRef&) = default;
};

struct KnowledgeSnippet {
  std::string domain;
  std::string entity_id;
  std::string entity_name;  // empty for domain-level "*" FAQs
  std::string doc_id;
  std::string title;
  std::string body;

  SnippetRef ref() const { return {domain, entity_id, doc_id}; }
};

class KnowledgeStore {
 public:
  void add(KnowledgeSnippet snippet) {
    if (detail::trim_copy(snippet.title).empty()) {
      throw ParseError("snippet (" + snippet.domain + "," + snippet.entity_id + "," +
                       snippet.doc_id + ") has empty title");
    }
    if (detail::trim_copy(snippet.body).empty()) {
      throw ParseError("snippet (" + snippet.domain + "," + snippet.entity_id + "," +
                       snippet.doc_id + ") has empty body");
    }
    const auto key = std::make_tuple(snippet.domain, snippet.entity_id, snippet.doc_id);
    if (!by_key_.emplace(key, snippets_.size()).second) {
      throw ParseError("duplicate snippet key (" + snippet.domain + "," + snippet.entity_id +
                       "," + snippet.doc_id + ")");
    }
    const std::size_t ordinal = snippets_.size();
    domain_index_[snippet.domain].push_back(ordinal);
    entity_index_[{snippet.domain, snippet.entity_id}].push_back(ordinal);
    snippets_.push_back(std::move(snippet));
  }

  std::size_t size() const { return snippets_.size(); }
  const std::vector<KnowledgeSnippet>& snippets() const { return snippets_; }
  const KnowledgeSnippet& at(std::size_t ordinal) const { return snippets_.at(ordinal); }

  std::optional<std::size_t> find(const SnippetRef& ref) const {
    auto it = by_key_.find(std::make_tuple(ref.domain, ref.entity_id, ref.doc_id));
    if (it == by_key_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t resolve(const SnippetRef& ref) const {
    auto found = find(ref);
    if (!found) {
      throw DanglingReference("snippet (" + ref.domain + "," + ref.entity_id + "," +
                              ref.doc_id + ") not in knowledge store");
    }
    return *found;
  }

  const std::map<std::string, std::vector<std::size_t>>& domain_index() const {
    return domain_index_;
  }
  const std::map<std::pair<std::string, std::string>, std::vector<std::size_t>>&
  entity_index() const {
    return entity_index_;
  }

  // Recomputes the index associations from the snippet collection alone.
  // Must reproduce the incrementally built maps exactly.
  std::pair<std::map<std::string, std::vector<std::size_t>>,
            std::map<std::pair<std::string, std::string>, std::vector<std::size_t>>>
  rebuild_indexes() const {
    std::map<std::string, std::vector<std::size_t>> dom;
    std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> ent;
    for (std::size_t i = 0; i < snippets_.size(); ++i) {
      dom[snippets_[i].domain].push_back(i);
      ent[{snippets_[i].domain, snippets_[i].entity_id}].push_back(i);
    }
    return {std::move(dom), std::move(ent)};
  }

  const std::string& name() const { return name_; }
  void set_name(std::string name) { name_ = std::move(name); }

 private:
  std::vector<KnowledgeSnippet> snippets_;
  std::map<std::tuple<std::string, std::string, std::string>, std::size_t> by_key_;
  std::map<std::string, std::vector<std::size_t>> domain_index_;
  std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> entity_index_;
  std::string name_;
};

enum class Speaker { User, System };

struct Turn {
  Speaker speaker = Speaker::User;
  std::string text;

  friend bool operator==(const Turn&, const Turn&) = default;
};

struct DialogueContext {
  std::vector<Turn> turns;

  friend bool operator==(const DialogueContext&, const DialogueContext&) = default;
};

struct TurnLabel {
  bool target = false;
  std::optional<SnippetRef> gold;
  std::optional<std::string> response;

  friend bool operator==(const TurnLabel&, const TurnLabel&) = default;
};

struct Corpus {
  std::vector<DialogueContext> contexts;
  std::vector<TurnLabel> labels;
  std::string store_ref;

  std::size_t size() const { return contexts.size(); }
};

// knowledge.json: { "<domain>": { "<entity_id>": { "name": str|null,
//                   "docs": { "<doc_id>": { "title": str, "body": str } } } } }
inline KnowledgeStore load_knowledge(const std::string& path) {
  const ojson root = detail::parse_json_file(path);
  if (!root.is_object()) throw ParseError(path + ": knowledge root must be an object");
  KnowledgeStore store;
  store.set_name(path);
  for (const auto& [domain, entities] : root.items()) {
    if (!entities.is_object()) {
      throw ParseError(path + ": domain \"" + domain + "\" must map to an object");
    }
    for (const auto& [entity_id, entity] : entities.items()) {
      if (!entity.is_object() || !entity.contains("docs")) {
        throw ParseError(path + ": entity \"" + entity_id + "\" missing docs");
      }
      std::string name;
      if (entity.contains("name") && entity["name"].is_string()) {
        name = entity["name"].get<std::string>();
      }
      if (entity_id == "*") name.clear();
      const auto& docs = entity["docs"];
      if (!docs.is_object()) {
        throw ParseError(path + ": docs of entity \"" + entity_id + "\" must be an object");
      }
      for (const auto& [doc_id, doc] : docs.items()) {
        if (!doc.is_object() || !doc.contains("title") || !doc.contains("body") ||
            !doc["title"].is_string() || !doc["body"].is_string()) {
          throw ParseError(path + ": doc \"" + doc_id + "\" needs string title and body");
        }
        store.add({domain, entity_id, name, doc_id, doc["title"].get<std::string>(),
                   doc["body"].get<std::string>()});
      }
    }
  }
  if (store.size() == 0) throw EmptyStore(path + ": knowledge store has no snippets");
  return store;
}

namespace detail {

inline DialogueContext context_from_json(const ojson& dlg, const std::string& what) {
  if (!dlg.is_array() || dlg.empty()) {
    throw ParseError(what + ": dialogue must be a non-empty array of turns");
  }
  DialogueContext ctx;
  for (const auto& t : dlg) {
    if (!t.is_object() || !t.contains("speaker") || !t.contains("text") ||
        !t["text"].is_string()) {
      throw ParseError(what + ": turn needs speaker and text");
    }
    const auto sp = t["speaker"].get<std::string>();
    Speaker speaker;
    if (sp == "U") {
      speaker = Speaker::User;
    } else if (sp == "S") {
      speaker = Speaker::System;
    } else {
      throw ParseError(what + ": speaker must be \"U\" or \"S\", got \"" + sp + "\"");
    }
    const auto text = t["text"].get<std::string>();
    if (text.empty()) throw ParseError(what + ": turn text must be non-empty");
    ctx.turns.push_back({speaker, text});
  }
  if (ctx.turns.back().speaker != Speaker::User) {
    throw ParseError(what + ": dialogue must end with a user turn");
  }
  return ctx;
}

inline TurnLabel label_from_json(const ojson& lab, const std::string& what) {
  if (!lab.is_object() || !lab.contains("target") || !lab["target"].is_boolean()) {
    throw ParseError(what + ": label needs a boolean target");
  }
  TurnLabel label;
  label.target = lab["target"].get<bool>();
  if (label.target) {
    if (!lab.contains("knowledge") || !lab["knowledge"].is_array() ||
        !lab.contains("response") || !lab["response"].is_string()) {
      throw ParseError(what + ": target label needs knowledge and response");
    }
    const auto& know = lab["knowledge"];
    if (know.size() != 1) {
      throw ParseError(what + ": exactly one gold snippet per target label, got " +
                       std::to_string(know.size()));
    }
    const auto& k = know[0];
    if (!k.is_object() || !k.contains("domain") || !k.contains("entity_id") ||
        !k.contains("doc_id")) {
      throw ParseError(what + ": knowledge ref needs domain, entity_id, doc_id");
    }
    label.gold = SnippetRef{k["domain"].get<std::string>(),
                            id_as_string(k["entity_id"], what),
                            id_as_string(k["doc_id"], what)};
    label.response = lab["response"].get<std::string>();
  } else if (lab.contains("knowledge") || lab.contains("response")) {
    throw ParseError(what + ": non-target label must not carry knowledge or response");
  }
  return label;
}

inline ojson context_to_json(const DialogueContext& ctx) {
  ojson turns = ojson::array();
  for (const auto& t : ctx.turns) {
    turns.push_back({{"speaker", t.speaker == Speaker::User ? "U" : "S"}, {"text", t.text}});
  }
  return turns;
}

inline ojson label_to_json(const TurnLabel& label) {
  ojson lab;
  lab["target"] = label.target;
  if (label.target) {
    lab["knowledge"] = ojson::array({{{"domain", label.gold->domain},
                                      {"entity_id", label.gold->entity_id},
                                      {"doc_id", label.gold->doc_id}}});
    lab["response"] = *label.response;
  }
  return lab;
}

}  // namespace detail

// logs.json: [ [ {"speaker": "U"|"S", "text": str}, ... ], ... ]
// labels.json: [ {"target": bool, "knowledge": [...], "response": str}?, ... ]
inline Corpus load_corpus(const std::string& logs_path, const std::string& labels_path,
                          const KnowledgeStore& store) {
  const ojson logs = detail::parse_json_file(logs_path);
  const ojson labels = detail::parse_json_file(labels_path);
  if (!logs.is_array()) throw ParseError(logs_path + ": logs root must be an array");
  if (!labels.is_array()) throw ParseError(labels_path + ": labels root must be an array");
  if (logs.size() != labels.size()) {
    throw LengthMismatch("log count " + std::to_string(logs.size()) + " != label count " +
                         std::to_string(labels.size()));
  }
  Corpus corpus;
  corpus.store_ref = store.name();
  for (std::size_t i = 0; i < logs.size(); ++i) {
    const std::string what = logs_path + "[" + std::to_string(i) + "]";
    corpus.contexts.push_back(detail::context_from_json(logs[i], what));
    auto label = detail::label_from_json(labels[i], labels_path + "[" + std::to_string(i) + "]");
    if (label.target) store.resolve(*label.gold);
    corpus.labels.push_back(std::move(label));
  }
  return corpus;
}

inline void save_corpus(const Corpus& corpus, const std::string& logs_path,
                        const std::string& labels_path) {
  if (corpus.contexts.size() != corpus.labels.size()) {
    throw LengthMismatch("corpus has " + std::to_string(corpus.contexts.size()) +
                         " contexts but " + std::to_string(corpus.labels.size()) + " labels");
  }
  ojson logs = ojson::array();
  for (const auto& ctx : corpus.contexts) logs.push_back(detail::context_to_json(ctx));
  ojson labels = ojson::array();
  for (const auto& lab : corpus.labels) labels.push_back(detail::label_to_json(lab));
  std::ofstream lo(logs_path, std::ios::binary);
  if (!lo) throw IoError("cannot write " + logs_path);
  lo << logs.dump(1) << '\n';
  std::ofstream la(labels_path, std::ios::binary);
  if (!la) throw IoError("cannot write " + labels_path);
  la << labels.dump(1) << '\n';
  if (!lo.flush() || !la.flush()) throw IoError("failed writing corpus files");
}

}  // namespace kgd
