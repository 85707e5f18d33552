#pragma once

// Dialog corpora with attached knowledge bases: loading, normalization,
// entity lexicon, delexicalized (sketch) targets and vocabulary.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"

namespace kbd {

using TokenId = std::uint32_t;
using Tokens = std::vector<std::string>;

enum class Speaker { user, system };

struct Utterance {
  Speaker speaker = Speaker::user;
  Tokens tokens;
};

struct KBAttribute {
  std::string key;
  std::string value;
};

struct KBRecord {
  std::vector<KBAttribute> attributes;
  int record_index = 0;  // 1-based within its KB
};

struct EntityMention {
  std::string value;
  std::string type;
  bool operator==(const EntityMention&) const = default;
};

struct DialogSample {
  std::vector<Utterance> history;
  std::vector<KBRecord> kb;
  Tokens gold_response;
  Tokens gold_sketch;
  std::vector<EntityMention> gold_entities;
  std::string domain;
  int dialog_index = 0;
  int turn_index = 0;
};

enum class DatasetFormat { smd_json, camrest_json, woz_json };

DatasetFormat parse_format(std::string_view name);
std::string_view format_name(DatasetFormat f);

/// Lowercases, trims, and joins interior whitespace with underscores.
std::string normalize_entity(std::string_view raw);

/// Sketch tag for an entity type.
inline std::string tag_for(std::string_view type) { return "@" + std::string(type); }

class EntityLexicon {
 public:
  enum class Source { kb, global, annotation };

  /// Registers a type without values.
  void declare_type(const std::string& type);
  bool has_type(std::string_view type) const;

  /// Adds a normalized value. A KB-sourced type overrides a global or
  /// annotation type; otherwise the first declared type wins.
  void add(const std::string& value, const std::string& type, Source source);

  std::optional<std::string> type_of(std::string_view value) const;
  bool contains(std::string_view value) const { return type_of_.contains(std::string(value)); }
  const std::map<std::string, std::set<std::string>>& by_type() const { return by_type_; }
  std::vector<std::string> types() const;
  std::size_t size() const { return type_of_.size(); }

  /// Lowercase, split punctuation, and join known multi-word entities.
  Tokens tokenize(std::string_view text) const;

  /// JSON map type -> sorted values.
  nlohmann::json to_json() const;
  static EntityLexicon from_json(const nlohmann::json& j);
  /// Reads a global entity list: type -> [string | object].
  void merge_entity_file(const std::filesystem::path& path);

 private:
  struct Entry {
    std::string type;
    Source source;
  };
  std::unordered_map<std::string, Entry> type_of_;
  std::map<std::string, std::set<std::string>> by_type_;
  // first token -> (phrase tokens, canonical entity), longest first
  std::unordered_map<std::string, std::vector<std::pair<Tokens, std::string>>> phrases_;

  void index_phrase(const std::string& value);
};

/// Punctuation splitting and lowercasing only.
Tokens basic_tokenize(std::string_view text);

/// Replaces every lexicon entity with its tag; entities keep order and multiplicity.
std::pair<Tokens, std::vector<EntityMention>> delexicalize(const Tokens& response,
                                                          const EntityLexicon& lexicon);

/// Replaces tags in order with the given entities.
Tokens relexicalize(const Tokens& sketch, const std::vector<EntityMention>& entities);

/// Unordered same-type pairs (a < b) among `kb_values`.
std::vector<std::pair<std::string, std::string>> same_type_pairs(
    const EntityLexicon& lexicon, const std::set<std::string>& kb_values);

/// Collects KB values of one file into the lexicon (first pass).
void collect_kb_entities(const std::filesystem::path& path, DatasetFormat format,
                         EntityLexicon& lexicon);

/// One sample per system turn with a nonempty history. Entity annotations
/// found in the file are checked against the declared types and added.
std::vector<DialogSample> load_dataset(const std::filesystem::path& path, DatasetFormat format,
                                       EntityLexicon& lexicon);

/// Parses from an in-memory JSON document (used by load_dataset).
std::vector<DialogSample> parse_dataset(const nlohmann::json& doc, DatasetFormat format,
                                        EntityLexicon& lexicon);

/// Writes samples back in the SMD-like schema accepted by load_dataset.
nlohmann::json samples_to_smd_json(const std::vector<DialogSample>& samples);

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kUnk = 1;
  static constexpr TokenId kStart = 2;
  static constexpr TokenId kEnd = 3;

  Vocabulary();
  /// Reserved tokens, then one tag per lexicon type, then corpus tokens.
  static Vocabulary build(const std::vector<DialogSample>& samples, const EntityLexicon& lexicon);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  TokenId add(const std::string& token);
  TokenId id(std::string_view token) const;  // kUnk if absent
  std::optional<TokenId> find(std::string_view token) const;
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  bool is_tag(TokenId id) const;
  std::vector<TokenId> encode(const Tokens& tokens) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

}  // namespace kbd
