#include "kbdistill/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "kbdistill/errors.hpp"

namespace kbd {

namespace {

using nlohmann::json;

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

bool is_split_punct(char c) {
  switch (c) {
    case ',': case '.': case '?': case '!': case ';': case ':': case '"': case '(': case ')':
      return true;
    default:
      return false;
  }
}

std::string scalar_to_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) {
    std::ostringstream os;
    os << v.get<double>();
    return os.str();
  }
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  return {};
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open dataset file: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

[[noreturn]] void schema_error(std::size_t dialog, const std::string& what) {
  throw ParseError("dialog " + std::to_string(dialog) + ": " + what);
}

// A dialog reduced to what every format shares.
struct RawTurn {
  Speaker speaker;
  std::string text;
  const json* entities = nullptr;  // optional [[value, type], ...]
};

struct RawDialog {
  std::vector<RawTurn> turns;
  std::vector<std::vector<std::pair<std::string, std::string>>> kb;  // key, raw value
  std::string domain;
};

std::vector<std::vector<std::pair<std::string, std::string>>> parse_kb_items(const json& items,
                                                                          std::size_t dialog) {
  std::vector<std::vector<std::pair<std::string, std::string>>> kb;
  if (items.is_null()) return kb;
  if (!items.is_array()) schema_error(dialog, "kb items must be an array or null");
  for (const auto& item : items) {
    if (!item.is_object()) schema_error(dialog, "kb record must be an object");
    std::vector<std::pair<std::string, std::string>> rec;
    for (const auto& [key, value] : item.items()) {
      std::string v = scalar_to_string(value);
      if (normalize_entity(v).empty()) continue;
      rec.emplace_back(lower(key), std::move(v));
    }
    if (!rec.empty()) kb.push_back(std::move(rec));
  }
  return kb;
}

const json* optional_entities(const json& obj, std::size_t dialog) {
  if (!obj.is_object()) return nullptr;
  auto it = obj.find("entities");
  if (it == obj.end() || it->is_null()) return nullptr;
  if (!it->is_array()) schema_error(dialog, "'entities' must be an array of [value, type]");
  return &*it;
}

std::string required_string(const json& obj, const char* key, std::size_t dialog) {
  if (!obj.is_object()) schema_error(dialog, std::string("expected an object holding '") + key + "'");
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_string()) schema_error(dialog, std::string("missing string '") + key + "'");
  return it->get<std::string>();
}

RawDialog parse_smd_dialog(const json& d, std::size_t index) {
  if (!d.is_object()) schema_error(index, "dialog must be an object");
  RawDialog out;
  auto turns = d.find("dialogue");
  if (turns == d.end() || !turns->is_array()) schema_error(index, "missing 'dialogue' array");
  for (const auto& t : *turns) {
    const std::string who = lower(required_string(t, "turn", index));
    RawTurn rt;
    if (who == "driver" || who == "user") {
      rt.speaker = Speaker::user;
    } else if (who == "assistant" || who == "system") {
      rt.speaker = Speaker::system;
    } else {
      schema_error(index, "unknown turn speaker '" + who + "'");
    }
    auto data = t.find("data");
    if (data == t.end()) schema_error(index, "turn without 'data'");
    rt.text = required_string(*data, "utterance", index);
    rt.entities = optional_entities(*data, index);
    out.turns.push_back(std::move(rt));
  }
  auto scenario = d.find("scenario");
  if (scenario != d.end() && scenario->is_object()) {
    auto kb = scenario->find("kb");
    if (kb != scenario->end() && kb->is_object()) {
      auto items = kb->find("items");
      if (items != kb->end()) out.kb = parse_kb_items(*items, index);
      if (auto title = kb->find("kb_title"); title != kb->end() && title->is_string()) {
        out.domain = lower(title->get<std::string>());
      }
    }
    auto task = scenario->find("task");
    if (task != scenario->end() && task->is_object()) {
      if (auto intent = task->find("intent"); intent != task->end() && intent->is_string()) {
        out.domain = lower(intent->get<std::string>());
      }
    }
  }
  return out;
}

RawDialog parse_camrest_dialog(const json& d, std::size_t index) {
  if (!d.is_object()) schema_error(index, "dialog must be an object");
  RawDialog out;
  auto dial = d.find("dial");
  if (dial == d.end() || !dial->is_array()) schema_error(index, "missing 'dial' array");
  for (const auto& t : *dial) {
    if (!t.is_object()) schema_error(index, "turn must be an object");
    if (auto usr = t.find("usr"); usr != t.end()) {
      out.turns.push_back({Speaker::user, required_string(*usr, "transcript", index), nullptr});
    }
    if (auto sys = t.find("sys"); sys != t.end()) {
      out.turns.push_back({Speaker::system, required_string(*sys, "sent", index),
                           optional_entities(*sys, index)});
    }
  }
  if (auto kb = d.find("kb"); kb != d.end()) out.kb = parse_kb_items(*kb, index);
  out.domain = "restaurant";
  if (auto dom = d.find("domain"); dom != d.end() && dom->is_string()) out.domain = lower(dom->get<std::string>());
  return out;
}

RawDialog parse_woz_dialog(const json& d, std::size_t index) {
  if (!d.is_object()) schema_error(index, "dialog must be an object");
  RawDialog out;
  auto log = d.find("log");
  if (log == d.end() || !log->is_array()) schema_error(index, "missing 'log' array");
  for (std::size_t i = 0; i < log->size(); ++i) {
    const auto& t = (*log)[i];
    const Speaker sp = (i % 2 == 0) ? Speaker::user : Speaker::system;
    out.turns.push_back({sp, required_string(t, "text", index),
                         sp == Speaker::system ? optional_entities(t, index) : nullptr});
  }
  if (auto kb = d.find("kb"); kb != d.end()) out.kb = parse_kb_items(*kb, index);
  if (auto dom = d.find("domain"); dom != d.end() && dom->is_string()) out.domain = lower(dom->get<std::string>());
  return out;
}

std::vector<RawDialog> parse_raw(const json& doc, DatasetFormat format) {
  std::vector<RawDialog> out;
  switch (format) {
    case DatasetFormat::smd_json:
    case DatasetFormat::camrest_json: {
      if (!doc.is_array()) throw ParseError("dataset root must be an array of dialogs");
      for (std::size_t i = 0; i < doc.size(); ++i) {
        out.push_back(format == DatasetFormat::smd_json ? parse_smd_dialog(doc[i], i)
                                                        : parse_camrest_dialog(doc[i], i));
      }
      break;
    }
    case DatasetFormat::woz_json: {
      if (!doc.is_object()) throw ParseError("woz dataset root must be an object keyed by dialog id");
      std::size_t i = 0;
      // nlohmann::json objects iterate in key order, which keeps loading deterministic.
      for (const auto& [id, d] : doc.items()) out.push_back(parse_woz_dialog(d, i++));
      break;
    }
  }
  return out;
}

void add_kb_values(const RawDialog& d, EntityLexicon& lexicon) {
  for (const auto& rec : d.kb) {
    for (const auto& [key, value] : rec) {
      lexicon.declare_type(key);
      lexicon.add(normalize_entity(value), key, EntityLexicon::Source::kb);
    }
  }
}

}  // namespace

DatasetFormat parse_format(std::string_view name) {
  if (name == "smd_json" || name == "smd") return DatasetFormat::smd_json;
  if (name == "camrest_json" || name == "camrest") return DatasetFormat::camrest_json;
  if (name == "woz_json" || name == "woz") return DatasetFormat::woz_json;
  throw ConfigError("unknown dataset format: " + std::string(name));
}

std::string_view format_name(DatasetFormat f) {
  switch (f) {
    case DatasetFormat::smd_json: return "smd_json";
    case DatasetFormat::camrest_json: return "camrest_json";
    case DatasetFormat::woz_json: return "woz_json";
  }
  return "smd_json";
}

std::string normalize_entity(std::string_view raw) {
  std::string out;
  bool pending_space = false;
  for (char c : raw) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back('_');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

Tokens basic_tokenize(std::string_view text) {
  Tokens out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) {
    word = lower(word);
    std::size_t b = 0, e = word.size();
    while (b < e && is_split_punct(word[b])) ++b;
    while (e > b && is_split_punct(word[e - 1])) --e;
    for (std::size_t i = 0; i < b; ++i) out.emplace_back(1, word[i]);
    if (e > b) out.push_back(word.substr(b, e - b));
    for (std::size_t i = e; i < word.size(); ++i) out.emplace_back(1, word[i]);
  }
  return out;
}

void EntityLexicon::declare_type(const std::string& type) { by_type_.try_emplace(type); }

bool EntityLexicon::has_type(std::string_view type) const {
  return by_type_.contains(std::string(type));
}

void EntityLexicon::add(const std::string& value, const std::string& type, Source source) {
  if (value.empty()) return;
  declare_type(type);
  auto it = type_of_.find(value);
  if (it == type_of_.end()) {
    type_of_.emplace(value, Entry{type, source});
    by_type_[type].insert(value);
    index_phrase(value);
    return;
  }
  if (source == Source::kb && it->second.source != Source::kb && it->second.type != type) {
    by_type_[it->second.type].erase(value);
    it->second = Entry{type, source};
    by_type_[type].insert(value);
  }
}

std::optional<std::string> EntityLexicon::type_of(std::string_view value) const {
  auto it = type_of_.find(std::string(value));
  if (it == type_of_.end()) return std::nullopt;
  return it->second.type;
}

std::vector<std::string> EntityLexicon::types() const {
  std::vector<std::string> out;
  for (const auto& [t, _] : by_type_) out.push_back(t);
  return out;
}

void EntityLexicon::index_phrase(const std::string& value) {
  if (value.find('_') == std::string::npos) return;
  std::string spaced = value;
  std::replace(spaced.begin(), spaced.end(), '_', ' ');
  Tokens words = basic_tokenize(spaced);
  if (words.size() < 2) return;
  auto& bucket = phrases_[words.front()];
  bucket.emplace_back(std::move(words), value);
  std::stable_sort(bucket.begin(), bucket.end(), [](const auto& a, const auto& b) {
    return a.first.size() > b.first.size();
  });
}

Tokens EntityLexicon::tokenize(std::string_view text) const {
  Tokens basic;
  {
    std::istringstream in{std::string(text)};
    std::string word;
    while (in >> word) {
      word = lower(word);
      if (contains(word)) {
        basic.push_back(word);
        continue;
      }
      Tokens parts = basic_tokenize(word);
      basic.insert(basic.end(), parts.begin(), parts.end());
    }
  }
  Tokens out;
  for (std::size_t i = 0; i < basic.size();) {
    bool matched = false;
    if (auto it = phrases_.find(basic[i]); it != phrases_.end()) {
      for (const auto& [words, canonical] : it->second) {
        if (i + words.size() > basic.size()) continue;
        if (std::equal(words.begin(), words.end(), basic.begin() + static_cast<std::ptrdiff_t>(i))) {
          out.push_back(canonical);
          i += words.size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) out.push_back(basic[i++]);
  }
  return out;
}

nlohmann::json EntityLexicon::to_json() const {
  json j = json::object();
  for (const auto& [type, values] : by_type_) j[type] = std::vector<std::string>(values.begin(), values.end());
  return j;
}

EntityLexicon EntityLexicon::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw LexiconError("lexicon JSON must map type -> values");
  EntityLexicon lex;
  for (const auto& [type, values] : j.items()) {
    lex.declare_type(type);
    if (!values.is_array()) throw LexiconError("lexicon type '" + type + "' must map to an array");
    for (const auto& v : values) {
      if (v.is_object()) {
        for (const auto& [field, fv] : v.items()) {
          const std::string t = field == "type" ? type + "_type" : field;
          lex.add(normalize_entity(scalar_to_string(fv)), t, Source::global);
        }
      } else {
        lex.add(normalize_entity(scalar_to_string(v)), type, Source::global);
      }
    }
  }
  return lex;
}

void EntityLexicon::merge_entity_file(const std::filesystem::path& path) {
  EntityLexicon other = from_json(read_json(path));
  for (const auto& [type, values] : other.by_type_) {
    declare_type(type);
    for (const auto& v : values) add(v, type, Source::global);
  }
}

std::pair<Tokens, std::vector<EntityMention>> delexicalize(const Tokens& response,
                                                          const EntityLexicon& lexicon) {
  Tokens sketch;
  std::vector<EntityMention> entities;
  sketch.reserve(response.size());
  for (const auto& tok : response) {
    if (auto type = lexicon.type_of(tok)) {
      sketch.push_back(tag_for(*type));
      entities.push_back({tok, *type});
    } else {
      sketch.push_back(tok);
    }
  }
  return {std::move(sketch), std::move(entities)};
}

Tokens relexicalize(const Tokens& sketch, const std::vector<EntityMention>& entities) {
  Tokens out;
  std::size_t next = 0;
  for (const auto& tok : sketch) {
    if (!tok.empty() && tok.front() == '@' && next < entities.size() &&
        tag_for(entities[next].type) == tok) {
      out.push_back(entities[next++].value);
    } else {
      out.push_back(tok);
    }
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> same_type_pairs(
    const EntityLexicon& lexicon, const std::set<std::string>& kb_values) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& [type, values] : lexicon.by_type()) {
    std::vector<std::string> present;
    for (const auto& v : values) {
      if (kb_values.contains(v)) present.push_back(v);
    }
    for (std::size_t i = 0; i < present.size(); ++i) {
      for (std::size_t j = i + 1; j < present.size(); ++j) pairs.emplace_back(present[i], present[j]);
    }
  }
  return pairs;
}

void collect_kb_entities(const std::filesystem::path& path, DatasetFormat format,
                         EntityLexicon& lexicon) {
  for (const auto& d : parse_raw(read_json(path), format)) add_kb_values(d, lexicon);
}

std::vector<DialogSample> parse_dataset(const nlohmann::json& doc, DatasetFormat format,
                                        EntityLexicon& lexicon) {
  const std::vector<RawDialog> dialogs = parse_raw(doc, format);
  for (const auto& d : dialogs) add_kb_values(d, lexicon);

  // Annotated entities must use declared types.
  for (std::size_t di = 0; di < dialogs.size(); ++di) {
    for (const auto& t : dialogs[di].turns) {
      if (t.entities == nullptr) continue;
      for (const auto& e : *t.entities) {
        if (!e.is_array() || e.size() != 2 || !e[0].is_string() || !e[1].is_string()) {
          schema_error(di, "entity annotation must be [value, type]");
        }
        const std::string type = lower(e[1].get<std::string>());
        if (!lexicon.has_type(type)) {
          throw LexiconError("dialog " + std::to_string(di) + ": unknown entity type '" + type + "'");
        }
        lexicon.add(normalize_entity(e[0].get<std::string>()), type,
                    EntityLexicon::Source::annotation);
      }
    }
  }

  std::vector<DialogSample> samples;
  for (std::size_t di = 0; di < dialogs.size(); ++di) {
    const RawDialog& d = dialogs[di];
    std::vector<KBRecord> kb;
    for (std::size_t m = 0; m < d.kb.size(); ++m) {
      KBRecord rec;
      rec.record_index = static_cast<int>(m + 1);
      for (const auto& [key, value] : d.kb[m]) {
        const bool dup = std::any_of(rec.attributes.begin(), rec.attributes.end(),
                                     [&](const KBAttribute& a) { return a.key == key; });
        if (dup) schema_error(di, "duplicate key '" + key + "' in kb record");
        rec.attributes.push_back({key, normalize_entity(value)});
      }
      kb.push_back(std::move(rec));
    }
    std::vector<Utterance> history;
    for (std::size_t ti = 0; ti < d.turns.size(); ++ti) {
      const RawTurn& t = d.turns[ti];
      Tokens toks = lexicon.tokenize(t.text);
      if (toks.empty()) continue;
      if (t.speaker == Speaker::system && !history.empty()) {
        DialogSample s;
        s.history = history;
        s.kb = kb;
        s.gold_response = toks;
        std::tie(s.gold_sketch, s.gold_entities) = delexicalize(toks, lexicon);
        s.domain = d.domain;
        s.dialog_index = static_cast<int>(di);
        s.turn_index = static_cast<int>(ti);
        samples.push_back(std::move(s));
      }
      history.push_back({t.speaker, std::move(toks)});
    }
  }
  return samples;
}

std::vector<DialogSample> load_dataset(const std::filesystem::path& path, DatasetFormat format,
                                       EntityLexicon& lexicon) {
  return parse_dataset(read_json(path), format, lexicon);
}

nlohmann::json samples_to_smd_json(const std::vector<DialogSample>& samples) {
  // The last sample of each dialog carries the full history.
  std::map<int, const DialogSample*> last;
  for (const auto& s : samples) {
    auto& slot = last[s.dialog_index];
    if (slot == nullptr || s.turn_index > slot->turn_index) slot = &s;
  }
  auto join = [](const Tokens& toks) {
    std::string out;
    for (const auto& t : toks) {
      if (!out.empty()) out.push_back(' ');
      out += t;
    }
    return out;
  };
  json doc = json::array();
  for (const auto& [_, s] : last) {
    json turns = json::array();
    for (const auto& u : s->history) {
      turns.push_back({{"turn", u.speaker == Speaker::user ? "driver" : "assistant"},
                       {"data", {{"utterance", join(u.tokens)}}}});
    }
    turns.push_back({{"turn", "assistant"}, {"data", {{"utterance", join(s->gold_response)}}}});
    json items = json::array();
    for (const auto& rec : s->kb) {
      json item = json::object();
      for (const auto& a : rec.attributes) item[a.key] = a.value;
      items.push_back(std::move(item));
    }
    json kb = {{"items", s->kb.empty() ? json(nullptr) : items}};
    doc.push_back({{"dialogue", turns}, {"scenario", {{"kb", kb}, {"task", {{"intent", s->domain}}}}}});
  }
  return doc;
}

Vocabulary::Vocabulary() {
  for (const char* t : {"<pad>", "<unk>", "<s>", "</s>"}) add(t);
}

Vocabulary Vocabulary::build(const std::vector<DialogSample>& samples, const EntityLexicon& lexicon) {
  Vocabulary v;
  for (const auto& type : lexicon.types()) {
    v.add(tag_for(type));
    v.add(type);
  }
  for (const auto& s : samples) {
    for (const auto& u : s.history) {
      for (const auto& t : u.tokens) v.add(t);
    }
    for (const auto& t : s.gold_response) v.add(t);
    for (const auto& t : s.gold_sketch) v.add(t);
    for (const auto& rec : s.kb) {
      for (const auto& a : rec.attributes) {
        v.add(a.key);
        v.add(a.value);
      }
    }
  }
  return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  const std::vector<std::string> reserved = v.tokens_;
  if (tokens.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens.begin())) {
    throw VocabularyError("vocabulary does not start with the reserved tokens");
  }
  for (std::size_t i = reserved.size(); i < tokens.size(); ++i) {
    if (v.ids_.contains(tokens[i])) throw VocabularyError("duplicate vocabulary token: " + tokens[i]);
    v.add(tokens[i]);
  }
  return v;
}

TokenId Vocabulary::add(const std::string& token) {
  auto [it, fresh] = ids_.emplace(token, static_cast<TokenId>(tokens_.size()));
  if (fresh) tokens_.push_back(token);
  return it->second;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnk : it->second;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

bool Vocabulary::is_tag(TokenId id) const {
  const auto& t = tokens_.at(id);
  return t.size() > 1 && t.front() == '@';
}

std::vector<TokenId> Vocabulary::encode(const Tokens& tokens) const {
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

}  // namespace kbd
