#include "doctest.h"
#include "kbdistill/errors.hpp"
#include "kbdistill/model.hpp"
#include "synthetic.hpp"

using namespace kbd;
using nlohmann::json;

namespace {

json turn(const char* who, const std::string& text) {
  return {{"turn", who}, {"data", {{"utterance", text}}}};
}

json three_turn_dialog() {
  return json::array(
      {{{"dialogue",
         {turn("driver", "when is my dinner"), turn("assistant", "which dinner ?"),
          turn("driver", "the one with alex"), turn("assistant", "your dinner with alex is at 10pm"),
          turn("driver", "thanks"), turn("assistant", "you are welcome")}},
        {"scenario",
         {{"kb",
           {{"items", {{{"event", "dinner"}, {"invitee", "alex"}, {"time", "10pm"}},
                       {{"event", "lab"}, {"invitee", "boss"}, {"time", "9am"}}}},
            {"kb_title", "calendar"}}},
          {"task", {{"intent", "schedule"}}}}}},
       {{"dialogue", {turn("driver", "will it rain"), turn("assistant", "no rain today")}},
        {"scenario", {{"kb", {{"items", nullptr}}}, {"task", {{"intent", "weather"}}}}}}});
}

}  // namespace

TEST_CASE("one sample per system turn with growing histories") {
  EntityLexicon lex;
  const auto samples = parse_dataset(three_turn_dialog(), DatasetFormat::smd_json, lex);
  REQUIRE(samples.size() == 4);
  CHECK(samples[0].history.size() == 1);
  CHECK(samples[1].history.size() == 3);
  CHECK(samples[2].history.size() == 5);
  CHECK(samples[0].kb.size() == 2);
  CHECK(samples[0].domain == "schedule");
}

TEST_CASE("empty-KB turns are kept with an empty KB") {
  EntityLexicon lex;
  const auto samples = parse_dataset(three_turn_dialog(), DatasetFormat::smd_json, lex);
  CHECK(samples[3].kb.empty());
  CHECK(samples[3].domain == "weather");
}

TEST_CASE("round trip through the SMD writer keeps the sample count") {
  EntityLexicon lex;
  const auto samples = parse_dataset(three_turn_dialog(), DatasetFormat::smd_json, lex);
  EntityLexicon lex2;
  const auto again = parse_dataset(samples_to_smd_json(samples), DatasetFormat::smd_json, lex2);
  CHECK(again.size() == samples.size());
}

TEST_CASE("loading is deterministic and sketches relexicalize to responses") {
  const json doc = testing::calendar_dialogs({20, 3});
  EntityLexicon a, b;
  const auto s1 = parse_dataset(doc, DatasetFormat::smd_json, a);
  const auto s2 = parse_dataset(doc, DatasetFormat::smd_json, b);
  REQUIRE(s1.size() == s2.size());
  for (std::size_t i = 0; i < s1.size(); ++i) {
    CHECK(s1[i].gold_sketch == s2[i].gold_sketch);
    CHECK(s1[i].gold_sketch.size() == s1[i].gold_response.size());
    CHECK(relexicalize(s1[i].gold_sketch, s1[i].gold_entities) == s1[i].gold_response);
    for (std::size_t t = 0; t < s1[i].gold_sketch.size(); ++t) {
      const bool differs = s1[i].gold_sketch[t] != s1[i].gold_response[t];
      CHECK(differs == a.contains(s1[i].gold_response[t]));
    }
  }
}

TEST_CASE("malformed input names the dialog") {
  EntityLexicon lex;
  json bad = three_turn_dialog();
  bad[1]["dialogue"] = "oops";
  try {
    parse_dataset(bad, DatasetFormat::smd_json, lex);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("dialog 1") != std::string::npos);
  }
}

TEST_CASE("annotations with an undeclared type are rejected") {
  EntityLexicon lex;
  json doc = three_turn_dialog();
  doc[0]["dialogue"][1]["data"]["entities"] = json::array({json::array({"dinner", "color"})});
  CHECK_THROWS_AS(parse_dataset(doc, DatasetFormat::smd_json, lex), LexiconError);
}

TEST_CASE("delexicalize examples") {
  EntityLexicon lex;
  lex.add("dinner", "event", EntityLexicon::Source::kb);
  lex.add("alex", "invitee", EntityLexicon::Source::kb);
  lex.add("10pm", "time", EntityLexicon::Source::kb);
  lex.add("11am", "time", EntityLexicon::Source::kb);
  auto [sketch, ents] = delexicalize({"the", "dinner", "with", "alex", "is", "at", "10pm"}, lex);
  CHECK(sketch == Tokens{"the", "@event", "with", "@invitee", "is", "at", "@time"});
  CHECK(ents == std::vector<EntityMention>{{"dinner", "event"}, {"alex", "invitee"}, {"10pm", "time"}});

  auto [plain, none] = delexicalize({"hello", "there"}, lex);
  CHECK(plain == Tokens{"hello", "there"});
  CHECK(none.empty());

  auto [rep, twice] = delexicalize({"at", "11am", "and", "11am"}, lex);
  CHECK(twice.size() == 2);
  CHECK(twice[0].value == "11am");
  CHECK(twice[1].value == "11am");
}

TEST_CASE("same-type pairs") {
  EntityLexicon lex;
  for (auto v : {"alex", "ana", "boss"}) lex.add(v, "invitee", EntityLexicon::Source::kb);
  CHECK(same_type_pairs(lex, {"alex", "ana", "boss"}).size() == 3);

  EntityLexicon single;
  single.add("alex", "invitee", EntityLexicon::Source::kb);
  single.add("10pm", "time", EntityLexicon::Source::kb);
  CHECK(same_type_pairs(single, {"alex", "10pm"}).empty());

  EntityLexicon two;
  for (auto v : {"a", "b"}) two.add(v, "t1", EntityLexicon::Source::kb);
  for (auto v : {"x", "y", "z"}) two.add(v, "t2", EntityLexicon::Source::kb);
  CHECK(same_type_pairs(two, {"a", "b", "x", "y", "z"}).size() == 4);
  // restricted to the given KB values: C(2,2) + C(2,2)
  CHECK(same_type_pairs(two, {"a", "b", "x", "y"}).size() == 2);
}

TEST_CASE("lexicon normalization and KB type precedence") {
  CHECK(normalize_entity("  Rose  Crescent ") == "rose_crescent");
  EntityLexicon lex;
  lex.add("home", "poi_type", EntityLexicon::Source::global);
  lex.add("home", "poi", EntityLexicon::Source::kb);
  CHECK(lex.type_of("home") == "poi");
  lex.add("home", "other", EntityLexicon::Source::kb);
  CHECK(lex.type_of("home") == "poi");
  lex.add("4_-_6_rose_crescent", "address", EntityLexicon::Source::kb);
  CHECK(lex.tokenize("it is at 4 - 6 Rose Crescent.") ==
        Tokens{"it", "is", "at", "4_-_6_rose_crescent", "."});
}

TEST_CASE("vocabulary reserves ids and tags") {
  const auto c = testing::make_corpus(testing::tiny_dialogs());
  CHECK(c.vocab.token(Vocabulary::kPad) == "<pad>");
  CHECK(c.vocab.token(Vocabulary::kUnk) == "<unk>");
  CHECK(c.vocab.token(Vocabulary::kStart) == "<s>");
  CHECK(c.vocab.token(Vocabulary::kEnd) == "</s>");
  for (const auto& t : c.lexicon.types()) {
    auto id = c.vocab.find(tag_for(t));
    REQUIRE(id.has_value());
    CHECK(c.vocab.is_tag(*id));
  }
  const auto again = Vocabulary::from_tokens(c.vocab.tokens());
  CHECK(again.tokens() == c.vocab.tokens());
  CHECK(c.vocab.id("never-seen") == Vocabulary::kUnk);
  CHECK_THROWS_AS(Vocabulary::from_tokens({"a", "b"}), VocabularyError);
}

TEST_CASE("CamRest and WOZ analogues load") {
  EntityLexicon lex;
  const json cam = json::array(
      {{{"dial",
         {{{"usr", {{"transcript", "cheap food in the north"}}},
           {"sys", {{"sent", "royal spice is cheap and in the north"}}}}}},
        {"kb", {{{"name", "royal spice"}, {"area", "north"}, {"pricerange", "cheap"}}}}}});
  const auto cs = parse_dataset(cam, DatasetFormat::camrest_json, lex);
  REQUIRE(cs.size() == 1);
  CHECK(cs[0].domain == "restaurant");
  CHECK(cs[0].gold_response[0] == "royal_spice");
  CHECK(cs[0].gold_sketch[0] == "@name");

  const json woz = {{"d1",
                     {{"log", {{{"text", "a hotel please"}}, {{"text", "the acorn is nice"}}}},
                      {"kb", {{{"name", "acorn"}, {"type", "guesthouse"}}}},
                      {"domain", "hotel"}}}};
  EntityLexicon lex2;
  const auto ws = parse_dataset(woz, DatasetFormat::woz_json, lex2);
  REQUIRE(ws.size() == 1);
  CHECK(ws[0].domain == "hotel");
  CHECK(ws[0].gold_sketch == Tokens{"the", "@name", "is", "nice"});
}

TEST_CASE("prepare_sample rejects attribute types missing from the vocabulary") {
  auto c = testing::make_corpus(testing::tiny_dialogs());
  DialogSample s = c.train[0];
  s.kb[0].attributes.push_back({"unheard_of_key", "x"});
  CHECK_THROWS_AS(prepare_sample(s, c.vocab), VocabularyError);
}
