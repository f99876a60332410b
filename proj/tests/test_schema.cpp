#include <gtest/gtest.h>

#include "patsim/schema.hpp"
#include "schema_cases.hpp"

using namespace patsim;

namespace {

SchemaErrorKind kind_of(std::string_view raw) {
  try {
    parse_simulator_turn(raw);
  } catch (const SchemaError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a schema error for: " << raw;
  return SchemaErrorKind::Unparseable;
}

}  // namespace

TEST(SchemaParse, PublishedExampleHousesIndexInAllFields) {
  const auto t = parse_simulator_turn(
      R"({"relevant_medical_history": ["[3.2] Individual Psychotherapy"],
          "style_transferred_medical_history": ["[3.2] talked to someone"],
          "response": "<\\s>talked to someone</\\s> [3.2] for my anxiety"})");
  ASSERT_EQ(t.relevant_medical_history.size(), 1u);
  EXPECT_EQ(t.relevant_medical_history[0], (IndexedText{"3.2", "Individual Psychotherapy"}));
  EXPECT_EQ(t.style_transferred_medical_history[0], (IndexedText{"3.2", "talked to someone"}));
  ASSERT_EQ(t.tags.size(), 1u);
  EXPECT_EQ(t.tags[0].index, "3.2");
  EXPECT_EQ(t.tags[0].span_text, "talked to someone");
  EXPECT_EQ(t.response.substr(t.tags[0].span_begin, t.tags[0].span_end - t.tags[0].span_begin), "talked to someone");
  EXPECT_EQ(t.response.substr(t.tags[0].tag_offset, 5), "[3.2]");
}

TEST(SchemaParse, EmptyListsPlainResponse) {
  const auto t = parse_simulator_turn(R"({"relevant_medical_history":[],"style_transferred_medical_history":[],"response":"Fine."})");
  EXPECT_TRUE(t.tags.empty());
  EXPECT_EQ(t.response, "Fine.");
}

TEST(SchemaParse, UnknownCitationIsDangling) {
  try {
    parse_simulator_turn(
        R"({"relevant_medical_history":["[2.1] Anxiety"],"style_transferred_medical_history":[],
            "response":"<\\s>nerves</\\s> [2.1] and <\\s>ticker</\\s> [9.9]"})");
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.kind(), SchemaErrorKind::DanglingIndex);
    EXPECT_EQ(e.offending(), std::vector<std::string>{"9.9"});
    EXPECT_NE(e.raw().find("ticker"), std::string::npos);
  }
}

TEST(SchemaParse, UnparseableKeepsRawText) {
  try {
    parse_simulator_turn("I'd rather not say.");
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.kind(), SchemaErrorKind::Unparseable);
    EXPECT_EQ(e.raw(), "I'd rather not say.");
  }
  EXPECT_EQ(kind_of("[1, 2, 3]"), SchemaErrorKind::Unparseable);
  EXPECT_EQ(kind_of(""), SchemaErrorKind::Unparseable);
}

TEST(SchemaParse, ItemsNeedIndexPrefix) {
  EXPECT_EQ(kind_of(R"({"relevant_medical_history":["Anxiety"],"style_transferred_medical_history":[],"response":""})"),
            SchemaErrorKind::MalformedItem);
  EXPECT_EQ(kind_of(R"({"relevant_medical_history":[3],"style_transferred_medical_history":[],"response":""})"),
            SchemaErrorKind::MalformedItem);
  EXPECT_EQ(kind_of(R"({"relevant_medical_history":["[a.b] x"],"style_transferred_medical_history":[],"response":""})"),
            SchemaErrorKind::MalformedItem);
}

TEST(SchemaParse, WrappersAreTolerated) {
  const std::string body = R"("relevant_medical_history":["[1.1] Age: 34"],"style_transferred_medical_history":[],"response":"<\\s>thirty-four</\\s>[1.1]")";
  const auto a = parse_simulator_turn("{" + body + "}");
  EXPECT_EQ(parse_simulator_turn(body), a);
  EXPECT_EQ(parse_simulator_turn("```json\n{" + body + "}\n```"), a);
  EXPECT_EQ(parse_simulator_turn("Sure!\n{" + body + "}\nThanks"), a);
}

TEST(SpanScanner, TagsCarryByteOffsets) {
  const std::string r = "I had <\\s>the sugar thing</\\s> [2.3], also <\\s>a pill</\\s>[3.1].";
  const auto tags = extract_tags(r);
  ASSERT_EQ(tags.size(), 2u);
  for (const auto& t : tags) {
    EXPECT_EQ(r.substr(t.span_begin, t.span_end - t.span_begin), t.span_text);
    EXPECT_EQ(r.substr(t.span_end, 5), "</\\s>");
    EXPECT_EQ(r[t.tag_offset], '[');
    EXPECT_EQ(r.substr(t.tag_offset + 1, t.index.size()), t.index);
  }
  EXPECT_EQ(tags[0].index, "2.3");
  EXPECT_EQ(tags[1].span_text, "a pill");
}

TEST(SchemaCorpus, HundredCasesClassifyAndRoundTrip) {
  const auto corpus = patsim::testing::schema_corpus();
  ASSERT_EQ(corpus.size(), 100u);
  std::size_t valid = 0, by_kind[5] = {};
  for (const auto& c : corpus) {
    SCOPED_TRACE(c.name);
    if (!c.expect) {
      ++valid;
      SimulatorTurn t;
      ASSERT_NO_THROW(t = parse_simulator_turn(c.raw)) << c.raw;
      const auto canon = serialize_turn(t);
      const auto again = parse_simulator_turn(canon);
      EXPECT_EQ(again, t);
      EXPECT_EQ(serialize_turn(again), canon);
      continue;
    }
    EXPECT_EQ(kind_of(c.raw), *c.expect) << c.raw;
    ++by_kind[static_cast<int>(*c.expect)];
  }
  EXPECT_EQ(valid, 50u);
  EXPECT_EQ(by_kind[static_cast<int>(SchemaErrorKind::MissingField)], 16u);
  EXPECT_EQ(by_kind[static_cast<int>(SchemaErrorKind::DanglingIndex)], 17u);
  EXPECT_EQ(by_kind[static_cast<int>(SchemaErrorKind::MalformedSpan)], 17u);
}

// Byte-level mutations of valid payloads must never escape as anything but
// a SchemaError.
TEST(SchemaCorpus, MutatedPayloadsNeverThrowOtherwise) {
  const auto corpus = patsim::testing::schema_corpus(7);
  Rng rng(3);
  const std::string alphabet = "{}[]\"\\<>/s.:, 0123456789";
  for (const auto& c : corpus) {
    for (int m = 0; m < 20; ++m) {
      auto raw = c.raw;
      const auto edits = 1 + rng.below(4);
      for (std::uint64_t e = 0; e < edits && !raw.empty(); ++e) {
        const auto pos = rng.below(raw.size());
        switch (rng.below(3)) {
          case 0: raw.erase(pos, 1); break;
          case 1: raw.insert(pos, 1, alphabet[rng.below(alphabet.size())]); break;
          default: raw[pos] = alphabet[rng.below(alphabet.size())];
        }
      }
      try {
        parse_simulator_turn(raw);
      } catch (const SchemaError&) {
      } catch (const std::exception& e) {
        ADD_FAILURE() << "non-schema exception " << e.what() << " for " << raw;
      }
    }
  }
}
