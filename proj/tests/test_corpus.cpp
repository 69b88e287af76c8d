#include <random>
#include <set>
#include <sstream>

#include <gtest/gtest.h>

#include "ibner/corpus.hpp"
#include "ibner/synthetic.hpp"

using namespace ibner;

namespace {

Corpus parse(const std::string& text, std::size_t max_len = 512) {
    std::istringstream in(text);
    return parse_corpus(in, "mem", {max_len});
}

std::size_t count_formula(std::size_t n, std::size_t sl) {
    std::size_t total = 0;
    for (std::size_t l = 1; l <= std::min(sl, n); ++l) total += n - l + 1;
    return total;
}

}  // namespace

TEST(LoadCorpus, ParsesRecord) {
    auto c = parse(R"({"doc_id":"d1","tokens":["renal","failure","occurred"],"entities":[{"start":0,"end":1,"type":"Disease"}]})"
                   "\n");
    ASSERT_EQ(c.sentences.size(), 1u);
    const auto& s = c.sentences[0];
    ASSERT_EQ(s.gold_entities.size(), 1u);
    EXPECT_EQ(join(surface(s, s.gold_entities[0].start, s.gold_entities[0].end)), "renal failure");
    EXPECT_EQ(c.types.name(s.gold_entities[0].type), "Disease");
}

TEST(LoadCorpus, EmptyInputGivesEmptyCorpus) {
    auto c = parse("");
    EXPECT_TRUE(c.sentences.empty());
    EXPECT_EQ(c.types.size(), 0u);
}

TEST(LoadCorpus, OffsetPastEndReportsLine) {
    try {
        parse("{\"doc_id\":\"a\",\"tokens\":[\"x\"]}\n"
              "{\"doc_id\":\"bad\",\"tokens\":[\"x\",\"y\"],\"entities\":[{\"start\":1,\"end\":2,\"type\":\"T\"}]}\n");
        FAIL();
    } catch (const DataError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("mem:2"), std::string::npos);
        EXPECT_NE(msg.find("bad"), std::string::npos);
    }
}

TEST(LoadCorpus, MalformedRecordReportsLine) {
    try {
        parse("\n{not json}\n");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("mem:2"), std::string::npos);
    }
}

TEST(LoadCorpus, DuplicateEntityRejected) {
    EXPECT_THROW(parse(R"({"doc_id":"d","tokens":["a","b"],"entities":[{"start":0,"end":1,"type":"T"},{"start":0,"end":1,"type":"T"}]})"),
                 DataError);
    // Same offsets with another type is a legal multi-type span.
    auto c = parse(R"({"doc_id":"d","tokens":["a","b"],"entities":[{"start":0,"end":1,"type":"T"},{"start":0,"end":1,"type":"U"}]})");
    EXPECT_EQ(c.sentences[0].gold_entities.size(), 2u);
}

TEST(LoadCorpus, LongSentenceSplitDropsCrossingEntities) {
    auto c = parse(R"({"doc_id":"d","tokens":["a","b","c","d","e"],"entities":[{"start":0,"end":0,"type":"T"},{"start":1,"end":2,"type":"T"},{"start":3,"end":4,"type":"T"}]})",
                   2);
    ASSERT_EQ(c.sentences.size(), 3u);
    EXPECT_EQ(c.dropped_entities, 2u);
    EXPECT_FALSE(c.warnings.empty());
    EXPECT_EQ(c.sentences[0].gold_entities.size(), 1u);
    EXPECT_EQ(c.sentences[1].sent, 1u);
    for (const auto& s : c.sentences) EXPECT_LE(s.tokens.size(), 2u);
}

TEST(LoadCorpus, WriteThenParseRoundTrips) {
    Corpus c = synthetic::generate();
    std::ostringstream out;
    write_corpus(out, c);
    Corpus back = parse(out.str());
    ASSERT_EQ(back.sentences.size(), c.sentences.size());
    for (std::size_t i = 0; i < c.sentences.size(); ++i) {
        EXPECT_EQ(back.sentences[i].tokens, c.sentences[i].tokens);
        EXPECT_EQ(back.sentences[i].doc_id, c.sentences[i].doc_id);
        EXPECT_EQ(back.sentences[i].sent, c.sentences[i].sent);
        EXPECT_EQ(back.sentences[i].gold_entities.size(), c.sentences[i].gold_entities.size());
    }
}

TEST(EnumerateSpans, FiveTokensLengthThree) {
    Sentence s{"d", 0, {"a", "b", "c", "d", "e"}, {}};
    EXPECT_EQ(enumerate_spans(s, 3, 1).size(), 12u);
}

TEST(EnumerateSpans, SingleToken) {
    Sentence s{"d", 0, {"a"}, {}};
    EXPECT_EQ(enumerate_spans(s, 14, 1).size(), 1u);
}

TEST(EnumerateSpans, EmptySentence) {
    Sentence s{"d", 0, {}, {}};
    EXPECT_TRUE(enumerate_spans(s, 14, 1).empty());
}

TEST(EnumerateSpans, NestedEntitiesLabelledExactly) {
    Sentence s{"d", 0, {"il-2", "gene", "promoter", "x"}, {{0, 2, 0, {}}, {1, 2, 1, {}}}};
    for (const auto& c : enumerate_spans(s, 14, 2)) {
        if (c.start == 1 && c.end == 2) {
            EXPECT_EQ(c.label, (std::vector<std::uint8_t>{0, 1}));
        } else if (c.start == 0 && c.end == 2) {
            EXPECT_EQ(c.label, (std::vector<std::uint8_t>{1, 0}));
        } else {
            EXPECT_FALSE(c.is_entity());
        }
    }
}

TEST(EnumerateSpans, MatchesBruteForceAndCountFormula) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = std::uniform_int_distribution<std::size_t>(0, 40)(rng);
        const std::size_t sl = std::uniform_int_distribution<std::size_t>(1, 14)(rng);
        const std::size_t types = 3;
        Sentence s{"d", 0, TokenSeq(n, "w"), {}};
        std::set<std::tuple<std::size_t, std::size_t, TypeId>> gold;
        for (std::size_t k = 0; n > 0 && k < 4; ++k) {
            std::size_t a = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
            std::size_t b = std::uniform_int_distribution<std::size_t>(a, n - 1)(rng);
            TypeId t = std::uniform_int_distribution<TypeId>(0, types - 1)(rng);
            if (gold.emplace(a, b, t).second) s.gold_entities.push_back({a, b, t, {}});
        }
        std::vector<std::pair<std::size_t, std::size_t>> expected;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j)
                if (j - i + 1 <= sl) expected.emplace_back(i, j);
        auto got = enumerate_spans(s, sl, types);
        ASSERT_EQ(got.size(), expected.size());
        ASSERT_EQ(got.size(), count_formula(n, sl));
        for (std::size_t k = 0; k < got.size(); ++k) {
            EXPECT_EQ(got[k].start, expected[k].first);
            EXPECT_EQ(got[k].end, expected[k].second);
            for (TypeId t = 0; t < types; ++t)
                EXPECT_EQ(got[k].label[t] != 0, gold.count({got[k].start, got[k].end, t}) != 0);
        }
    }
}

TEST(SynonymDict, LowercasesKeysAndMerges) {
    std::istringstream in("# comment\nPPA\tprimary progressive aphasia\nppa\tprimary progressive apraxia of speech\n");
    auto d = parse_synonym_dict(in, "dict");
    ASSERT_EQ(d.size(), 1u);
    const auto* syn = d.lookup("ppa");
    ASSERT_NE(syn, nullptr);
    EXPECT_EQ(*syn, (std::vector<std::string>{"primary progressive aphasia", "primary progressive apraxia of speech"}));
}

TEST(SynonymDict, DropsSelfSynonym) {
    std::istringstream in("renal failure\tRenal Failure\n");
    auto d = parse_synonym_dict(in, "dict");
    EXPECT_EQ(d.lookup("renal failure"), nullptr);
    for (const auto& [k, v] : d.entries()) EXPECT_FALSE(v.empty());
}

TEST(SynonymDict, MissingTabReportsLine) {
    std::istringstream in("a\tb\nno tab here\n");
    try {
        parse_synonym_dict(in, "dict");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("dict:2"), std::string::npos);
    }
}

TEST(AttachSynonyms, CaseInsensitiveLookupAndCoverage) {
    auto c = parse(R"({"doc_id":"d","tokens":["Renal","Failure","and","gout","and","x"],"entities":[{"start":0,"end":1,"type":"Disease"},{"start":3,"end":3,"type":"Disease"},{"start":5,"end":5,"type":"Disease"},{"start":2,"end":2,"type":"Disease"}]})");
    SynonymDictionary d;
    d.add("renal failure", "kidney failure");
    d.add("GOUT", "uric arthritis");
    d.add("x", "y");
    auto cov = attach_synonyms(c, d);
    EXPECT_EQ(cov.entities, 4u);
    EXPECT_EQ(cov.with_synonyms, 3u);
    EXPECT_DOUBLE_EQ(cov.percent(), 75.0);
    const auto& e = c.sentences[0].gold_entities;
    EXPECT_EQ(e[0].synonyms, (std::vector<TokenSeq>{{"kidney", "failure"}}));
    EXPECT_TRUE(e[3].synonyms.empty());
}

TEST(AttachSynonyms, Idempotent) {
    Corpus c = synthetic::generate();
    auto d = synthetic::dictionary();
    attach_synonyms(c, d);
    Corpus once = c;
    attach_synonyms(c, d);
    for (std::size_t i = 0; i < c.sentences.size(); ++i)
        for (std::size_t k = 0; k < c.sentences[i].gold_entities.size(); ++k)
            EXPECT_EQ(c.sentences[i].gold_entities[k].synonyms, once.sentences[i].gold_entities[k].synonyms);
}

TEST(Vocab, ReservedIdsAndCounts) {
    Corpus c;
    c.sentences.push_back({"d", 0, {"a", "b", "c", "d", "e", "f", "g", "h", "i", "j"}, {}});
    auto v = build_vocab(c, 1);
    EXPECT_EQ(v.size(), 14u);
    EXPECT_EQ(v.token(Vocabulary::kPad), "<pad>");
    EXPECT_EQ(v.token(Vocabulary::kUnk), "<unk>");
    EXPECT_EQ(v.token(Vocabulary::kStart), "<s>");
    EXPECT_EQ(v.token(Vocabulary::kEnd), "</s>");
    EXPECT_EQ(build_vocab(Corpus{}, 1).size(), 4u);
}

TEST(Vocab, MinFreqMapsRareToUnk) {
    Corpus c;
    c.sentences.push_back({"d", 0, {"common", "common", "rare"}, {{0, 0, 0, {{"syn", "common"}}}}});
    auto v = build_vocab(c, 2);
    EXPECT_TRUE(v.contains("common"));
    EXPECT_EQ(v.id("rare"), Vocabulary::kUnk);
    EXPECT_EQ(v.id("syn"), Vocabulary::kUnk);
}

TEST(Synthetic, ToyCorpusShape) {
    Corpus c = synthetic::generate();
    auto cov = attach_synonyms(c, synthetic::dictionary());
    EXPECT_EQ(c.sentences.size(), 50u);
    EXPECT_EQ(c.types.size(), 1u);
    EXPECT_GE(cov.percent(), 50.0);
    const auto v = build_vocab(c, 1);
    EXPECT_GE(v.size(), 80u);
    EXPECT_LE(v.size(), 120u);
    for (const auto& s : c.sentences) {
        for (std::size_t a = 0; a < s.gold_entities.size(); ++a)
            for (std::size_t b = a + 1; b < s.gold_entities.size(); ++b)
                EXPECT_GT(s.gold_entities[b].start, s.gold_entities[a].end + 1);
    }
}
