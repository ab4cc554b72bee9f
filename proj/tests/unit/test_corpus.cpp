#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "oracles.hpp"
#include "smmini/corpus.hpp"
#include "smmini/error.hpp"

namespace smmini {
namespace {

using testing::scratch_dir;

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no Error thrown";
    return ErrorKind::config;
}

void write_lines(const std::filesystem::path& p, const std::vector<std::string>& lines) {
    std::ofstream out(p, std::ios::binary);
    for (const auto& l : lines) {
        out << l << '\n';
    }
}

TEST(ParseRecord, MapsUnifiedSchema) {
    const auto r = parse_record(R"({"instruction":"What causes fever?","input":"","output":"Infection."})", "medqa");
    EXPECT_EQ(r.source_tag, "medqa");
    EXPECT_EQ(r.context, "");
    EXPECT_EQ(r.question, "What causes fever?");
    EXPECT_EQ(r.answer, "Infection.");
    EXPECT_EQ(r.record_id, compute_record_id("medqa", "", "What causes fever?", "Infection."));
}

TEST(ParseRecord, KeepsContext) {
    const auto r = parse_record(
        R"({"instruction":"Summarize.","input":"Aspirin inhibits COX.","output":"Aspirin blocks COX enzymes."})", "m");
    EXPECT_EQ(r.context, "Aspirin inhibits COX.");
}

TEST(ParseRecord, MissingInputIsEmptyContext) {
    EXPECT_EQ(parse_record(R"({"instruction":"Q","output":"A"})", "m").context, "");
    EXPECT_EQ(parse_record(R"({"instruction":"Q","input":null,"output":"A"})", "m").context, "");
}

TEST(ParseRecord, Errors) {
    EXPECT_EQ(kind_of([] { parse_record(R"({"instruction":"Q only"})", "m"); }), ErrorKind::schema);
    EXPECT_EQ(kind_of([] { parse_record(R"({"instruction":"","output":"A"})", "m"); }), ErrorKind::schema);
    EXPECT_EQ(kind_of([] { parse_record(R"({"instruction":"Q","output":)", "m"); }), ErrorKind::parse);
    EXPECT_EQ(kind_of([] { parse_record(R"([1,2])", "m"); }), ErrorKind::schema);
}

TEST(Normalize, Whitespace) {
    QARecord r{"m", "", "  What\t is  BP? ", "x", ""};
    EXPECT_EQ(normalize(r).question, "What is BP?");
}

TEST(Normalize, ControlCharacters) {
    QARecord r{"m", "", "q", "A\x07" "B", ""};
    EXPECT_EQ(normalize(r).answer, "AB");
    EXPECT_EQ(normalize_text("line1\nline2"), "line1\nline2");
}

TEST(Normalize, EmptyAfterTrimIsSchemaError) {
    QARecord r{"m", "", "q", "   ", ""};
    EXPECT_EQ(kind_of([&] { normalize(r); }), ErrorKind::schema);
}

TEST(Normalize, RecomputesId) {
    QARecord r{"m", " c ", " q ", " a ", "stale"};
    const auto n = normalize(r);
    EXPECT_EQ(n.record_id, compute_record_id("m", "c", "q", "a"));
}

TEST(RecordId, DependsOnEveryField) {
    const auto base = compute_record_id("s", "c", "q", "a");
    EXPECT_EQ(base.size(), 16u);
    EXPECT_NE(base, compute_record_id("t", "c", "q", "a"));
    EXPECT_NE(base, compute_record_id("s", "", "q", "a"));
    EXPECT_NE(base, compute_record_id("s", "c", "qa", ""));
    EXPECT_NE(compute_record_id("s", "ab", "c", "d"), compute_record_id("s", "a", "bc", "d"));
}

TEST(Ingest, DeduplicatesKeepingFirst) {
    const auto dir = scratch_dir("ingest_dedup");
    write_lines(dir / "a.jsonl", {R"({"instruction":"Q1","output":"A1"})", R"({"instruction":"Q1","output":"A1"})",
                                  R"({"instruction":"Q2","output":"A2"})"});
    const std::vector<ManifestEntry> m{{dir / "a.jsonl", "a"}};
    const auto [corpus, stats] = ingest_corpus(m);
    ASSERT_EQ(corpus.size(), 2u);
    EXPECT_EQ(corpus.records[0].question, "Q1");
    EXPECT_EQ(stats.find("a")->dropped_duplicate, 1);
    EXPECT_TRUE(stats.find("a")->balanced());
}

TEST(Ingest, ManifestThenLineOrder) {
    const auto dir = scratch_dir("ingest_order");
    write_lines(dir / "a.jsonl", {R"({"instruction":"A1","output":"x"})", R"({"instruction":"A2","output":"x"})"});
    write_lines(dir / "b.jsonl", {R"({"instruction":"B1","output":"x"})", R"({"instruction":"B2","output":"x"})"});
    const std::vector<ManifestEntry> m{{dir / "b.jsonl", "b"}, {dir / "a.jsonl", "a"}};
    for (unsigned threads : {1u, 2u, 4u}) {
        const auto [corpus, stats] = ingest_corpus(m, threads);
        ASSERT_EQ(corpus.size(), 4u);
        EXPECT_EQ(corpus.records[0].question, "B1");
        EXPECT_EQ(corpus.records[1].question, "B2");
        EXPECT_EQ(corpus.records[2].question, "A1");
        EXPECT_EQ(corpus.records[3].question, "A2");
    }
}

TEST(Ingest, MalformedLinesAreCounted) {
    const auto dir = scratch_dir("ingest_bad");
    write_lines(dir / "a.jsonl", {R"({"instruction":"Q","output":"A"})", R"({"instruction":)"});
    const std::vector<ManifestEntry> m{{dir / "a.jsonl", "a"}};
    const auto [corpus, stats] = ingest_corpus(m);
    EXPECT_EQ(corpus.size(), 1u);
    EXPECT_EQ(stats.find("a")->kept, 1);
    EXPECT_EQ(stats.find("a")->dropped_malformed, 1);
    EXPECT_TRUE(stats.total().balanced());
}

TEST(Ingest, UnreadableFileIsIngestError) {
    const std::vector<ManifestEntry> m{{"/nonexistent/file.jsonl", "x"}};
    EXPECT_EQ(kind_of([&] { ingest_corpus(m); }), ErrorKind::ingest);
}

TEST(Ingest, RoundTripThroughExport) {
    const std::vector<ManifestEntry> m{{testing::data_path("micro_corpus.jsonl"), "micro"},
                                       {testing::data_path("prompt_fixtures.jsonl"), "fixtures"}};
    const auto [corpus, stats] = ingest_corpus(m);
    const auto dir = scratch_dir("ingest_roundtrip");
    write_corpus_jsonl(corpus, dir / "out.jsonl");
    const std::vector<ManifestEntry> again{{dir / "out.jsonl", "ignored"}};
    const auto [back, stats2] = ingest_corpus(again);
    EXPECT_EQ(back.records, corpus.records);
}

TEST(Ingest, SelfConcatenationIsIdempotent) {
    const auto src = testing::data_path("micro_corpus.jsonl");
    const std::vector<ManifestEntry> once{{src, "m"}};
    const std::vector<ManifestEntry> twice{{src, "m"}, {src, "m"}};
    const auto [a, sa] = ingest_corpus(once);
    const auto [b, sb] = ingest_corpus(twice);
    EXPECT_EQ(a.records, b.records);
    EXPECT_EQ(sb.total().dropped_duplicate, static_cast<std::int64_t>(a.size()));
}

TEST(Manifest, ResolvesRelativePaths) {
    const auto dir = scratch_dir("manifest");
    write_lines(dir / "m.txt", {"# comment", "", "medqa data/x.jsonl", "pubmed /abs/y.jsonl"});
    const auto m = load_manifest(dir / "m.txt");
    ASSERT_EQ(m.size(), 2u);
    EXPECT_EQ(m[0].source_tag, "medqa");
    EXPECT_EQ(m[0].path, dir / "data/x.jsonl");
    EXPECT_EQ(m[1].path, std::filesystem::path("/abs/y.jsonl"));
}

Corpus numbered(std::size_t n) {
    Corpus c;
    for (std::size_t i = 0; i < n; ++i) {
        const auto q = "q" + std::to_string(i);
        c.records.push_back({"s", "", q, "a", compute_record_id("s", "", q, "a")});
    }
    return c;
}

TEST(Split, FloorSizes) {
    auto [tr, va] = split(numbered(10), 0.8, 1);
    EXPECT_EQ(tr.size(), 8u);
    EXPECT_EQ(va.size(), 2u);
    auto [tr1, va1] = split(numbered(1), 0.5, 1);
    EXPECT_EQ(tr1.size(), 0u);
    EXPECT_EQ(va1.size(), 1u);
}

TEST(Split, Errors) {
    EXPECT_EQ(kind_of([] { split(numbered(4), 0.0, 1); }), ErrorKind::config);
    EXPECT_EQ(kind_of([] { split(numbered(4), 1.0, 1); }), ErrorKind::config);
}

TEST(Split, DeterministicPartitionProperty) {
    Rng rng(99);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.below(60);
        const double f = 0.01 + 0.98 * rng.uniform();
        const std::uint64_t seed = rng.next_u64();
        const Corpus c = numbered(n);
        const auto [tr, va] = split(c, f, seed);
        const auto [tr2, va2] = split(c, f, seed);
        ASSERT_EQ(tr.records, tr2.records);
        ASSERT_EQ(va.records, va2.records);
        ASSERT_EQ(tr.size(), static_cast<std::size_t>(std::floor(static_cast<double>(n) * f)));
        std::multiset<std::string> all;
        for (const auto& r : tr.records) all.insert(r.record_id);
        for (const auto& r : va.records) all.insert(r.record_id);
        std::multiset<std::string> expect;
        for (const auto& r : c.records) expect.insert(r.record_id);
        ASSERT_EQ(all, expect);
    }
}

}  // namespace
}  // namespace smmini
