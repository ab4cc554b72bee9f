#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace smmini {

/// One normalized (context, question, answer) triple.
struct QARecord {
    std::string source_tag;
    std::string context;
    std::string question;
    std::string answer;
    std::string record_id;

    friend bool operator==(const QARecord&, const QARecord&) = default;
};

/// Stable 16-hex-digit content hash of (source_tag, context, question, answer).
std::string compute_record_id(std::string_view source_tag, std::string_view context, std::string_view question,
                              std::string_view answer);

/// Maps one JSONL line in the {"instruction", "input", "output"} schema onto a
/// record. A "source" key, when present, overrides `source_tag` so that an
/// exported corpus re-ingests with its original provenance.
/// Throws Error(parse) on malformed JSON and Error(schema) on missing fields.
QARecord parse_record(std::string_view raw_json_line, std::string_view source_tag);

/// Collapses space/tab runs, strips non-newline control characters, trims,
/// and recomputes the record id. Throws Error(schema) if question or answer
/// ends up empty.
QARecord normalize(QARecord rec);

/// Text-level normalization used by `normalize`.
std::string normalize_text(std::string_view text);

struct ManifestEntry {
    std::filesystem::path path;
    std::string source_tag;

    friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

/// Reads a manifest: one `<source_tag> <path>` pair per line, `#` comments and
/// blank lines ignored. Relative paths resolve against the manifest's directory.
std::vector<ManifestEntry> load_manifest(const std::filesystem::path& manifest_path);

struct SourceStats {
    std::int64_t read = 0;
    std::int64_t kept = 0;
    std::int64_t dropped_malformed = 0;
    std::int64_t dropped_duplicate = 0;

    SourceStats& operator+=(const SourceStats& other);
    bool balanced() const noexcept { return read == kept + dropped_malformed + dropped_duplicate; }

    friend bool operator==(const SourceStats&, const SourceStats&) = default;
};

struct IngestStats {
    // Keyed by source tag, in first-appearance (manifest) order.
    std::vector<std::pair<std::string, SourceStats>> per_source;

    SourceStats total() const;
    const SourceStats* find(std::string_view tag) const;
    SourceStats& at(std::string_view tag);
};

struct Corpus {
    std::vector<QARecord> records;
    std::vector<ManifestEntry> manifest;

    std::size_t size() const noexcept { return records.size(); }
    bool empty() const noexcept { return records.empty(); }
};

/// Parses, normalizes and deduplicates (first occurrence wins) every manifest
/// file. Files may be parsed on up to `threads` workers; the merge is a single
/// ordered pass, so the result does not depend on the thread count.
/// Throws Error(ingest) naming the path if a file cannot be read.
std::pair<Corpus, IngestStats> ingest_corpus(std::span<const ManifestEntry> manifest, unsigned threads = 1);

/// Seeded shuffle, then the first floor(n * train_fraction) records go to train.
/// Throws Error(config) unless 0 < train_fraction < 1, Error(ingest) on an empty corpus.
std::pair<Corpus, Corpus> split(const Corpus& corpus, double train_fraction, std::uint64_t seed);

/// Writes the corpus in the input schema plus "source" and "id" keys.
void write_corpus_jsonl(const Corpus& corpus, std::ostream& out);
void write_corpus_jsonl(const Corpus& corpus, const std::filesystem::path& path);

}  // namespace smmini
