#include "smmini/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <future>
#include <optional>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "smmini/error.hpp"
#include "smmini/rng.hpp"

namespace smmini {

namespace {

using nlohmann::json;

std::string snippet(std::string_view line) {
    constexpr std::size_t kMax = 60;
    if (line.size() <= kMax) {
        return std::string(line);
    }
    return std::string(line.substr(0, kMax)) + "...";
}

std::string optional_string(const json& obj, const char* key, bool required) {
    const auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) {
        if (required) {
            throw Error(ErrorKind::schema, std::string("missing \"") + key + "\"");
        }
        return {};
    }
    if (!it->is_string()) {
        throw Error(ErrorKind::schema, std::string("\"") + key + "\" is not a string");
    }
    auto value = it->get<std::string>();
    if (required && value.empty()) {
        throw Error(ErrorKind::schema, std::string("empty \"") + key + "\"");
    }
    return value;
}

bool is_dropped_control(unsigned char c) {
    return (c < 0x20 && c != '\n' && c != '\t') || c == 0x7f;
}

// Parsed content of one manifest file; records are already normalized.
struct FileParse {
    std::vector<std::optional<QARecord>> lines;  // nullopt marks a malformed line
};

FileParse parse_file(const ManifestEntry& entry) {
    std::ifstream in(entry.path, std::ios::binary);
    if (!in) {
        throw Error(ErrorKind::ingest, "cannot read " + entry.path.string());
    }
    FileParse out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.find_first_not_of(" \t") == std::string::npos) {
            continue;
        }
        try {
            out.lines.emplace_back(normalize(parse_record(line, entry.source_tag)));
        } catch (const Error&) {
            out.lines.emplace_back(std::nullopt);
        }
    }
    if (in.bad()) {
        throw Error(ErrorKind::ingest, "read failure on " + entry.path.string());
    }
    return out;
}

}  // namespace

std::string compute_record_id(std::string_view source_tag, std::string_view context, std::string_view question,
                              std::string_view answer) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::string_view field : {source_tag, context, question, answer}) {
        const std::string len = std::to_string(field.size()) + ":";
        h = fnv1a64(len, h);
        h = fnv1a64(field, h);
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

QARecord parse_record(std::string_view raw_json_line, std::string_view source_tag) {
    json obj;
    try {
        obj = json::parse(raw_json_line);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::parse, std::string(e.what()) + " in: " + snippet(raw_json_line));
    }
    if (!obj.is_object()) {
        throw Error(ErrorKind::schema, "expected a JSON object in: " + snippet(raw_json_line));
    }
    QARecord rec;
    rec.question = optional_string(obj, "instruction", true);
    rec.answer = optional_string(obj, "output", true);
    rec.context = optional_string(obj, "input", false);
    rec.source_tag = std::string(source_tag);
    if (auto src = optional_string(obj, "source", false); !src.empty()) {
        rec.source_tag = std::move(src);
    }
    rec.record_id = compute_record_id(rec.source_tag, rec.context, rec.question, rec.answer);
    return rec;
}

std::string normalize_text(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    bool pending_space = false;
    for (unsigned char c : text) {
        if (is_dropped_control(c)) {
            continue;
        }
        if (c == ' ' || c == '\t') {
            pending_space = true;
            continue;
        }
        if (pending_space && !out.empty()) {
            out.push_back(' ');
        }
        pending_space = false;
        out.push_back(static_cast<char>(c));
    }
    // Leading blanks were never emitted and trailing blanks are still pending;
    // only newlines can remain at either end.
    const auto first = out.find_first_not_of(" \n");
    if (first == std::string::npos) {
        return {};
    }
    const auto last = out.find_last_not_of(" \n");
    return out.substr(first, last - first + 1);
}

QARecord normalize(QARecord rec) {
    rec.source_tag = normalize_text(rec.source_tag);
    rec.context = normalize_text(rec.context);
    rec.question = normalize_text(rec.question);
    rec.answer = normalize_text(rec.answer);
    if (rec.question.empty()) {
        throw Error(ErrorKind::schema, "question is empty after normalization");
    }
    if (rec.answer.empty()) {
        throw Error(ErrorKind::schema, "answer is empty after normalization");
    }
    rec.record_id = compute_record_id(rec.source_tag, rec.context, rec.question, rec.answer);
    return rec;
}

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) {
        throw Error(ErrorKind::ingest, "cannot read manifest " + manifest_path.string());
    }
    std::vector<ManifestEntry> entries;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string::npos) {
            line.erase(hash);
        }
        std::istringstream fields(line);
        std::string tag;
        if (!(fields >> tag)) {
            continue;
        }
        std::string rest;
        std::getline(fields, rest);
        rest = normalize_text(rest);
        if (rest.empty()) {
            throw Error(ErrorKind::config,
                        manifest_path.string() + ":" + std::to_string(line_no) + ": expected <source_tag> <path>");
        }
        std::filesystem::path p(rest);
        if (p.is_relative()) {
            p = manifest_path.parent_path() / p;
        }
        entries.push_back({std::move(p), std::move(tag)});
    }
    return entries;
}

SourceStats& SourceStats::operator+=(const SourceStats& other) {
    read += other.read;
    kept += other.kept;
    dropped_malformed += other.dropped_malformed;
    dropped_duplicate += other.dropped_duplicate;
    return *this;
}

SourceStats IngestStats::total() const {
    SourceStats t;
    for (const auto& [tag, s] : per_source) {
        t += s;
    }
    return t;
}

const SourceStats* IngestStats::find(std::string_view tag) const {
    for (const auto& [t, s] : per_source) {
        if (t == tag) {
            return &s;
        }
    }
    return nullptr;
}

SourceStats& IngestStats::at(std::string_view tag) {
    for (auto& [t, s] : per_source) {
        if (t == tag) {
            return s;
        }
    }
    return per_source.emplace_back(std::string(tag), SourceStats{}).second;
}

std::pair<Corpus, IngestStats> ingest_corpus(std::span<const ManifestEntry> manifest, unsigned threads) {
    std::vector<FileParse> parsed(manifest.size());
    if (threads <= 1 || manifest.size() <= 1) {
        for (std::size_t i = 0; i < manifest.size(); ++i) {
            parsed[i] = parse_file(manifest[i]);
        }
    } else {
        // Files are handed out in fixed strides; results land in their own slots.
        std::vector<std::future<void>> workers;
        const std::size_t n_workers = std::min<std::size_t>(threads, manifest.size());
        for (std::size_t w = 0; w < n_workers; ++w) {
            workers.push_back(std::async(std::launch::async, [&, w] {
                for (std::size_t i = w; i < manifest.size(); i += n_workers) {
                    parsed[i] = parse_file(manifest[i]);
                }
            }));
        }
        for (auto& f : workers) {
            f.get();
        }
    }

    Corpus corpus;
    corpus.manifest.assign(manifest.begin(), manifest.end());
    IngestStats stats;
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < manifest.size(); ++i) {
        stats.at(manifest[i].source_tag);
        for (auto& maybe : parsed[i].lines) {
            if (!maybe) {
                auto& s = stats.at(manifest[i].source_tag);
                ++s.read;
                ++s.dropped_malformed;
                continue;
            }
            // A "source" key may re-tag a record; it is accounted under that tag.
            auto& s = stats.at(maybe->source_tag);
            ++s.read;
            if (!seen.insert(maybe->record_id).second) {
                ++s.dropped_duplicate;
                continue;
            }
            ++s.kept;
            corpus.records.push_back(std::move(*maybe));
        }
    }
    return {std::move(corpus), std::move(stats)};
}

std::pair<Corpus, Corpus> split(const Corpus& corpus, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw Error(ErrorKind::config, "train_fraction must lie in (0, 1), got " + std::to_string(train_fraction));
    }
    if (corpus.empty()) {
        throw Error(ErrorKind::ingest, "cannot split an empty corpus");
    }
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    Rng rng(seed);
    rng.shuffle(order.begin(), order.end());

    const auto n_train = static_cast<std::size_t>(static_cast<double>(corpus.size()) * train_fraction);
    Corpus train;
    Corpus valid;
    train.manifest = corpus.manifest;
    valid.manifest = corpus.manifest;
    for (std::size_t i = 0; i < order.size(); ++i) {
        (i < n_train ? train : valid).records.push_back(corpus.records[order[i]]);
    }
    return {std::move(train), std::move(valid)};
}

void write_corpus_jsonl(const Corpus& corpus, std::ostream& out) {
    for (const auto& rec : corpus.records) {
        json obj = {
            {"instruction", rec.question},
            {"input", rec.context},
            {"output", rec.answer},
            {"source", rec.source_tag},
            {"id", rec.record_id},
        };
        out << obj.dump() << '\n';
    }
}

void write_corpus_jsonl(const Corpus& corpus, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorKind::ingest, "cannot write " + path.string());
    }
    write_corpus_jsonl(corpus, out);
}

}  // namespace smmini
