#include "smmini/evalharness.hpp"

#include <algorithm>
#include <fstream>
#include <future>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "smmini/error.hpp"

namespace smmini {

namespace {

using nlohmann::json;

std::vector<std::string> split_tabs(std::string_view line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        out.emplace_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
        if (tab == std::string_view::npos) {
            return out;
        }
        start = tab + 1;
    }
}

std::int64_t parse_int(const std::string& s, const char* what) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used != s.size()) {
            throw std::invalid_argument(s);
        }
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorKind::report, std::string("bad ") + what + " '" + s + "'");
    }
}

// "57.3" -> 573. Only the one-decimal form produced by format_tenths is accepted.
std::int64_t parse_tenths(const std::string& s) {
    const auto dot = s.find('.');
    if (dot == std::string::npos || dot + 2 != s.size()) {
        throw Error(ErrorKind::report, "bad accuracy '" + s + "'");
    }
    return parse_int(s.substr(0, dot), "accuracy") * 10 + parse_int(s.substr(dot + 1), "accuracy");
}

}  // namespace

Matrix TransformerScorer::next_token_log_probs(std::span<const TokenId> tokens) const {
    return log_softmax(forward(params_, tokens, Mode::eval));
}

void EvalItem::validate() const {
    if (options.size() < 2) {
        throw Error(ErrorKind::eval, "item needs at least two options");
    }
    std::set<std::string_view> seen;
    for (const auto& o : options) {
        if (o.empty()) {
            throw Error(ErrorKind::eval, "empty option text");
        }
        if (!seen.insert(o).second) {
            throw Error(ErrorKind::eval, "duplicate option '" + o + "'");
        }
    }
    if (answer_index < 0 || static_cast<std::size_t>(answer_index) >= options.size()) {
        throw Error(ErrorKind::eval, "answer index " + std::to_string(answer_index) + " out of range");
    }
}

EvalItem parse_eval_item(std::string_view json_line) {
    json obj;
    try {
        obj = json::parse(json_line);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::parse, e.what());
    }
    EvalItem item;
    try {
        item.dataset_tag = obj.at("dataset").get<std::string>();
        if (const auto it = obj.find("context"); it != obj.end() && !it->is_null()) {
            item.context = it->get<std::string>();
        }
        item.stem = obj.at("question").get<std::string>();
        item.options = obj.at("options").get<std::vector<std::string>>();
        item.answer_index = obj.at("answer_idx").get<int>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::schema, e.what());
    }
    item.validate();
    return item;
}

std::vector<EvalItem> load_eval_items(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorKind::eval, "cannot read " + path.string());
    }
    std::vector<EvalItem> items;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.find_first_not_of(" \t") == std::string::npos) {
            continue;
        }
        try {
            items.push_back(parse_eval_item(line));
        } catch (const Error& e) {
            throw Error(e.kind(), path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return items;
}

OptionScore score_option(const ScoringModel& model, const EvalItem& item, std::size_t option_index) {
    if (option_index >= item.options.size()) {
        throw Error(ErrorKind::eval, "option index " + std::to_string(option_index) + " out of range");
    }
    const std::string& option = item.options[option_index];
    const PromptedExample ex = render_prompt(item.context, item.stem, option);
    const std::size_t max_len = model.max_sequence_length();
    const std::size_t prompt_len = ex.answer_start;
    const std::size_t option_len = ex.full_text.size() - prompt_len;
    if (option_len == 0) {
        throw Error(ErrorKind::eval, "empty option");
    }
    if (1 + option_len > max_len) {
        throw Error(ErrorKind::eval, "option of " + std::to_string(option_len) + " tokens cannot fit in " +
                                         std::to_string(max_len));
    }

    const std::size_t total = 1 + ex.full_text.size();
    const std::size_t drop = total > max_len ? total - max_len : 0;
    std::vector<TokenId> tokens;
    tokens.reserve(total - drop);
    tokens.push_back(ByteVocab::bos);
    for (std::size_t i = drop; i < ex.full_text.size(); ++i) {
        tokens.push_back(static_cast<TokenId>(static_cast<unsigned char>(ex.full_text[i])));
    }

    const Matrix lp = model.next_token_log_probs(tokens);
    const std::size_t first = tokens.size() - option_len;
    // Running mean rather than sum / n: options whose tokens all score the same
    // get exactly that score, so equal-likelihood options tie exactly.
    double mean = 0.0;
    double n = 0.0;
    for (std::size_t t = first; t < tokens.size(); ++t) {
        n += 1.0;
        mean += (lp(t - 1, static_cast<std::size_t>(tokens[t])) - mean) / n;
    }
    return OptionScore{mean, drop > 0};
}

std::size_t argmax_first(std::span<const double> scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) {
            best = i;
        }
    }
    return best;
}

Prediction predict(const ScoringModel& model, const EvalItem& item) {
    item.validate();
    Prediction p;
    p.scores.reserve(item.options.size());
    for (std::size_t i = 0; i < item.options.size(); ++i) {
        const OptionScore s = score_option(model, item, i);
        p.scores.push_back(s.score);
        p.truncated = p.truncated || s.truncated;
    }
    p.predicted = argmax_first(p.scores);
    return p;
}

std::int64_t accuracy_tenths(std::int64_t n_correct, std::int64_t n_items) {
    if (n_items <= 0 || n_correct < 0 || n_correct > n_items) {
        throw Error(ErrorKind::eval, "invalid counts " + std::to_string(n_correct) + "/" + std::to_string(n_items));
    }
    // round(1000 c / n) with halves going up; all quantities are non-negative.
    return (2000 * n_correct + n_items) / (2 * n_items);
}

std::string format_tenths(std::int64_t tenths) {
    const bool neg = tenths < 0;
    const std::int64_t a = neg ? -tenths : tenths;
    return (neg ? "-" : "") + std::to_string(a / 10) + "." + std::to_string(a % 10);
}

EvalResult evaluate(const ScoringModel& model, std::span<const EvalItem> items, std::string_view label,
                    unsigned threads) {
    if (items.empty()) {
        throw Error(ErrorKind::eval, "no items to evaluate");
    }
    for (const auto& item : items) {
        if (item.dataset_tag != items.front().dataset_tag) {
            throw Error(ErrorKind::eval, "items mix datasets '" + items.front().dataset_tag + "' and '" +
                                             item.dataset_tag + "'");
        }
    }

    EvalResult result;
    result.predictions.resize(items.size());
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(threads, items.size()));
    if (workers == 1) {
        for (std::size_t i = 0; i < items.size(); ++i) {
            result.predictions[i] = predict(model, items[i]);
        }
    } else {
        std::vector<std::future<void>> futures;
        for (std::size_t w = 0; w < workers; ++w) {
            futures.push_back(std::async(std::launch::async, [&, w] {
                for (std::size_t i = w; i < items.size(); i += workers) {
                    result.predictions[i] = predict(model, items[i]);
                }
            }));
        }
        for (auto& f : futures) {
            f.get();
        }
    }

    EvalReportRow& row = result.row;
    row.model_label = std::string(label);
    row.dataset_tag = items.front().dataset_tag;
    row.n_items = static_cast<std::int64_t>(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (result.predictions[i].predicted == static_cast<std::size_t>(items[i].answer_index)) {
            ++row.n_correct;
        }
        if (result.predictions[i].truncated) {
            ++row.n_truncated;
        }
    }
    row.accuracy_tenths = accuracy_tenths(row.n_correct, row.n_items);
    return result;
}

std::string prediction_jsonl(const EvalItem& item, const Prediction& p, std::size_t index) {
    const json obj = {
        {"index", index},
        {"dataset", item.dataset_tag},
        {"predicted", p.predicted},
        {"answer_idx", item.answer_index},
        {"correct", p.predicted == static_cast<std::size_t>(item.answer_index)},
        {"scores", p.scores},
        {"truncated", p.truncated},
    };
    return obj.dump();
}

ReportCell to_cell(const EvalReportRow& row) {
    return ReportCell{row.model_label, row.dataset_tag, row.accuracy_tenths};
}

RenderedReport render_report(std::span<const ReportCell> cells) {
    if (cells.empty()) {
        throw Error(ErrorKind::report, "no rows to render");
    }
    std::vector<std::string> models;
    std::vector<std::string> datasets;
    std::set<std::pair<std::string, std::string>> seen;
    for (const auto& c : cells) {
        if (!seen.emplace(c.model_label, c.dataset_tag).second) {
            throw Error(ErrorKind::report, "duplicate cell for model '" + c.model_label + "' on '" + c.dataset_tag +
                                               "'");
        }
        if (std::find(models.begin(), models.end(), c.model_label) == models.end()) {
            models.push_back(c.model_label);
        }
        if (std::find(datasets.begin(), datasets.end(), c.dataset_tag) == datasets.end()) {
            datasets.push_back(c.dataset_tag);
        }
    }

    // grid[0] is the header row; column 0 holds dataset names.
    std::vector<std::vector<std::string>> grid;
    grid.emplace_back();
    grid[0].emplace_back("Evaluation Dataset");
    grid[0].insert(grid[0].end(), models.begin(), models.end());
    for (const auto& ds : datasets) {
        std::vector<std::string> line{ds};
        for (const auto& m : models) {
            const auto it = std::find_if(cells.begin(), cells.end(), [&](const ReportCell& c) {
                return c.model_label == m && c.dataset_tag == ds;
            });
            line.push_back(it == cells.end() ? "-" : format_tenths(it->accuracy_tenths));
        }
        grid.push_back(std::move(line));
    }

    std::vector<std::size_t> width(grid[0].size(), 0);
    for (const auto& line : grid) {
        for (std::size_t c = 0; c < line.size(); ++c) {
            width[c] = std::max(width[c], line[c].size());
        }
    }

    RenderedReport out;
    for (const auto& line : grid) {
        std::string text;
        std::string tsv;
        for (std::size_t c = 0; c < line.size(); ++c) {
            const std::string pad(width[c] - line[c].size(), ' ');
            if (c == 0) {
                text += line[c] + pad;
            } else {
                text += "  " + pad + line[c];
                tsv += '\t';
            }
            tsv += line[c];
        }
        out.text += text + '\n';
        out.tsv += tsv + '\n';
    }
    return out;
}

std::string rows_tsv(std::span<const EvalReportRow> rows) {
    std::ostringstream out;
    out << "model\tdataset\tn_items\tn_correct\taccuracy\tn_truncated\n";
    for (const auto& r : rows) {
        out << r.model_label << '\t' << r.dataset_tag << '\t' << r.n_items << '\t' << r.n_correct << '\t'
            << format_tenths(r.accuracy_tenths) << '\t' << r.n_truncated << '\n';
    }
    return out.str();
}

std::vector<EvalReportRow> parse_rows_tsv(std::string_view text) {
    std::vector<EvalReportRow> rows;
    std::istringstream in{std::string(text)};
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        if (header) {
            header = false;
            if (line.rfind("model\t", 0) == 0) {
                continue;
            }
        }
        const auto f = split_tabs(line);
        if (f.size() != 6) {
            throw Error(ErrorKind::report, "expected 6 tab-separated fields, got " + std::to_string(f.size()));
        }
        EvalReportRow r;
        r.model_label = f[0];
        r.dataset_tag = f[1];
        r.n_items = parse_int(f[2], "n_items");
        r.n_correct = parse_int(f[3], "n_correct");
        r.accuracy_tenths = parse_tenths(f[4]);
        r.n_truncated = parse_int(f[5], "n_truncated");
        rows.push_back(std::move(r));
    }
    return rows;
}

std::vector<ReportCell> published_comparison_cells() {
    const std::vector<std::string> models = {"Llama2 70B", "SM70", "CC70", "GPT 3.5", "GPT 4", "Med-Palm"};
    struct Line {
        const char* dataset;
        std::vector<std::int64_t> tenths;  // -1 marks an unreported cell
    };
    const std::vector<Line> lines = {
        {"MEDQA - USMLE", {573, 608, 607, 536, 814, 797}},
        {"PUBMEDQA", {760, 773, 779, 602, 744, 792}},
        {"USMLE", {641, 685, 643, 585, 866, -1}},
    };
    std::vector<ReportCell> cells;
    for (const auto& line : lines) {
        for (std::size_t m = 0; m < models.size(); ++m) {
            if (line.tenths[m] >= 0) {
                cells.push_back({models[m], line.dataset, line.tenths[m]});
            }
        }
    }
    return cells;
}

}  // namespace smmini
