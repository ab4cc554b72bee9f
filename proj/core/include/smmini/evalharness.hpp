#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smmini/model.hpp"
#include "smmini/promptkit.hpp"

namespace smmini {

/// Anything that can assign next-token log-probabilities to a token sequence.
class ScoringModel {
public:
    virtual ~ScoringModel() = default;

    /// T x vocab matrix; row t holds log p(next token | tokens[0..t]).
    virtual Matrix next_token_log_probs(std::span<const TokenId> tokens) const = 0;
    virtual std::size_t max_sequence_length() const = 0;
};

/// Eval-mode transformer behind the ScoringModel interface.
class TransformerScorer final : public ScoringModel {
public:
    explicit TransformerScorer(Parameters params) : params_(std::move(params)) {}

    Matrix next_token_log_probs(std::span<const TokenId> tokens) const override;
    std::size_t max_sequence_length() const override {
        return static_cast<std::size_t>(params_.config.max_sequence_length);
    }

    const Parameters& params() const noexcept { return params_; }

private:
    Parameters params_;
};

struct EvalItem {
    std::string dataset_tag;
    std::string context;
    std::string stem;
    std::vector<std::string> options;
    int answer_index = 0;

    /// Throws Error(eval) unless there are >= 2 distinct non-empty options and a valid key.
    void validate() const;
};

/// {"dataset", "context", "question", "options": [...], "answer_idx"}.
EvalItem parse_eval_item(std::string_view json_line);
std::vector<EvalItem> load_eval_items(const std::filesystem::path& path);

struct OptionScore {
    double score = 0.0;      // mean log-probability of the option's tokens
    bool truncated = false;  // leading prompt tokens were dropped to fit
};

/// Renders the item through the prompt template with the option as the answer
/// and averages the log-probabilities of the option bytes. Over-long prompts
/// lose tokens from the start of the prompt (BOS is kept); throws Error(eval)
/// when the option itself cannot fit.
OptionScore score_option(const ScoringModel& model, const EvalItem& item, std::size_t option_index);

struct Prediction {
    std::size_t predicted = 0;
    std::vector<double> scores;
    bool truncated = false;
};

/// Argmax over option scores; ties go to the lowest index.
std::size_t argmax_first(std::span<const double> scores);
Prediction predict(const ScoringModel& model, const EvalItem& item);

struct EvalReportRow {
    std::string model_label;
    std::string dataset_tag;
    std::int64_t n_items = 0;
    std::int64_t n_correct = 0;
    std::int64_t accuracy_tenths = 0;  // accuracy percent x 10
    std::int64_t n_truncated = 0;
};

/// 100 * correct / items in tenths of a percent, rounded half away from zero, exactly.
std::int64_t accuracy_tenths(std::int64_t n_correct, std::int64_t n_items);
std::string format_tenths(std::int64_t tenths);

struct EvalResult {
    EvalReportRow row;
    std::vector<Prediction> predictions;
};

/// Items are scored on up to `threads` workers; the reduction is ordered.
/// Throws Error(eval) for an empty item list or items from several datasets.
EvalResult evaluate(const ScoringModel& model, std::span<const EvalItem> items, std::string_view label,
                    unsigned threads = 1);

/// Per-item prediction log line.
std::string prediction_jsonl(const EvalItem& item, const Prediction& p, std::size_t index);

/// One cell of a report: a model's accuracy on a dataset.
struct ReportCell {
    std::string model_label;
    std::string dataset_tag;
    std::int64_t accuracy_tenths = 0;
};

ReportCell to_cell(const EvalReportRow& row);

struct RenderedReport {
    std::string text;  // aligned plain-text table
    std::string tsv;
};

/// Datasets as rows, models as columns, both in first-appearance order; "-"
/// marks missing cells. Throws Error(report) on an empty input or a duplicate
/// (model, dataset) pair.
RenderedReport render_report(std::span<const ReportCell> cells);

/// Long-form machine-readable rows: model, dataset, n_items, n_correct, accuracy, n_truncated.
std::string rows_tsv(std::span<const EvalReportRow> rows);
std::vector<EvalReportRow> parse_rows_tsv(std::string_view text);

/// The published comparison table, used as a rendering fixture.
std::vector<ReportCell> published_comparison_cells();

}  // namespace smmini
