#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "smmini/model.hpp"
#include "smmini/quant.hpp"
#include "smmini/trainer.hpp"

namespace smmini::cli {

// Stable process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;        // bad config, bad checkpoint, I/O failure
inline constexpr int kExitSchema = 2;        // malformed input lines above the allowed threshold
inline constexpr int kExitNonFinite = 3;     // training produced a non-finite loss or gradient
inline constexpr int kExitEmptyDataset = 4;  // an evaluation dataset has no items

/// Everything a pipeline run needs. Unset keys keep the library defaults,
/// which for the training recipe are the published fine-tuning values.
struct RunConfig {
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "run";
    unsigned threads = 1;

    std::filesystem::path manifest;
    double train_fraction = 0.9;

    ModelConfig model;

    bool quantize = true;
    QuantMode quant_mode = QuantMode::absmax_int4;
    std::size_t block_size = kDefaultBlockSize;

    TrainConfig train;
    std::int64_t checkpoint_every = 0;  // steps; 0 = only at the end

    std::vector<std::filesystem::path> eval_datasets;
    std::string model_label = "smmini";
    std::string eval_weights = "quantized";  // or "merged"
};

/// INI-style `key = value` with [run], [corpus], [model], [quant], [train]
/// and [eval] sections. Relative paths resolve against the config file's
/// directory; SMMINI_SEED overrides [run] seed. Throws Error(config).
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const std::string& text, const std::filesystem::path& base_dir);

/// The fully resolved config in the same format, with every default written out.
std::string render_run_config(const RunConfig& cfg);

/// Module seeds derived from the run seed by labelled hashing.
std::uint64_t model_seed(const RunConfig& cfg);
std::uint64_t split_seed(const RunConfig& cfg);
std::uint64_t train_seed(const RunConfig& cfg);

struct IngestOptions {
    std::filesystem::path manifest;
    std::filesystem::path out;
    std::int64_t max_bad_lines = -1;  // -1: any number, as long as something is kept
    unsigned threads = 1;
};

struct TrainOptions {
    std::filesystem::path config;
    bool resume = false;
    std::optional<unsigned> threads;
};

struct EvalOptions {
    std::optional<std::filesystem::path> checkpoint;
    std::vector<std::filesystem::path> datasets;
    std::filesystem::path out = "eval";
    std::string label = "smmini";
    std::string weights = "quantized";
    bool predictions = false;
    bool fixture = false;
    unsigned threads = 1;
};

struct ReportOptions {
    std::vector<std::filesystem::path> rows;
    std::filesystem::path out = "report";
    bool fixture = false;
};

int cmd_ingest(const IngestOptions& opts, std::ostream& out, std::ostream& err);
int cmd_train(const TrainOptions& opts, std::ostream& out, std::ostream& err);
int cmd_eval(const EvalOptions& opts, std::ostream& out, std::ostream& err);
int cmd_report(const ReportOptions& opts, std::ostream& out, std::ostream& err);

/// Parses argv and dispatches to a subcommand.
int run_cli(int argc, char** argv);

}  // namespace smmini::cli
