#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smmini/corpus.hpp"
#include "smmini/model.hpp"
#include "smmini/promptkit.hpp"

namespace smmini {

enum class Optimizer : std::uint8_t { adamw = 0 };
enum class LrSchedule : std::uint8_t { constant = 0 };

std::string_view to_string(Optimizer opt) noexcept;
std::string_view to_string(LrSchedule schedule) noexcept;
Optimizer parse_optimizer(std::string_view text);
LrSchedule parse_lr_schedule(std::string_view text);

/// Training hyperparameters. The defaults are the fine-tuning recipe this
/// project reproduces; weight decay, clipping and the remaining knobs are off.
struct TrainConfig {
    int sequence_length = 1024;
    int grad_accumulation_steps = 1;
    int minibatch_size = 32;
    int epochs = 5;
    Optimizer optimizer = Optimizer::adamw;
    LrSchedule lr_schedule = LrSchedule::constant;
    double learning_rate = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double grad_clip = 0.0;  // max global L2 norm; 0 disables
    bool answer_only_loss = false;
    std::int64_t max_steps = 0;  // stop early after this many optimizer steps; 0 = no limit
    std::uint64_t seed = 0;
    unsigned threads = 1;

    /// Throws Error(config).
    void validate() const;

    /// Constant schedule: the same rate at every step.
    double lr_at(std::int64_t step) const noexcept;

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct OptimizerState {
    std::vector<Matrix> m;
    std::vector<Matrix> v;
    std::int64_t step = 0;

    friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

/// Zero moments shaped like the trainable set of `params`.
OptimizerState make_optimizer_state(const Parameters& params);

/// One decoupled-weight-decay Adam update. The step counter is incremented
/// before bias correction. Throws Error(train) naming the tensor and step if a
/// gradient is non-finite, Error(shape) on mismatched shapes.
void adamw_step(std::span<Matrix* const> params, std::span<const Matrix> grads, OptimizerState& state,
                const TrainConfig& cfg, std::span<const std::string> names = {});

/// Renders and packs every record. Records whose answer does not survive
/// truncation are skipped and counted in `skipped`; if nothing survives,
/// throws Error(train).
std::vector<TrainingSequence> pack_corpus(const Corpus& corpus, std::size_t max_len, bool answer_only_loss,
                                          std::size_t* skipped = nullptr);

/// Token-weighted mean loss over the sequences, eval mode.
double mean_loss(const Parameters& params, std::span<const TrainingSequence> data, unsigned threads = 1);

struct StepMetrics {
    std::int64_t step = 0;  // 1-based optimizer step
    int epoch = 0;          // 0-based
    double loss = 0.0;
    double lr = 0.0;

    friend bool operator==(const StepMetrics&, const StepMetrics&) = default;
};

/// One JSON object per line: {"epoch","loss","lr","step"}.
std::string to_jsonl(const StepMetrics& m);

struct Checkpoint;

struct TrainCallbacks {
    std::function<void(const StepMetrics&)> on_step;
    std::function<void(int epoch, const Parameters&)> on_epoch_end;
};

/// Deterministic training loop over pre-packed sequences. Every piece of
/// randomness (epoch shuffles, adapter dropout) is derived from the seed and
/// the step index, so a checkpoint only needs the step counter to resume.
class Trainer {
public:
    Trainer(std::vector<TrainingSequence> data, Parameters params, TrainConfig cfg);
    Trainer(std::vector<TrainingSequence> data, Checkpoint checkpoint);

    std::int64_t batches_per_epoch() const noexcept;
    std::int64_t steps_per_epoch() const noexcept;
    /// epochs * steps_per_epoch, capped by max_steps when set.
    std::int64_t total_steps() const noexcept;
    std::int64_t global_step() const noexcept { return state_.step; }
    bool done() const noexcept { return global_step() >= total_steps(); }

    /// Runs one optimizer step. Throws Error(train) on a non-finite loss.
    StepMetrics step();

    /// Steps until done() or until global_step() reaches `stop_at` (if >= 0).
    void run(const TrainCallbacks& callbacks = {}, std::int64_t stop_at = -1);

    const Parameters& params() const noexcept { return params_; }
    const OptimizerState& optimizer() const noexcept { return state_; }
    const TrainConfig& config() const noexcept { return cfg_; }

    Checkpoint checkpoint() const;

private:
    std::vector<std::size_t> epoch_order(int epoch) const;

    std::vector<TrainingSequence> data_;
    Parameters params_;
    TrainConfig cfg_;
    OptimizerState state_;
    std::vector<std::string> names_;
};

struct TrainResult {
    Parameters params;
    OptimizerState optimizer;
    std::vector<StepMetrics> log;
};

/// Packs the corpus at cfg.sequence_length and runs the full schedule.
TrainResult train(const Corpus& corpus, Parameters model, const TrainConfig& cfg,
                  const TrainCallbacks& callbacks = {});

}  // namespace smmini
