#include "smmini/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <numeric>

#include <nlohmann/json.hpp>

#include "smmini/checkpoint.hpp"
#include "smmini/error.hpp"
#include "smmini/rng.hpp"

namespace smmini {

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each index writes
// only its own output slot, so results do not depend on scheduling.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    const std::size_t workers = std::min<std::size_t>(threads, n);
    std::vector<std::future<void>> futures;
    futures.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
        futures.push_back(std::async(std::launch::async, [&, w] {
            for (std::size_t i = w; i < n; i += workers) {
                fn(i);
            }
        }));
    }
    for (auto& f : futures) {
        f.get();
    }
}

}  // namespace

std::string_view to_string(Optimizer) noexcept {
    return "adamw";
}

std::string_view to_string(LrSchedule) noexcept {
    return "constant";
}

Optimizer parse_optimizer(std::string_view text) {
    if (text == "adamw" || text == "ADAMW" || text == "AdamW") {
        return Optimizer::adamw;
    }
    throw Error(ErrorKind::config, "unsupported optimizer '" + std::string(text) + "'");
}

LrSchedule parse_lr_schedule(std::string_view text) {
    if (text == "constant" || text == "Constant") {
        return LrSchedule::constant;
    }
    throw Error(ErrorKind::config, "unsupported lr schedule '" + std::string(text) + "'");
}

void TrainConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorKind::config, what); };
    if (sequence_length < 8) fail("sequence_length must be at least 8");
    if (grad_accumulation_steps < 1) fail("grad_accumulation_steps must be at least 1");
    if (minibatch_size < 1) fail("minibatch_size must be at least 1");
    if (epochs < 1) fail("epochs must be at least 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning_rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2 must lie in [0, 1)");
    if (!(eps > 0.0)) fail("eps must be positive");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) fail("weight_decay must be non-negative");
    if (!(grad_clip >= 0.0)) fail("grad_clip must be non-negative");
    if (max_steps < 0) fail("max_steps must be non-negative");
    if (threads < 1) fail("threads must be at least 1");
}

double TrainConfig::lr_at(std::int64_t) const noexcept {
    return learning_rate;
}

OptimizerState make_optimizer_state(const Parameters& params) {
    OptimizerState s;
    for (const Matrix* t : params.trainable_tensors()) {
        s.m.emplace_back(t->rows(), t->cols());
        s.v.emplace_back(t->rows(), t->cols());
    }
    return s;
}

void adamw_step(std::span<Matrix* const> params, std::span<const Matrix> grads, OptimizerState& state,
                const TrainConfig& cfg, std::span<const std::string> names) {
    if (params.size() != grads.size() || params.size() != state.m.size() || params.size() != state.v.size()) {
        throw Error(ErrorKind::shape, "adamw_step: parameter, gradient and moment counts differ");
    }
    const std::int64_t next = state.step + 1;
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (grads[i].rows() != params[i]->rows() || grads[i].cols() != params[i]->cols() ||
            state.m[i].size() != grads[i].size() || state.v[i].size() != grads[i].size()) {
            throw Error(ErrorKind::shape, "adamw_step: shape mismatch on tensor " + std::to_string(i));
        }
        for (double g : grads[i].values()) {
            if (!std::isfinite(g)) {
                const std::string name = i < names.size() ? names[i] : "#" + std::to_string(i);
                throw Error(ErrorKind::train,
                            "non-finite gradient in " + name + " at step " + std::to_string(next));
            }
        }
    }

    state.step = next;
    const double lr = cfg.lr_at(next);
    const double t = static_cast<double>(next);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < grads.size(); ++i) {
        auto p = params[i]->values();
        auto g = grads[i].values();
        auto m = state.m[i].values();
        auto v = state.v[i].values();
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double m_hat = m[j] / bc1;
            const double v_hat = v[j] / bc2;
            p[j] = p[j] - lr * cfg.weight_decay * p[j] - lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
        }
    }
}

std::vector<TrainingSequence> pack_corpus(const Corpus& corpus, std::size_t max_len, bool answer_only_loss,
                                          std::size_t* skipped) {
    std::vector<TrainingSequence> out;
    out.reserve(corpus.size());
    std::size_t dropped = 0;
    for (const auto& rec : corpus.records) {
        try {
            out.push_back(pack_example(render_prompt(rec), max_len, answer_only_loss));
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::pack) {
                throw;
            }
            ++dropped;
        }
    }
    if (skipped) {
        *skipped = dropped;
    }
    if (out.empty()) {
        throw Error(ErrorKind::train, "no record fits in " + std::to_string(max_len) + " tokens");
    }
    return out;
}

double mean_loss(const Parameters& params, std::span<const TrainingSequence> data, unsigned threads) {
    std::vector<double> sums(data.size());
    std::vector<std::size_t> counts(data.size());
    parallel_for(data.size(), threads, [&](std::size_t i) {
        const auto& seq = data[i];
        counts[i] = 0;
        for (std::size_t t = 1; t < seq.size(); ++t) {
            counts[i] += seq.loss_mask[t] ? 1 : 0;
        }
        if (counts[i] == 0) {
            sums[i] = 0.0;
            return;
        }
        const Matrix logits = forward(params, seq.tokens, Mode::eval);
        sums[i] = loss(logits, seq.tokens.ids, seq.loss_mask) * static_cast<double>(counts[i]);
    });
    double total = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        total += sums[i];
        n += counts[i];
    }
    if (n == 0) {
        throw Error(ErrorKind::loss, "no target positions in evaluation data");
    }
    return total / static_cast<double>(n);
}

std::string to_jsonl(const StepMetrics& m) {
    const nlohmann::json obj = {{"step", m.step}, {"epoch", m.epoch}, {"loss", m.loss}, {"lr", m.lr}};
    return obj.dump();
}

Trainer::Trainer(std::vector<TrainingSequence> data, Parameters params, TrainConfig cfg)
    : data_(std::move(data)), params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    params_.config.validate();
    if (data_.empty()) {
        throw Error(ErrorKind::train, "no training sequences");
    }
    if (cfg_.sequence_length > params_.config.max_sequence_length) {
        throw Error(ErrorKind::config, "sequence_length " + std::to_string(cfg_.sequence_length) +
                                           " exceeds the model's max_sequence_length " +
                                           std::to_string(params_.config.max_sequence_length));
    }
    for (const auto& seq : data_) {
        if (seq.size() > static_cast<std::size_t>(cfg_.sequence_length)) {
            throw Error(ErrorKind::config, "training sequence longer than sequence_length");
        }
    }
    state_ = make_optimizer_state(params_);
    names_ = params_.trainable_names();
}

Trainer::Trainer(std::vector<TrainingSequence> data, Checkpoint checkpoint)
    : Trainer(std::move(data), std::move(checkpoint.params), checkpoint.train_config) {
    if (checkpoint.optimizer.m.size() != state_.m.size() || checkpoint.optimizer.step != checkpoint.step) {
        throw Error(ErrorKind::checkpoint, "optimizer state does not match the trainable set");
    }
    if (checkpoint.rng_seed != cfg_.seed) {
        throw Error(ErrorKind::checkpoint, "checkpoint seed does not match its train config");
    }
    state_ = std::move(checkpoint.optimizer);
}

std::int64_t Trainer::batches_per_epoch() const noexcept {
    const auto n = static_cast<std::int64_t>(data_.size());
    return (n + cfg_.minibatch_size - 1) / cfg_.minibatch_size;
}

std::int64_t Trainer::steps_per_epoch() const noexcept {
    return (batches_per_epoch() + cfg_.grad_accumulation_steps - 1) / cfg_.grad_accumulation_steps;
}

std::int64_t Trainer::total_steps() const noexcept {
    const std::int64_t full = steps_per_epoch() * cfg_.epochs;
    return cfg_.max_steps > 0 ? std::min(full, cfg_.max_steps) : full;
}

std::vector<std::size_t> Trainer::epoch_order(int epoch) const {
    std::vector<std::size_t> order(data_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg_.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());
    return order;
}

StepMetrics Trainer::step() {
    const std::int64_t s = state_.step;  // 0-based index of the step being taken
    const int epoch = static_cast<int>(s / steps_per_epoch());
    const std::int64_t within = s % steps_per_epoch();
    const auto order = epoch_order(epoch);

    const std::int64_t first_batch = within * cfg_.grad_accumulation_steps;
    const std::int64_t last_batch = std::min(first_batch + cfg_.grad_accumulation_steps, batches_per_epoch());
    const auto mb = static_cast<std::size_t>(cfg_.minibatch_size);

    // Flatten the step's examples; batch_of[k] tells which micro-batch example k belongs to.
    std::vector<std::size_t> examples;
    std::vector<std::size_t> batch_of;
    for (std::int64_t b = first_batch; b < last_batch; ++b) {
        const std::size_t begin = static_cast<std::size_t>(b) * mb;
        const std::size_t end = std::min(begin + mb, order.size());
        for (std::size_t i = begin; i < end; ++i) {
            examples.push_back(order[i]);
            batch_of.push_back(static_cast<std::size_t>(b - first_batch));
        }
    }

    const std::uint64_t step_seed = derive_seed(cfg_.seed, "dropout", static_cast<std::uint64_t>(s));
    std::vector<LossAndGradients> results(examples.size());
    parallel_for(examples.size(), cfg_.threads, [&](std::size_t k) {
        results[k] = backward(params_, data_[examples[k]], mix64(step_seed ^ mix64(k)), Mode::train);
    });

    // Token-weighted mean within each micro-batch, plain mean across micro-batches.
    const auto n_micro = static_cast<std::size_t>(last_batch - first_batch);
    std::vector<std::size_t> micro_tokens(n_micro, 0);
    for (std::size_t k = 0; k < results.size(); ++k) {
        micro_tokens[batch_of[k]] += results[k].target_count;
    }
    std::vector<Matrix> grads;
    for (const Matrix* t : params_.trainable_tensors()) {
        grads.emplace_back(t->rows(), t->cols());
    }
    double step_loss = 0.0;
    for (std::size_t k = 0; k < results.size(); ++k) {
        const double w = static_cast<double>(results[k].target_count) /
                         static_cast<double>(micro_tokens[batch_of[k]]) / static_cast<double>(n_micro);
        step_loss += w * results[k].loss;
        for (std::size_t i = 0; i < grads.size(); ++i) {
            add_scaled(grads[i], results[k].grads[i], w);
        }
    }
    if (!std::isfinite(step_loss)) {
        throw Error(ErrorKind::train, "non-finite loss at step " + std::to_string(s + 1));
    }

    if (cfg_.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads) {
            for (double v : g.values()) {
                sq += v * v;
            }
        }
        const double norm = std::sqrt(sq);
        if (norm > cfg_.grad_clip) {
            const double f = cfg_.grad_clip / norm;
            for (auto& g : grads) {
                for (double& v : g.values()) {
                    v *= f;
                }
            }
        }
    }

    auto tensors = params_.trainable_tensors();
    adamw_step(tensors, grads, state_, cfg_, names_);
    return StepMetrics{state_.step, epoch, step_loss, cfg_.lr_at(state_.step)};
}

void Trainer::run(const TrainCallbacks& callbacks, std::int64_t stop_at) {
    while (!done() && (stop_at < 0 || global_step() < stop_at)) {
        const StepMetrics m = step();
        if (callbacks.on_step) {
            callbacks.on_step(m);
        }
        if (callbacks.on_epoch_end && (m.step % steps_per_epoch() == 0 || done())) {
            callbacks.on_epoch_end(m.epoch, params_);
        }
    }
}

Checkpoint Trainer::checkpoint() const {
    return Checkpoint{params_, state_, cfg_, state_.step, cfg_.seed};
}

TrainResult train(const Corpus& corpus, Parameters model, const TrainConfig& cfg, const TrainCallbacks& callbacks) {
    cfg.validate();
    if (corpus.empty()) {
        throw Error(ErrorKind::train, "cannot train on an empty corpus");
    }
    auto data = pack_corpus(corpus, static_cast<std::size_t>(cfg.sequence_length), cfg.answer_only_loss);
    Trainer trainer(std::move(data), std::move(model), cfg);
    TrainResult result;
    TrainCallbacks wrapped = callbacks;
    wrapped.on_step = [&](const StepMetrics& m) {
        result.log.push_back(m);
        if (callbacks.on_step) {
            callbacks.on_step(m);
        }
    };
    trainer.run(wrapped);
    result.params = trainer.params();
    result.optimizer = trainer.optimizer();
    return result;
}

}  // namespace smmini
