// Reference implementations used by both the unit tests and the acceptance
// runner. None of them call into the code paths they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "smmini/evalharness.hpp"
#include "smmini/model.hpp"
#include "smmini/rng.hpp"
#include "smmini/trainer.hpp"

#ifndef SMMINI_TEST_DATA_DIR
#error "SMMINI_TEST_DATA_DIR must point at tests/data"
#endif

namespace smmini::testing {

inline std::filesystem::path data_path(const std::string& name) {
    return std::filesystem::path(SMMINI_TEST_DATA_DIR) / name;
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::vector<std::string> lines_of(const std::filesystem::path& p) {
    std::vector<std::string> out;
    std::ifstream in(p, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
        out.push_back(line);
    }
    return out;
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("smmini_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// Small model whose B factors are non-zero, so every LoRA tensor carries gradient.
inline Parameters toy_model(int d_model, int r, int n_layers, std::uint64_t seed, double dropout = 0.0) {
    ModelConfig cfg;
    cfg.d_model = d_model;
    cfg.n_heads = 4;
    cfg.n_layers = n_layers;
    cfg.d_ff = 2 * d_model;
    cfg.max_sequence_length = 64;
    cfg.lora_r = r;
    cfg.lora_alpha = 2.0 * r;
    cfg.lora_dropout = dropout;
    Parameters p = init_model(cfg, seed);
    Rng rng(seed ^ 0x5eedULL);
    for (Matrix* t : p.trainable_tensors()) {
        for (double& x : t->values()) {
            x = 0.2 * rng.normal();
        }
    }
    return p;
}

struct GradCheck {
    double max_rel_err = 0.0;
    std::size_t checked = 0;
    std::string worst;
};

// Central differences on every element of every LoRA tensor. The relative
// error is |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor
// keeps entries whose true gradient is ~0 from dividing rounding noise by zero.
inline GradCheck finite_difference_check(Parameters params, std::span<const TokenId> tokens,
                                         std::span<const std::uint8_t> mask, std::uint64_t seed, double h,
                                         double floor = 1e-6) {
    const LossAndGradients analytic = backward(params, tokens, mask, seed, Mode::train);
    const auto names = params.trainable_names();
    auto tensors = params.trainable_tensors();
    auto loss_at = [&] { return loss(forward(params, tokens, Mode::train, seed), tokens, mask); };
    GradCheck out;
    for (std::size_t k = 0; k < tensors.size(); ++k) {
        auto vals = tensors[k]->values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + h;
            const double up = loss_at();
            vals[i] = saved - h;
            const double down = loss_at();
            vals[i] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic.grads[k].values()[i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            if (rel > out.max_rel_err) {
                out.max_rel_err = rel;
                out.worst = names[k] + "[" + std::to_string(i) + "]";
            }
            ++out.checked;
        }
    }
    return out;
}

// Every option gets log(1/V) at every position.
class UniformModel final : public ScoringModel {
public:
    explicit UniformModel(int vocab = ByteVocab::size, std::size_t max_len = 1024) : vocab_(vocab), max_len_(max_len) {}
    Matrix next_token_log_probs(std::span<const TokenId> tokens) const override {
        return Matrix(tokens.size(), static_cast<std::size_t>(vocab_), -std::log(static_cast<double>(vocab_)));
    }
    std::size_t max_sequence_length() const override { return max_len_; }

private:
    int vocab_;
    std::size_t max_len_;
};

// A fixed pseudo-random distribution per prefix: row t is the softmax of
// hashed logits keyed on the whole prefix tokens[0..t].
class HashedModel final : public ScoringModel {
public:
    explicit HashedModel(std::uint64_t seed, double temperature = 3.0) : seed_(seed), temperature_(temperature) {}

    Matrix next_token_log_probs(std::span<const TokenId> tokens) const override {
        Matrix out(tokens.size(), ByteVocab::size);
        std::uint64_t prefix = seed_;
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            prefix = mix64(prefix ^ static_cast<std::uint64_t>(tokens[t] + 1));
            double mx = -1e300;
            for (int j = 0; j < ByteVocab::size; ++j) {
                out(t, j) = temperature_ * hash_uniform(prefix, 0, static_cast<std::uint64_t>(j), 0);
                mx = std::max(mx, out(t, j));
            }
            double z = 0.0;
            for (int j = 0; j < ByteVocab::size; ++j) {
                z += std::exp(out(t, j) - mx);
            }
            const double lz = mx + std::log(z);
            for (int j = 0; j < ByteVocab::size; ++j) {
                out(t, j) -= lz;
            }
        }
        return out;
    }
    std::size_t max_sequence_length() const override { return 1024; }

private:
    std::uint64_t seed_;
    double temperature_;
};

// Copier: finds the earlier position whose preceding tokens share the
// longest suffix with the current prefix and predicts the token that followed
// it there. Text that appears in the context is therefore cheap to repeat.
class CopyModel final : public ScoringModel {
public:
    Matrix next_token_log_probs(std::span<const TokenId> tokens) const override {
        const double hit = std::log(0.9);
        const double miss = std::log(0.1 / (ByteVocab::size - 1));
        const double flat = -std::log(static_cast<double>(ByteVocab::size));
        Matrix out(tokens.size(), ByteVocab::size, flat);
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            std::size_t best_len = 0;
            std::size_t best_s = 0;
            for (std::size_t s = 0; s < t; ++s) {
                std::size_t len = 0;
                while (len <= s && tokens[s - len] == tokens[t - len]) ++len;
                if (len >= best_len && len > 0) {
                    best_len = len;
                    best_s = s;
                }
            }
            if (best_len > 0) {
                const TokenId next = tokens[best_s + 1];
                for (int j = 0; j < ByteVocab::size; ++j) {
                    out(t, j) = j == next ? hit : miss;
                }
            }
        }
        return out;
    }
    std::size_t max_sequence_length() const override { return 4096; }
};

// Brute-force option score: one model call per option byte, on exactly the
// prefix that precedes it, with the prompt spelled out by hand.
inline double reference_option_score(const ScoringModel& model, const EvalItem& item, std::size_t option) {
    std::string body = item.context.empty() ? item.stem : item.context + " " + item.stem;
    const char last = body.empty() ? '\0' : body.back();
    if (last != '.' && last != '?' && last != '!') {
        body += '.';
    }
    const std::string prompt = "Question: " + body + " Answer: ";
    std::vector<TokenId> seq{ByteVocab::bos};
    for (unsigned char c : prompt) {
        seq.push_back(c);
    }
    double total = 0.0;
    const std::string& text = item.options[option];
    for (unsigned char c : text) {
        const Matrix lp = model.next_token_log_probs(seq);
        total += lp(seq.size() - 1, c);
        seq.push_back(c);
    }
    return total / static_cast<double>(text.size());
}

struct ReferenceResult {
    std::int64_t n_correct = 0;
    std::string accuracy;  // one decimal, half away from zero
    std::vector<std::size_t> predicted;
};

// Decimal long division of 100 * correct / n to two places, then rounding the
// hundredths digit by hand.
inline std::string reference_accuracy(std::int64_t correct, std::int64_t n) {
    std::int64_t whole = 100 * correct / n;
    std::int64_t rem = 100 * correct % n;
    const std::int64_t tenth = rem * 10 / n;
    rem = rem * 10 % n;
    const std::int64_t hundredth = rem * 10 / n;
    rem = rem * 10 % n;
    std::int64_t tenths = whole * 10 + tenth;
    // Exactly .x5 with no remainder still rounds up (away from zero).
    if (hundredth >= 5) {
        ++tenths;
    }
    return std::to_string(tenths / 10) + "." + std::to_string(tenths % 10);
}

inline ReferenceResult reference_evaluate(const ScoringModel& model, const std::vector<EvalItem>& items) {
    ReferenceResult r;
    for (const auto& item : items) {
        std::size_t best = 0;
        double best_score = reference_option_score(model, item, 0);
        for (std::size_t o = 1; o < item.options.size(); ++o) {
            const double s = reference_option_score(model, item, o);
            if (s > best_score) {
                best = o;
                best_score = s;
            }
        }
        r.predicted.push_back(best);
        r.n_correct += best == static_cast<std::size_t>(item.answer_index) ? 1 : 0;
    }
    r.accuracy = reference_accuracy(r.n_correct, static_cast<std::int64_t>(items.size()));
    return r;
}

// Deterministic synthetic benchmark: short medical-flavoured stems with 2-5 options.
inline std::vector<EvalItem> synthetic_benchmark(std::size_t n, std::uint64_t seed, const std::string& tag = "synth") {
    static const std::vector<std::string> words = {"fever", "cough", "rash",  "insulin", "aspirin", "sepsis",
                                                   "anemia", "asthma", "ulcer", "statin",  "edema",   "gout",
                                                   "yes",    "no",     "maybe", "biopsy",  "x-ray",   "MRI"};
    Rng rng(seed);
    std::vector<EvalItem> items;
    for (std::size_t i = 0; i < n; ++i) {
        EvalItem it;
        it.dataset_tag = tag;
        it.context = rng.below(3) == 0 ? "" : "Patient " + std::to_string(i) + " presents with " + words[rng.below(12)];
        it.stem = "Which option fits case " + std::to_string(i) + (rng.below(2) ? "?" : "");
        const std::size_t k = 2 + rng.below(4);
        while (it.options.size() < k) {
            std::string w = words[rng.below(words.size())];
            if (rng.below(2)) {
                w += " " + words[rng.below(words.size())];
            }
            if (std::find(it.options.begin(), it.options.end(), w) == it.options.end()) {
                it.options.push_back(w);
            }
        }
        it.answer_index = static_cast<int>(rng.below(k));
        items.push_back(std::move(it));
    }
    return items;
}

// The configuration the overfit smoke test runs: the published optimizer
// settings with a desk-sized model, batch 8 and sequences cut to 128 bytes.
struct SmokeSetup {
    ModelConfig model;
    TrainConfig train;
    std::uint64_t init_seed = 7;
};

inline SmokeSetup smoke_setup() {
    SmokeSetup s;
    s.model.d_model = 64;
    s.model.n_heads = 4;
    s.model.n_layers = 2;
    s.model.d_ff = 128;
    s.model.max_sequence_length = 128;
    s.model.lora_r = 16;
    s.model.lora_alpha = 256.0;
    s.train.sequence_length = 128;
    s.train.minibatch_size = 8;
    s.train.epochs = 125;  // 32 examples / 8 = 4 steps per epoch -> 500 steps
    s.train.seed = 1;
    return s;
}

}  // namespace smmini::testing
