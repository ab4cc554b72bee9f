#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smmini/promptkit.hpp"
#include "smmini/quant.hpp"
#include "smmini/tensor.hpp"

namespace smmini {

/// Which linear layers carry a LoRA adapter.
enum class LoraTarget : std::uint8_t {
    all_linear = 0,     // attention + MLP projections and the output head
    attention_mlp = 1,  // attention + MLP projections only
};

std::string_view to_string(LoraTarget target) noexcept;
LoraTarget parse_lora_target(std::string_view text);

struct ModelConfig {
    int vocab_size = ByteVocab::size;
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;
    int d_ff = 128;
    int max_sequence_length = 1024;
    int lora_r = 64;
    double lora_alpha = 16.0;
    double lora_dropout = 0.1;
    LoraTarget lora_target = LoraTarget::all_linear;
    double init_std = 0.02;

    /// Throws Error(config) on any invariant violation.
    void validate() const;
    double lora_scale() const noexcept { return lora_alpha / static_cast<double>(lora_r); }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Rank-r update (alpha / r) * B * A for a d_out x d_in weight.
struct LoraAdapter {
    Matrix a;  // r x d_in
    Matrix b;  // d_out x r
    double alpha = 16.0;
    int rank = 64;
    double dropout = 0.0;

    double scale() const noexcept { return alpha / static_cast<double>(rank); }

    friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

/// (alpha / r) * B * A. Throws Error(shape) if A and B disagree on the rank.
Matrix lora_delta(const LoraAdapter& adapter);

/// A frozen linear map (no bias) with an optional trainable adapter. When the
/// base weight is stored quantized, `weight` holds its dequantized form.
struct Linear {
    Matrix weight;  // d_out x d_in
    std::optional<QuantizedTensor> packed;
    std::optional<LoraAdapter> adapter;

    std::size_t in_features() const noexcept { return weight.cols(); }
    std::size_t out_features() const noexcept { return weight.rows(); }

    friend bool operator==(const Linear&, const Linear&) = default;
};

struct DecoderLayer {
    std::vector<double> attn_norm;
    Linear wq;
    Linear wk;
    Linear wv;
    Linear wo;
    std::vector<double> mlp_norm;
    Linear w_gate;
    Linear w_up;
    Linear w_down;

    friend bool operator==(const DecoderLayer&, const DecoderLayer&) = default;
};

struct Parameters {
    ModelConfig config;
    Matrix token_embedding;     // vocab x d_model
    Matrix position_embedding;  // max_sequence_length x d_model
    std::vector<DecoderLayer> layers;
    std::vector<double> final_norm;
    Linear head;  // vocab x d_model

    /// Every linear layer, per decoder layer in the order q, k, v, o, gate,
    /// up, down, followed by the output head.
    std::vector<Linear*> linears();
    std::vector<const Linear*> linears() const;
    std::vector<std::string> linear_names() const;

    /// The LoRA tensors (A then B for each adapted linear, in linear order).
    /// These are exactly the trainable parameters.
    std::vector<Matrix*> trainable_tensors();
    std::vector<const Matrix*> trainable_tensors() const;
    std::vector<std::string> trainable_names() const;

    /// Every frozen tensor, for freeze checks. Norm vectors appear as 1 x d matrices.
    std::vector<std::pair<std::string, Matrix>> frozen_snapshot() const;

    friend bool operator==(const Parameters&, const Parameters&) = default;
};

/// Seeded N(0, init_std) base weights, unit norm gains, A ~ N(0, init_std), B = 0.
/// Throws Error(config) for an invalid config.
Parameters init_model(const ModelConfig& config, std::uint64_t seed);

/// Stores every frozen linear weight in 4-bit form; forward passes then see
/// the dequantized values. Adapters are left untouched.
void quantize_base(Parameters& params, std::size_t block_size, QuantMode mode);

/// Folds every adapter into its base weight and drops the adapters. The result
/// keeps dense weights only.
Parameters merge_adapters(const Parameters& params);

/// Drops adapters without merging; the base model on its own.
Parameters strip_adapters(const Parameters& params);

enum class Mode : std::uint8_t { train, eval };

/// Logits (T x vocab) for a token sequence. Adapter-input dropout is active
/// only in train mode and is a pure function of (seed, layer, position, feature).
/// Throws Error(length) if the sequence exceeds max_sequence_length.
Matrix forward(const Parameters& params, std::span<const TokenId> tokens, Mode mode = Mode::eval,
               std::uint64_t seed = 0);
inline Matrix forward(const Parameters& params, const TokenSequence& tokens, Mode mode = Mode::eval,
                      std::uint64_t seed = 0) {
    return forward(params, tokens.ids, mode, seed);
}

/// Row-wise log-softmax.
Matrix log_softmax(const Matrix& logits);

/// Mean next-token NLL over positions t with loss_mask[t] set, where
/// tokens[t] is predicted from logits row t - 1. Throws Error(loss) when no
/// position is selected and Error(shape) on inconsistent lengths.
double loss(const Matrix& logits, std::span<const TokenId> tokens, std::span<const std::uint8_t> loss_mask);

struct LossAndGradients {
    double loss = 0.0;
    std::size_t target_count = 0;
    std::vector<Matrix> grads;  // aligned with Parameters::trainable_tensors()
};

/// Exact gradients of `loss` with respect to every LoRA tensor. Frozen tensors
/// get no gradient storage at all.
LossAndGradients backward(const Parameters& params, std::span<const TokenId> tokens,
                          std::span<const std::uint8_t> loss_mask, std::uint64_t seed, Mode mode = Mode::train);
inline LossAndGradients backward(const Parameters& params, const TrainingSequence& seq, std::uint64_t seed,
                                 Mode mode = Mode::train) {
    return backward(params, seq.tokens.ids, seq.loss_mask, seed, mode);
}

}  // namespace smmini
