#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "smmini/corpus.hpp"

namespace smmini {

inline constexpr std::string_view kQuestionCue = "Question: ";
inline constexpr std::string_view kAnswerCue = " Answer: ";

struct PromptedExample {
    std::string prompt_text;  // up to and including "Answer: "
    std::string full_text;    // prompt_text + answer
    std::size_t answer_start = 0;

    friend bool operator==(const PromptedExample&, const PromptedExample&) = default;
};

/// "Question: {context} {question}. Answer: {answer}". The period is only
/// added when the question part does not already end in '.', '?' or '!'.
PromptedExample render_prompt(std::string_view context, std::string_view question, std::string_view answer);
PromptedExample render_prompt(const QARecord& rec);

using TokenId = std::int32_t;

/// Byte-level vocabulary: ids 0-255 are raw bytes, followed by three specials.
struct ByteVocab {
    static constexpr TokenId bos = 256;
    static constexpr TokenId eos = 257;
    static constexpr TokenId pad = 258;
    static constexpr int size = 259;
};

struct TokenSequence {
    std::vector<TokenId> ids;
    int vocab_size = ByteVocab::size;

    std::size_t size() const noexcept { return ids.size(); }
    bool empty() const noexcept { return ids.empty(); }

    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

TokenSequence tokenize(std::string_view text);

/// Bytes are emitted verbatim and special tokens decode to nothing.
/// Throws Error(token) for ids outside [0, vocab_size).
std::string detokenize(std::span<const TokenId> ids);
inline std::string detokenize(const TokenSequence& seq) { return detokenize(seq.ids); }

struct TrainingSequence {
    TokenSequence tokens;
    // loss_mask[t] marks tokens[t] as a prediction target (predicted from t - 1).
    std::vector<std::uint8_t> loss_mask;
    bool truncated = false;

    std::size_t size() const noexcept { return tokens.size(); }
    std::size_t target_count() const noexcept;

    friend bool operator==(const TrainingSequence&, const TrainingSequence&) = default;
};

/// BOS + bytes(full_text) + EOS, right-truncated to max_len. With
/// answer_only_loss the mask covers answer bytes and EOS; otherwise every
/// position but BOS. Throws Error(pack) if max_len < 8 or truncation removes
/// the whole answer.
TrainingSequence pack_example(const PromptedExample& ex, std::size_t max_len, bool answer_only_loss);

}  // namespace smmini
