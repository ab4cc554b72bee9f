#include "smmini/promptkit.hpp"

#include <algorithm>

#include "smmini/error.hpp"

namespace smmini {

PromptedExample render_prompt(std::string_view context, std::string_view question, std::string_view answer) {
    std::string body;
    if (!context.empty()) {
        body.append(context).append(" ");
    }
    body.append(question);
    if (body.empty() || (body.back() != '.' && body.back() != '?' && body.back() != '!')) {
        body.push_back('.');
    }

    PromptedExample ex;
    ex.prompt_text.reserve(kQuestionCue.size() + body.size() + kAnswerCue.size());
    ex.prompt_text.append(kQuestionCue).append(body).append(kAnswerCue);
    ex.answer_start = ex.prompt_text.size();
    ex.full_text = ex.prompt_text;
    ex.full_text.append(answer);
    return ex;
}

PromptedExample render_prompt(const QARecord& rec) {
    return render_prompt(rec.context, rec.question, rec.answer);
}

TokenSequence tokenize(std::string_view text) {
    TokenSequence seq;
    seq.ids.reserve(text.size());
    for (unsigned char c : text) {
        seq.ids.push_back(static_cast<TokenId>(c));
    }
    return seq;
}

std::string detokenize(std::span<const TokenId> ids) {
    std::string out;
    out.reserve(ids.size());
    for (TokenId id : ids) {
        if (id < 0 || id >= ByteVocab::size) {
            throw Error(ErrorKind::token, "token id " + std::to_string(id) + " outside vocabulary of " +
                                              std::to_string(ByteVocab::size));
        }
        if (id < 256) {
            out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
        }
    }
    return out;
}

std::size_t TrainingSequence::target_count() const noexcept {
    return static_cast<std::size_t>(std::count(loss_mask.begin(), loss_mask.end(), std::uint8_t{1}));
}

TrainingSequence pack_example(const PromptedExample& ex, std::size_t max_len, bool answer_only_loss) {
    if (max_len < 8) {
        throw Error(ErrorKind::pack, "max_len must be at least 8, got " + std::to_string(max_len));
    }
    const std::size_t n_text = ex.full_text.size();
    // Token positions: 0 = BOS, 1..n_text = bytes, n_text + 1 = EOS.
    const std::size_t answer_first = 1 + ex.answer_start;
    const std::size_t full_len = n_text + 2;
    const std::size_t len = std::min(full_len, max_len);

    if (ex.answer_start >= n_text || answer_first >= len) {
        throw Error(ErrorKind::pack, "truncation to " + std::to_string(max_len) + " tokens removes the whole answer");
    }

    TrainingSequence seq;
    seq.truncated = len < full_len;
    seq.tokens.ids.reserve(len);
    seq.tokens.ids.push_back(ByteVocab::bos);
    for (std::size_t i = 0; i < n_text && seq.tokens.ids.size() < len; ++i) {
        seq.tokens.ids.push_back(static_cast<TokenId>(static_cast<unsigned char>(ex.full_text[i])));
    }
    if (seq.tokens.ids.size() < len) {
        seq.tokens.ids.push_back(ByteVocab::eos);
    }

    seq.loss_mask.assign(len, 0);
    for (std::size_t t = answer_only_loss ? answer_first : 1; t < len; ++t) {
        seq.loss_mask[t] = 1;
    }
    return seq;
}

}  // namespace smmini
