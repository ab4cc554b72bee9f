#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace smmini {

enum class ErrorKind {
    parse,
    schema,
    ingest,
    config,
    token,
    pack,
    shape,
    length,
    loss,
    quant,
    train,
    checkpoint,
    eval,
    report,
};

std::string_view to_string(ErrorKind kind) noexcept;

// Every failure surfaced by the library is an Error tagged with the stage
// that raised it, so callers (the CLI in particular) can map it to an exit code.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message);

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace smmini
