#include "smmini/error.hpp"

namespace smmini {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::parse: return "parse-error";
        case ErrorKind::schema: return "schema-error";
        case ErrorKind::ingest: return "ingest-error";
        case ErrorKind::config: return "config-error";
        case ErrorKind::token: return "token-error";
        case ErrorKind::pack: return "pack-error";
        case ErrorKind::shape: return "shape-error";
        case ErrorKind::length: return "length-error";
        case ErrorKind::loss: return "loss-error";
        case ErrorKind::quant: return "quant-error";
        case ErrorKind::train: return "train-error";
        case ErrorKind::checkpoint: return "checkpoint-error";
        case ErrorKind::eval: return "eval-error";
        case ErrorKind::report: return "report-error";
    }
    return "error";
}

Error::Error(ErrorKind kind, const std::string& message)
    : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

}  // namespace smmini
