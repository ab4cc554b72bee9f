#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>

#include "smmini/model.hpp"
#include "smmini/trainer.hpp"

namespace smmini {

inline constexpr std::string_view kCheckpointMagic = "SMMINI01";
inline constexpr std::uint8_t kCheckpointVersion = 1;

/// Everything needed to resume training bit-exactly. All randomness is a
/// function of (rng_seed, step), so those two values are the PRNG state.
struct Checkpoint {
    Parameters params;
    OptimizerState optimizer;
    TrainConfig train_config;
    std::int64_t step = 0;
    std::uint64_t rng_seed = 0;
};

/// Layout: magic, version byte, u64 length + canonical JSON config, u32 tensor
/// count, tensor sections (name, dtype tag, shape, little-endian payload;
/// quantized weights use the 4-bit encoding), then a u64 FNV-1a checksum of
/// all preceding bytes.
void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::string_view bytes);

/// Throws Error(checkpoint) on I/O failure, bad magic/version, truncation or corruption.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// True when both checkpoints serialize to identical bytes.
bool bitwise_equal(const Checkpoint& a, const Checkpoint& b);

}  // namespace smmini
