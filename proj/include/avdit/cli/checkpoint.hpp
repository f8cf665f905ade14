#pragma once

// UTLK container used for checkpoints and tensor dumps.
//
//   bytes 0..3    "UTLK"
//   u32           format version (1)
//   u64           header length in bytes
//   header        UTF-8 JSON
//   payload       little-endian f32 tensors, row-major
//
// Header keys: "kind" ("checkpoint" or "dump"), "config" (run config),
// "tensors" [{name, group, shape, offset, trainable}] with byte offsets
// relative to the payload start, and for checkpoints "optimizer"
// {"step"} and "rng" {"seed", "step"}. Groups are "param", "adam_m" and
// "adam_v"; a dump has only "param".

#include "avdit/cli/config.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace avdit::cli {

inline constexpr char kMagic[4] = {'U', 'T', 'L', 'K'};
inline constexpr std::uint32_t kFormatVersion = 1;

/// Bad magic, version, header or payload bounds.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  RunConfig config;
  ParamStore<float> params;
  std::optional<OptimizerState> optimizer;
  /// Training stream position: the next step reads example_rng(seed, step, i).
  std::uint64_t rng_seed = 0;
  Index rng_step = 0;
};

/// Writes to `path` via a temporary file and rename.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

using NamedTensors = std::vector<std::pair<std::string, Tensor<float>>>;

void save_tensor_dump(const std::string& path, const RunConfig& config, const NamedTensors& tensors);
NamedTensors load_tensor_dump(const std::string& path);

/// Writes `bytes` to `path` via a temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& bytes);

}  // namespace avdit::cli
