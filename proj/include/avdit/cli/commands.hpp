#pragma once

// train / sample / eval / inspect-attn. Each returns a process exit code:
// 0 ok, 1 I/O or format error, 2 invalid configuration or arguments,
// 3 non-finite values during training.

#include "avdit/cli/checkpoint.hpp"
#include "avdit/evaluation.hpp"

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace avdit::cli {

enum ExitCode : int { kOk = 0, kIoError = 1, kBadConfig = 2, kNumeric = 3 };

struct TrainArgs {
  std::string config;
  std::string resume;  // checkpoint to continue from
  std::optional<std::uint64_t> seed;
};
int cmd_train(const TrainArgs& args, std::ostream& log, std::ostream& err);

struct SampleArgs {
  std::string checkpoint;
  std::optional<std::string> task;
  std::optional<double> omega;
  std::optional<Index> steps;
  std::uint64_t seed = 0;
  std::string out;
};
int cmd_sample(const SampleArgs& args, std::ostream& log, std::ostream& err);

struct EvalArgs {
  std::string checkpoint;
  Index n_samples = 16;
  std::uint64_t seed = 0;
  std::optional<double> omega;
  std::optional<Index> steps;
  std::string out;  // writes report.txt and report.json; empty: stdout only
};
int cmd_eval(const EvalArgs& args, std::ostream& log, std::ostream& err);

struct InspectArgs {
  std::string checkpoint;
  std::uint64_t seed = 0;
  std::optional<std::string> task;
  std::vector<Index> blocks;    // empty: all
  std::vector<Index> at_steps;  // empty: first, middle, last
  std::optional<double> omega;
  std::optional<Index> steps;
  std::string out;
};
int cmd_inspect_attn(const InspectArgs& args, std::ostream& log, std::ostream& err);

/// Head-averaged joint-attention maps from the conditional pass, keyed by
/// (sampler step, block).
using CapturedMaps = std::map<std::pair<Index, Index>, MatrixX<double>>;

CapturedMaps capture_attention(const MMDiT<float>& model, Task task, std::uint64_t seed, const GuidanceSpec& spec,
                               const std::vector<Index>& blocks, const std::vector<Index>& at_steps,
                               const ToyWorldConfig& world, const TemplateBank& bank);

/// Audio-query x video-key and video-query x audio-key blocks of a joint map.
struct CrossMaps {
  MatrixX<double> a2v;
  MatrixX<double> v2a;
};
CrossMaps split_cross(const MatrixX<double>& joint, Index n_video, Index n_audio);

/// Video tokens whose patch overlaps the mouth region.
std::vector<bool> mouth_tokens(const ModelConfig& cfg, const ToyWorldConfig& world);

/// Mean a2v weight on mouth columns over the mean on the other columns.
double mouth_ratio(const MatrixX<double>& a2v, const std::vector<bool>& mouth);

/// Input and noise seeds used by sample (and by sample i of eval).
inline std::uint64_t sample_input_seed(std::uint64_t seed) { return eval_input_seed(seed, 0); }
inline std::uint64_t sample_noise_seed(std::uint64_t seed) { return eval_noise_seed(seed, 0); }

MMDiT<float> model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace avdit::cli
