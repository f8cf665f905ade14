#pragma once

// Two-stage training. Stage 1 trains the audio stream alone on TTS with
// everything else frozen; stage 2 trains all parameters, rotating through
// the joint tasks one step at a time.

#include "avdit/flowmatch.hpp"
#include "avdit/toyworld.hpp"

#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace avdit {

struct OptimizerHyper {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// Global-norm clip threshold; 0 disables clipping.
  double clip_norm = 1.0;

  void validate() const;
  /// Desk-scale profile used by the bundled configs.
  static OptimizerHyper toy();
};

struct Moments {
  Tensor<float> m;
  Tensor<float> v;
};

struct OptimizerState {
  Index step = 0;
  std::map<std::string, Moments> moments;  // trainable parameters only
};

struct AdamReport {
  double grad_norm = 0.0;  // before clipping
  double clip_scale = 1.0;
};

/// One AdamW update from the gradients stored on `params` (a trainable
/// entry without a gradient counts as zero). Frozen entries are not
/// touched. Throws NumericError, leaving everything unchanged, if any
/// gradient is non-finite.
AdamReport adamw_step(ParamStore<float>& params, OptimizerState& state, const OptimizerHyper& hyper);

/// Names trainable in `stage`: stage 1 keeps only the audio stream
/// ("audio." prefix), stage 2 trains everything.
std::set<std::string> freeze_plan(int stage, const ParamStore<float>& params);

inline Task task_scheduler(Index step, const std::vector<Task>& cycle) {
  if (cycle.empty()) throw std::invalid_argument("task_scheduler: empty cycle");
  return cycle[static_cast<std::size_t>(step % static_cast<Index>(cycle.size()))];
}

std::vector<Task> default_task_cycle(int stage);

struct TrainConfig {
  int stage = 1;
  Index steps = 2000;
  Index batch_size = 16;
  OptimizerHyper hyper = OptimizerHyper::toy();
  double cfg_dropout = 0.1;
  /// Probability that a TTS example carries the reference-audio condition.
  double tts_ref_prob = 0.5;
  std::vector<Task> task_cycle = default_task_cycle(1);
  std::uint64_t seed = 0;
  std::string metrics_path;
  std::string checkpoint_path;
  /// Weights to start from (e.g. the stage-1 result); optimizer state is not carried over.
  std::string init_checkpoint;
  Index checkpoint_every = 0;
  bool record_wall_time = false;

  void validate() const;
};

/// Model inputs, targets and loss masks for one training example, in token
/// space.
struct TrainingExample {
  Task task = Task::T2AV;
  double t = 0.0;
  ConditionSet<float> cond;
  MatrixX<float> video_in;  // x_t tokens, or clean tokens for TV2A; empty for TTS
  MatrixX<float> audio_in;
  MatrixX<float> video_target;  // empty when the task has no video loss
  MatrixX<float> audio_target;
  MatrixX<float> video_keep;  // empty: all elements count
};

/// Deterministic per-example stream derived from (seed, step, index).
Rng example_rng(std::uint64_t seed, Index step, Index index);

/// Draw order: TTS reference coin, condition dropout, t, video prior, audio prior.
TrainingExample build_example(const PairedSample& sample, Task task, const ModelConfig& cfg,
                              const TrainConfig& train, Rng& rng);

/// Token-space loss for a prediction (e.g. an oracle), reported per task.
LossBreakdown example_loss(const TrainingExample& ex, const MatrixX<float>& video_pred,
                           const MatrixX<float>& audio_pred);

/// Differentiable loss pieces for one example.
struct LossVars {
  Var<float> total;
  Var<float> loss_a;
  std::optional<Var<float>> loss_v;
};
LossVars example_loss(const MMDiT<float>& model, ParamBinding<float>& bind, const TrainingExample& ex);

/// Thrown when a step hits a non-finite value.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(Index step, Task task, const std::string& what);
  Index step() const { return step_; }
  Task task() const { return task_; }

 private:
  Index step_;
  Task task_;
};

struct StepMetrics {
  Index step = 0;
  LossBreakdown loss;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

/// Forward, backward and one optimizer update over `examples`. The loss is
/// the batch mean; gradients are accumulated in example order.
StepMetrics train_step(MMDiT<float>& model, OptimizerState& opt, const OptimizerHyper& hyper,
                       const std::vector<TrainingExample>& examples, Index step);

/// Mean loss of a model on fixed examples, without updating anything.
LossBreakdown evaluate_loss(const MMDiT<float>& model, const std::vector<TrainingExample>& examples);

/// A fixed evaluation batch for `task` (independent of the training stream).
std::vector<TrainingExample> evaluation_batch(Task task, Index n, std::uint64_t seed, const ModelConfig& cfg,
                                              const ToyWorldConfig& world, const TemplateBank& bank,
                                              const TrainConfig& train);

/// CSV header and row format for the metrics stream.
std::string metrics_header();
std::string metrics_row(const StepMetrics& m);

class Trainer {
 public:
  /// Applies the stage's freeze plan to `model`. An `opt` from a checkpoint
  /// resumes mid-run.
  Trainer(MMDiT<float> model, ModelConfig model_cfg, ToyWorldConfig world, TrainConfig train,
          std::optional<OptimizerState> opt = std::nullopt);

  Index next_step() const { return opt_.step; }
  bool done() const { return opt_.step >= train_.steps; }

  std::vector<TrainingExample> batch_for(Index step) const;
  StepMetrics step();

  const MMDiT<float>& model() const { return model_; }
  MMDiT<float>& model() { return model_; }
  const OptimizerState& optimizer() const { return opt_; }
  const TrainConfig& train_config() const { return train_; }
  const ToyWorldConfig& world() const { return world_; }
  const TemplateBank& bank() const { return bank_; }

 private:
  MMDiT<float> model_;
  ModelConfig cfg_;
  ToyWorldConfig world_;
  TrainConfig train_;
  TemplateBank bank_;
  OptimizerState opt_;
};

}  // namespace avdit
