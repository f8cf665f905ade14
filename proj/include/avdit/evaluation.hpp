#pragma once

// Sampling-based evaluation on the toy world: sync agreement, prompt
// adherence and timbre similarity per task.

#include "avdit/sampler.hpp"
#include "avdit/toyworld.hpp"

#include <string>
#include <vector>

namespace avdit {

/// Everything a task needs at sampling time, drawn from the toy world.
struct TaskInputs {
  PairedSample truth;        // prompt phonemes, identity, clean video, reference
  ConditionSet<float> cond;  // conditions the task uses; TV2A also clamps to truth.video
};

TaskInputs task_inputs(Task task, std::uint64_t seed, const ToyWorldConfig& world, const TemplateBank& bank);

struct Generation {
  TaskInputs inputs;
  Latents<float> output;
};

/// Draws the task inputs from `seed` and integrates with `spec` (spec.seed
/// drives the prior noise).
Generation generate(const MMDiT<float>& model, Task task, std::uint64_t seed, const GuidanceSpec& spec,
                    const ToyWorldConfig& world, const TemplateBank& bank, const SamplerHooks* hooks = nullptr,
                    const VelocityField<float>* field = nullptr);

struct Stat {
  double mean = 0.0;
  double stddev = 0.0;
  Index n = 0;
};
Stat summarize(const std::vector<double>& values);

struct TaskEval {
  Task task = Task::T2AV;
  Stat sync;              // tasks with both streams
  Stat adherence;
  Stat timbre;            // TR2AV: against the reference timbre
  Stat timbre_mismatch;   // TR2AV: against a different timbre
  bool has_sync = false;
  bool has_timbre = false;
};

struct EvalReport {
  Index n_samples = 0;
  std::uint64_t seed = 0;
  double omega = 0.0;
  Index steps = 0;
  std::vector<TaskEval> tasks;

  const TaskEval& at(Task t) const;
  std::string to_text() const;
  std::string to_json() const;
};

/// Per-sample seeds: inputs from (seed, i), prior noise from a separate stream.
std::uint64_t eval_input_seed(std::uint64_t seed, Index i);
std::uint64_t eval_noise_seed(std::uint64_t seed, Index i);

EvalReport evaluate(const MMDiT<float>& model, const std::vector<Task>& tasks, Index n_samples, std::uint64_t seed,
                    double omega, Index steps, const ToyWorldConfig& world, const TemplateBank& bank);

/// Metrics of ground-truth pairs run through the same scorer.
TaskEval evaluate_ground_truth(Index n_samples, std::uint64_t seed, const ToyWorldConfig& world,
                               const TemplateBank& bank);

}  // namespace avdit
