#include "avdit/evaluation.hpp"

#include "avdit/training.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <sstream>

namespace avdit {

TaskInputs task_inputs(Task task, std::uint64_t seed, const ToyWorldConfig& world, const TemplateBank& bank) {
  TaskInputs in;
  Rng rng(seed);
  in.truth = make_paired_sample(rng, world, bank);
  in.cond.text = in.truth.text;
  if (task == Task::TI2AV) in.cond.image = in.truth.identity;
  if (task == Task::TR2AV) in.cond.ref_audio = in.truth.ref_audio;
  return in;
}

Generation generate(const MMDiT<float>& model, Task task, std::uint64_t seed, const GuidanceSpec& spec,
                    const ToyWorldConfig& world, const TemplateBank& bank, const SamplerHooks* hooks,
                    const VelocityField<float>* field) {
  Generation g;
  g.inputs = task_inputs(task, seed, world, bank);
  GuidanceSpec s = spec;
  s.task = task;
  const VelocityField<float> default_field = model_field(model);
  g.output = integrate(field ? *field : default_field, model.config(), g.inputs.cond, s,
                       task == Task::TV2A ? &g.inputs.truth.video : nullptr, hooks);
  return g;
}

Stat summarize(const std::vector<double>& values) {
  Stat s;
  s.n = static_cast<Index>(values.size());
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(sq / static_cast<double>(values.size()));
  return s;
}

const TaskEval& EvalReport::at(Task t) const {
  for (const auto& e : tasks)
    if (e.task == t) return e;
  throw std::out_of_range("task not in report: " + std::string(task_name(t)));
}

namespace {
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}
nlohmann::ordered_json stat_json(const Stat& s) {
  return {{"mean", s.mean}, {"stddev", s.stddev}, {"n", s.n}};
}
}  // namespace

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "samples per task: " << n_samples << "  seed: " << seed << "  omega: " << fmt(omega) << "  steps: " << steps
     << "\n";
  for (const auto& e : tasks) {
    os << task_name(e.task) << ":";
    if (e.has_sync) os << "  sync " << fmt(e.sync.mean) << " +- " << fmt(e.sync.stddev);
    os << "  adherence " << fmt(e.adherence.mean) << " +- " << fmt(e.adherence.stddev);
    if (e.has_timbre) {
      os << "  timbre " << fmt(e.timbre.mean) << " +- " << fmt(e.timbre.stddev) << "  timbre(mismatched) "
         << fmt(e.timbre_mismatch.mean) << " +- " << fmt(e.timbre_mismatch.stddev);
    }
    os << "\n";
  }
  return os.str();
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["n_samples"] = n_samples;
  j["seed"] = seed;
  j["omega"] = omega;
  j["steps"] = steps;
  j["tasks"] = nlohmann::ordered_json::object();
  for (const auto& e : tasks) {
    nlohmann::ordered_json t;
    if (e.has_sync) t["sync_agreement"] = stat_json(e.sync);
    t["text_adherence"] = stat_json(e.adherence);
    if (e.has_timbre) {
      t["timbre_similarity"] = stat_json(e.timbre);
      t["timbre_similarity_mismatched"] = stat_json(e.timbre_mismatch);
    }
    j["tasks"][std::string(task_name(e.task))] = t;
  }
  return j.dump(2) + "\n";
}

std::uint64_t eval_input_seed(std::uint64_t seed, Index i) { return example_rng(seed, -2, i)(); }
std::uint64_t eval_noise_seed(std::uint64_t seed, Index i) { return example_rng(seed, -3, i)(); }

namespace {
struct Scores {
  std::vector<double> sync, adherence, timbre, mismatch;
};

void score(Scores& s, Task task, const PairedSample& truth, const Latents<float>& out, const ToyWorldConfig& world,
           const TemplateBank& bank) {
  const bool has_video = out.video.numel() > 0;
  if (has_video) s.sync.push_back(sync_agreement(out.video, out.audio, bank, world));
  // TV2A video is the conditioning input, so only the audio is scored
  const Tensor<float> empty({0, world.height, world.width, world.video_channels});
  s.adherence.push_back(
      text_adherence(task == Task::TV2A ? empty : out.video, out.audio, truth.phonemes, bank, world));
  if (task == Task::TR2AV || task == Task::TTS) {
    s.timbre.push_back(timbre_similarity(out.audio, truth.timbre_id, bank, world));
    s.mismatch.push_back(timbre_similarity(out.audio, (truth.timbre_id + 1) % world.n_timbres(), bank, world));
  }
}

TaskEval finish(Task task, const Scores& s) {
  TaskEval e;
  e.task = task;
  e.has_sync = !s.sync.empty();
  e.sync = summarize(s.sync);
  e.adherence = summarize(s.adherence);
  e.has_timbre = !s.timbre.empty();
  e.timbre = summarize(s.timbre);
  e.timbre_mismatch = summarize(s.mismatch);
  return e;
}
}  // namespace

EvalReport evaluate(const MMDiT<float>& model, const std::vector<Task>& tasks, Index n_samples, std::uint64_t seed,
                    double omega, Index steps, const ToyWorldConfig& world, const TemplateBank& bank) {
  EvalReport report;
  report.n_samples = n_samples;
  report.seed = seed;
  report.omega = omega;
  report.steps = steps;
  for (Task task : tasks) {
    Scores s;
    for (Index i = 0; i < n_samples; ++i) {
      GuidanceSpec spec;
      spec.omega = omega;
      spec.steps = steps;
      spec.seed = eval_noise_seed(seed, i);
      const Generation g = generate(model, task, eval_input_seed(seed, i), spec, world, bank);
      score(s, task, g.inputs.truth, g.output, world, bank);
    }
    report.tasks.push_back(finish(task, s));
  }
  return report;
}

TaskEval evaluate_ground_truth(Index n_samples, std::uint64_t seed, const ToyWorldConfig& world,
                               const TemplateBank& bank) {
  Scores s;
  for (Index i = 0; i < n_samples; ++i) {
    const TaskInputs in = task_inputs(Task::T2AV, eval_input_seed(seed, i), world, bank);
    score(s, Task::T2AV, in.truth, Latents<float>{in.truth.video, in.truth.audio}, world, bank);
  }
  return finish(Task::T2AV, s);
}

}  // namespace avdit
