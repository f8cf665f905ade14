#include "avdit/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace avdit {

void OptimizerHyper::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.hyper.lr", "must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("train.hyper.beta1", "must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("train.hyper.beta2", "must lie in (0, 1)");
  if (!(eps > 0.0) || !std::isfinite(eps)) throw ConfigError("train.hyper.eps", "must be positive");
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ConfigError("train.hyper.weight_decay", "must be >= 0");
  }
  if (!(clip_norm >= 0.0) || !std::isfinite(clip_norm)) throw ConfigError("train.hyper.clip_norm", "must be >= 0");
}

OptimizerHyper OptimizerHyper::toy() {
  OptimizerHyper h;
  h.lr = 1e-3;
  return h;
}

AdamReport adamw_step(ParamStore<float>& params, OptimizerState& state, const OptimizerHyper& hyper) {
  hyper.validate();
  // global norm in a fixed order, in double
  double sq = 0.0;
  for (const auto& e : params) {
    if (!e.trainable || !e.value.grad()) continue;
    const auto& g = *e.value.grad();
    if (!g.allFinite()) throw NumericError("non-finite gradient for " + e.name + "; step rejected");
    sq += g.cast<double>().squaredNorm();
  }
  AdamReport report;
  report.grad_norm = std::sqrt(sq);
  if (hyper.clip_norm > 0.0 && report.grad_norm > hyper.clip_norm) report.clip_scale = hyper.clip_norm / report.grad_norm;

  // Moments only exist for the current trainable set.
  for (auto it = state.moments.begin(); it != state.moments.end();) {
    if (!params.contains(it->first) || !params.at(it->first).trainable) {
      it = state.moments.erase(it);
    } else {
      ++it;
    }
  }

  const Index t = state.step + 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));
  const float b1 = static_cast<float>(hyper.beta1), b2 = static_cast<float>(hyper.beta2);
  const float lr = static_cast<float>(hyper.lr);
  const float decay = static_cast<float>(hyper.lr * hyper.weight_decay);
  const float scale = static_cast<float>(report.clip_scale);
  for (auto& e : params) {
    if (!e.trainable) continue;
    auto [it, fresh] = state.moments.try_emplace(e.name);
    if (fresh) it->second = Moments{Tensor<float>(e.value.shape()), Tensor<float>(e.value.shape())};
    auto& m = it->second.m.data();
    auto& v = it->second.v.data();
    auto& p = e.value.data();
    for (Index i = 0; i < p.size(); ++i) {
      const float g = e.value.grad() ? (*e.value.grad())[i] * scale : 0.0f;
      m[i] = b1 * m[i] + (1.0f - b1) * g;
      v[i] = b2 * v[i] + (1.0f - b2) * g * g;
      const double m_hat = static_cast<double>(m[i]) / bc1;
      const double v_hat = static_cast<double>(v[i]) / bc2;
      const float update = static_cast<float>(m_hat / (std::sqrt(v_hat) + hyper.eps));
      p[i] = p[i] - decay * p[i] - lr * update;
    }
  }
  state.step = t;
  return report;
}

std::set<std::string> freeze_plan(int stage, const ParamStore<float>& params) {
  if (stage != 1 && stage != 2) throw std::invalid_argument("freeze_plan: stage must be 1 or 2");
  std::set<std::string> out;
  for (const auto& e : params) {
    if (stage == 2 || e.name.rfind("audio.", 0) == 0) out.insert(e.name);
  }
  return out;
}

std::vector<Task> default_task_cycle(int stage) {
  if (stage == 1) return {Task::TTS};
  return {kJointTaskCycle.begin(), kJointTaskCycle.end()};
}

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw ConfigError("train.stage", "must be 1 or 2");
  if (steps < 0) throw ConfigError("train.steps", "must be >= 0");
  if (batch_size < 1) throw ConfigError("train.batch_size", "must be at least 1");
  if (!(cfg_dropout >= 0.0 && cfg_dropout <= 1.0)) throw ConfigError("train.cfg_dropout", "must lie in [0, 1]");
  if (!(tts_ref_prob >= 0.0 && tts_ref_prob <= 1.0)) throw ConfigError("train.tts_ref_prob", "must lie in [0, 1]");
  if (task_cycle.empty()) throw ConfigError("train.task_cycle", "must not be empty");
  if (stage == 1) {
    for (Task t : task_cycle)
      if (t != Task::TTS) throw ConfigError("train.task_cycle", "stage 1 trains TTS only");
  } else if (task_cycle != default_task_cycle(2)) {
    throw ConfigError("train.task_cycle", "stage 2 cycle is T2AV, TV2A, TI2AV, TR2AV");
  }
  if (checkpoint_every < 0) throw ConfigError("train.checkpoint_every", "must be >= 0");
  hyper.validate();
}

Rng example_rng(std::uint64_t seed, Index step, Index index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32),
                    static_cast<std::uint32_t>(index)};
  return Rng(seq);
}

TrainingExample build_example(const PairedSample& sample, Task task, const ModelConfig& cfg,
                              const TrainConfig& train, Rng& rng) {
  TrainingExample ex;
  ex.task = task;
  ConditionSet<float> cond;
  cond.text = sample.text;
  switch (task) {
    case Task::TTS: {
      std::uniform_real_distribution<double> coin(0.0, 1.0);
      if (coin(rng) < train.tts_ref_prob) cond.ref_audio = sample.ref_audio;
      break;
    }
    case Task::TI2AV: cond.image = sample.identity; break;
    case Task::TR2AV: cond.ref_audio = sample.ref_audio; break;
    case Task::T2AV:
    case Task::TV2A: break;
  }
  ex.cond = condition_dropout(cond, train.cfg_dropout, rng);
  ex.t = sample_timestep(rng);

  const bool noisy_video = task_generates_video(task);
  if (noisy_video) {
    const auto x0 = gaussian_like<float>(sample.video.shape(), rng);
    auto path = sample_path(x0, sample.video, ex.t);
    if (task == Task::TI2AV) {
      const Index frame = sample.identity.numel();
      path.x_t.data().head(frame) = sample.identity.data();
      Tensor<float> keep(sample.video.shape());
      keep.data().setOnes();
      keep.data().head(frame).setZero();
      ex.video_keep = patchify(keep, cfg);
    }
    ex.video_in = patchify(path.x_t, cfg);
    ex.video_target = patchify(path.target, cfg);
  } else if (task == Task::TV2A) {
    ex.video_in = patchify(sample.video, cfg);
  } else {
    ex.video_in.resize(0, cfg.video_token_channels());
  }
  const auto a0 = gaussian_like<float>(sample.audio.shape(), rng);
  const auto apath = sample_path(a0, sample.audio, ex.t);
  ex.audio_in = apath.x_t.matrix();
  ex.audio_target = apath.target.matrix();
  return ex;
}

namespace {
double masked_mean_sq(const MatrixX<float>& pred, const MatrixX<float>& target, const MatrixX<float>& keep) {
  Tensor<float> p = Tensor<float>::from_matrix(pred), t = Tensor<float>::from_matrix(target);
  if (keep.size() == 0) return cfm_loss(p, t);
  Tensor<float> k = Tensor<float>::from_matrix(keep);
  return cfm_loss(p, t, &k);
}
}  // namespace

LossBreakdown example_loss(const TrainingExample& ex, const MatrixX<float>& video_pred,
                           const MatrixX<float>& audio_pred) {
  const double la = masked_mean_sq(audio_pred, ex.audio_target, MatrixX<float>());
  const double lv = ex.video_target.size() ? masked_mean_sq(video_pred, ex.video_target, ex.video_keep) : 0.0;
  return compose_loss(ex.task, la, lv);
}

LossVars example_loss(const MMDiT<float>& model, ParamBinding<float>& bind, const TrainingExample& ex) {
  ForwardInputs<float> in;
  in.video_tokens = ex.video_in;
  in.audio_tokens = ex.audio_in;
  in.t_audio = ex.t;
  in.t_video = ex.task == Task::TV2A ? 1.0 : ex.t;
  in.cond = &ex.cond;
  in.tv2a = ex.task == Task::TV2A;
  const auto out = model.forward(bind, in);
  LossVars lv;
  lv.loss_a = masked_mse(out.audio, ex.audio_target, MatrixX<float>());
  lv.total = lv.loss_a;
  if (task_has_video_loss(ex.task)) {
    lv.loss_v = masked_mse(out.video, ex.video_target, ex.video_keep);
    lv.total = add(lv.loss_a, *lv.loss_v);
  }
  return lv;
}

TrainingAborted::TrainingAborted(Index step, Task task, const std::string& what)
    : NumericError("training aborted at step " + std::to_string(step) + " (task " + std::string(task_name(task)) +
                   "): " + what),
      step_(step),
      task_(task) {}

namespace {
LossBreakdown mean_breakdown(Task task, double la, double lv, Index n) {
  return compose_loss(task, la / static_cast<double>(n), lv / static_cast<double>(n));
}
}  // namespace

StepMetrics train_step(MMDiT<float>& model, OptimizerState& opt, const OptimizerHyper& hyper,
                       const std::vector<TrainingExample>& examples, Index step) {
  if (examples.empty()) throw std::invalid_argument("train_step: empty batch");
  const Task task = examples.front().task;
  auto& params = model.params();
  params.zero_grad();
  double la = 0.0, lv = 0.0;
  const float seed = 1.0f / static_cast<float>(examples.size());
  StepMetrics out;
  out.step = step;
  try {
    for (const auto& ex : examples) {
      Graph<float> g;
      ParamBinding<float> bind(g, params);
      const LossVars loss = example_loss(model, bind, ex);
      la += static_cast<double>(loss.loss_a.value()(0, 0));
      if (loss.loss_v) lv += static_cast<double>(loss.loss_v->value()(0, 0));
      g.backward(loss.total, seed);
      bind.accumulate_into(params);
    }
    out.loss = mean_breakdown(task, la, lv, static_cast<Index>(examples.size()));
    if (!std::isfinite(out.loss.total)) throw NumericError("non-finite loss");
    out.grad_norm = adamw_step(params, opt, hyper).grad_norm;
  } catch (const TrainingAborted&) {
    throw;
  } catch (const NumericError& e) {
    params.zero_grad();
    throw TrainingAborted(step, task, e.what());
  }
  params.zero_grad();
  return out;
}

LossBreakdown evaluate_loss(const MMDiT<float>& model, const std::vector<TrainingExample>& examples) {
  if (examples.empty()) throw std::invalid_argument("evaluate_loss: no examples");
  double la = 0.0, lv = 0.0;
  for (const auto& ex : examples) {
    Graph<float> g;
    ParamBinding<float> bind(g, model.params(), GradMode::none);
    const LossVars loss = example_loss(model, bind, ex);
    la += static_cast<double>(loss.loss_a.value()(0, 0));
    if (loss.loss_v) lv += static_cast<double>(loss.loss_v->value()(0, 0));
  }
  return mean_breakdown(examples.front().task, la, lv, static_cast<Index>(examples.size()));
}

std::vector<TrainingExample> evaluation_batch(Task task, Index n, std::uint64_t seed, const ModelConfig& cfg,
                                              const ToyWorldConfig& world, const TemplateBank& bank,
                                              const TrainConfig& train) {
  TrainConfig no_drop = train;
  no_drop.cfg_dropout = 0.0;
  std::vector<TrainingExample> out;
  for (Index i = 0; i < n; ++i) {
    // step -1 never occurs in a training stream
    Rng rng = example_rng(seed, -1, i);
    const PairedSample s = make_paired_sample(rng, world, bank);
    out.push_back(build_example(s, task, cfg, no_drop, rng));
  }
  return out;
}

std::string metrics_header() { return "step,task,loss_total,loss_a,loss_v,grad_norm,wall_ms\n"; }

std::string metrics_row(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%lld,%s,%.9g,%.9g,%.9g,%.9g,%.3f\n", static_cast<long long>(m.step),
                std::string(task_name(m.loss.task)).c_str(), m.loss.total, m.loss.loss_a, m.loss.loss_v, m.grad_norm,
                m.wall_ms);
  return buf;
}

Trainer::Trainer(MMDiT<float> model, ModelConfig model_cfg, ToyWorldConfig world, TrainConfig train,
                 std::optional<OptimizerState> opt)
    : model_(std::move(model)),
      cfg_(std::move(model_cfg)),
      world_(std::move(world)),
      train_(std::move(train)),
      bank_(TemplateBank::build(world_)),
      opt_(opt ? std::move(*opt) : OptimizerState{}) {
  train_.validate();
  check_compatible(cfg_, world_);
  model_.params().set_trainable(freeze_plan(train_.stage, model_.params()));
}

std::vector<TrainingExample> Trainer::batch_for(Index step) const {
  const Task task = task_scheduler(step, train_.task_cycle);
  std::vector<TrainingExample> batch;
  for (Index i = 0; i < train_.batch_size; ++i) {
    Rng rng = example_rng(train_.seed, step, i);
    const PairedSample s = make_paired_sample(rng, world_, bank_);
    batch.push_back(build_example(s, task, cfg_, train_, rng));
  }
  return batch;
}

StepMetrics Trainer::step() {
  const auto start = std::chrono::steady_clock::now();
  const Index s = opt_.step;
  StepMetrics m = train_step(model_, opt_, train_.hyper, batch_for(s), s);
  if (train_.record_wall_time) {
    m.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  }
  return m;
}

}  // namespace avdit
