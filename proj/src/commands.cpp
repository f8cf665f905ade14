#include "avdit/cli/commands.hpp"

#include "avdit/cli/pgm.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>

namespace avdit::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

int guarded(std::ostream& err, const std::function<int()>& body) {
  try {
    return body();
  } catch (const TrainingAborted& e) {
    err << "training aborted at step " << e.step() << " (" << task_name(e.task()) << "): " << e.what() << "\n";
    return kNumeric;
  } catch (const IntegrationError& e) {
    err << "sampling aborted: " << e.what() << "\n";
    return kNumeric;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kBadConfig;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kBadConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kIoError;
  }
}

Task task_arg(const std::optional<std::string>& name, Task fallback) {
  if (!name) return fallback;
  for (Task t : kAllTasks)
    if (task_name(t) == *name) return t;
  throw ConfigError("--task", "unknown task '" + *name + "'");
}

GuidanceSpec spec_from(const RunConfig& cfg, const std::optional<std::string>& task, std::optional<double> omega,
                       std::optional<Index> steps) {
  GuidanceSpec spec = cfg.sample;
  spec.task = task_arg(task, spec.task);
  if (omega) spec.omega = *omega;
  if (steps) spec.steps = *steps;
  if (spec.steps < 1) throw ConfigError("--steps", "must be at least 1");
  if (!std::isfinite(spec.omega)) throw ConfigError("--omega", "must be finite");
  return spec;
}

std::string out_dir(const std::string& arg, const RunConfig& cfg) {
  const std::string dir = arg.empty() ? cfg.paths.out : arg;
  if (dir.empty()) throw ConfigError("--out", "output directory required");
  fs::create_directories(dir);
  return dir;
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

Checkpoint snapshot(const RunConfig& cfg, const Trainer& tr) {
  Checkpoint c;
  c.config = cfg;
  c.params = tr.model().params();
  c.optimizer = tr.optimizer();
  c.rng_seed = cfg.train.seed;
  c.rng_step = tr.next_step();
  return c;
}

}  // namespace

MMDiT<float> model_from_checkpoint(const Checkpoint& ckpt) {
  return MMDiT<float>::from_params(ckpt.config.model, ckpt.params);
}

int cmd_train(const TrainArgs& args, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    RunConfig cfg = load_run_config(args.config);
    if (args.seed) cfg.train.seed = *args.seed;

    std::optional<OptimizerState> opt;
    MMDiT<float> model = [&] {
      if (!args.resume.empty()) {
        Checkpoint ck = load_checkpoint(args.resume);
        if (!ck.optimizer) throw ConfigError("--resume", "checkpoint has no optimizer state");
        if (ck.rng_seed != cfg.train.seed) throw ConfigError("--resume", "checkpoint was written under another seed");
        opt = ck.optimizer;
        return MMDiT<float>::from_params(cfg.model, std::move(ck.params));
      }
      if (!cfg.paths.init.empty()) return MMDiT<float>::from_params(cfg.model, load_checkpoint(cfg.paths.init).params);
      return MMDiT<float>::initialize(cfg.model, cfg.init_seed);
    }();

    Trainer tr(std::move(model), cfg.model, cfg.world, cfg.train, opt);

    std::ofstream metrics;
    if (!cfg.paths.metrics.empty()) {
      const fs::path p(cfg.paths.metrics);
      if (p.has_parent_path()) fs::create_directories(p.parent_path());
      const bool append = opt && fs::exists(p);
      metrics.open(p, append ? std::ios::app | std::ios::binary : std::ios::trunc | std::ios::binary);
      if (!metrics) throw std::runtime_error("cannot write " + p.string());
      if (!append) metrics << metrics_header();
    }

    const Index every = cfg.train.checkpoint_every;
    const Index report = std::max<Index>(1, cfg.train.steps / 10);
    log << "stage " << cfg.train.stage << ": steps " << tr.next_step() << ".." << cfg.train.steps << ", batch "
        << cfg.train.batch_size << ", seed " << cfg.train.seed << "\n";
    while (!tr.done()) {
      const StepMetrics m = tr.step();
      if (metrics.is_open()) metrics << metrics_row(m) << std::flush;
      if (m.step % report == 0 || tr.done()) log << metrics_row(m);
      if (every > 0 && tr.next_step() % every == 0 && !tr.done()) {
        save_checkpoint(cfg.paths.checkpoint + ".step" + std::to_string(tr.next_step()), snapshot(cfg, tr));
      }
    }
    if (!cfg.paths.checkpoint.empty()) {
      save_checkpoint(cfg.paths.checkpoint, snapshot(cfg, tr));
      log << "wrote " << cfg.paths.checkpoint << "\n";
    }
    return int{kOk};
  });
}

int cmd_sample(const SampleArgs& args, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    Checkpoint ck = load_checkpoint(args.checkpoint);
    const MMDiT<float> model = model_from_checkpoint(ck);
    RunConfig cfg = ck.config;
    GuidanceSpec spec = spec_from(cfg, args.task, args.omega, args.steps);
    spec.seed = sample_noise_seed(args.seed);
    cfg.sample = spec;
    const std::string dir = out_dir(args.out, cfg);

    const TemplateBank bank = TemplateBank::build(cfg.world);
    const Generation g = generate(model, spec.task, sample_input_seed(args.seed), spec, cfg.world, bank);

    NamedTensors dump;
    auto files = ordered_json::array();
    if (g.output.video.numel() > 0) dump.emplace_back("video", g.output.video);
    dump.emplace_back("audio", g.output.audio);
    save_tensor_dump(join(dir, "latents.utlk"), cfg, dump);
    files.push_back("latents.utlk");
    if (g.output.video.numel() > 0) {
      const auto frames = video_frame_images(g.output.video);
      for (std::size_t f = 0; f < frames.size(); ++f) {
        const std::string name = "video_frame" + std::to_string(f) + ".pgm";
        write_pgm(join(dir, name), frames[f]);
        files.push_back(name);
      }
    }
    write_pgm(join(dir, "audio.pgm"), audio_image(g.output.audio));
    files.push_back("audio.pgm");

    const PairedSample& truth = g.inputs.truth;
    ordered_json m;
    m["checkpoint"] = args.checkpoint;
    m["task"] = std::string(task_name(spec.task));
    m["seed"] = args.seed;
    m["input_seed"] = sample_input_seed(args.seed);
    m["noise_seed"] = spec.seed;
    m["omega"] = spec.omega;
    m["steps"] = spec.steps;
    m["method"] = spec.method == Integrator::heun ? "heun" : "euler";
    m["phonemes"] = truth.phonemes;
    m["identity_id"] = truth.identity_id;
    m["timbre_id"] = truth.timbre_id;
    m["conditions"] = {{"text", g.inputs.cond.text.has_value()},
                       {"image", g.inputs.cond.image.has_value()},
                       {"ref_audio", g.inputs.cond.ref_audio.has_value()},
                       {"clean_video", spec.task == Task::TV2A}};
    m["video_shape"] = g.output.video.shape();
    m["audio_shape"] = g.output.audio.shape();
    m["files"] = files;
    write_file_atomic(join(dir, "manifest.json"), m.dump(2) + "\n");
    log << task_name(spec.task) << " sample written to " << dir << "\n";
    return int{kOk};
  });
}

int cmd_eval(const EvalArgs& args, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    if (args.n_samples < 1) throw ConfigError("--n-samples", "must be at least 1");
    Checkpoint ck = load_checkpoint(args.checkpoint);
    const MMDiT<float> model = model_from_checkpoint(ck);
    const GuidanceSpec spec = spec_from(ck.config, std::nullopt, args.omega, args.steps);
    const TemplateBank bank = TemplateBank::build(ck.config.world);
    const std::vector<Task> tasks(kJointTaskCycle.begin(), kJointTaskCycle.end());
    const EvalReport report =
        evaluate(model, tasks, args.n_samples, args.seed, spec.omega, spec.steps, ck.config.world, bank);
    log << report.to_text();
    if (!args.out.empty()) {
      fs::create_directories(args.out);
      write_file_atomic(join(args.out, "report.txt"), report.to_text());
      write_file_atomic(join(args.out, "report.json"), report.to_json());
    }
    return int{kOk};
  });
}

CapturedMaps capture_attention(const MMDiT<float>& model, Task task, std::uint64_t seed, const GuidanceSpec& spec,
                               const std::vector<Index>& blocks, const std::vector<Index>& at_steps,
                               const ToyWorldConfig& world, const TemplateBank& bank) {
  GuidanceSpec s = spec;
  s.task = task;
  s.seed = sample_noise_seed(seed);
  const std::set<Index> want(at_steps.begin(), at_steps.end());
  Index current = -1;
  bool taken = false;
  CapturedMaps out;
  SamplerHooks hooks;
  hooks.on_step = [&](Index k, double) {
    current = k;
    taken = false;
  };
  // first conditional evaluation of each requested step
  const VelocityField<float> field = [&](const Latents<float>& x, double t, const ConditionSet<float>& cond,
                                         bool tv2a) {
    if (taken || cond.is_null() || !want.count(current)) return model.model_forward(x.video, x.audio, t, cond, tv2a);
    AttentionCapture<float> cap;
    cap.blocks = std::set<Index>(blocks.begin(), blocks.end());
    Latents<float> v = model.model_forward(x.video, x.audio, t, cond, tv2a, &cap);
    taken = true;
    for (const auto& [b, m] : cap.maps) out[{current, b}] = m.cast<double>();
    return v;
  };
  generate(model, task, sample_input_seed(seed), s, world, bank, &hooks, &field);
  return out;
}

CrossMaps split_cross(const MatrixX<double>& joint, Index n_video, Index n_audio) {
  if (joint.rows() != n_video + n_audio || joint.cols() != n_video + n_audio) {
    throw DimensionError("split_cross: map is " + std::to_string(joint.rows()) + "x" + std::to_string(joint.cols()));
  }
  return {joint.bottomLeftCorner(n_audio, n_video), joint.topRightCorner(n_video, n_audio)};
}

std::vector<bool> mouth_tokens(const ModelConfig& cfg, const ToyWorldConfig& world) {
  const Index gh = cfg.video_height / cfg.patch_h, gw = cfg.video_width / cfg.patch_w;
  std::vector<bool> spatial(static_cast<std::size_t>(gh * gw), false);
  for (const auto& [h, w] : world.mouth) spatial[static_cast<std::size_t>((h / cfg.patch_h) * gw + w / cfg.patch_w)] = true;
  std::vector<bool> out;
  for (Index t = 0; t < cfg.video_grid_t(); ++t) out.insert(out.end(), spatial.begin(), spatial.end());
  return out;
}

double mouth_ratio(const MatrixX<double>& a2v, const std::vector<bool>& mouth) {
  if (static_cast<Index>(mouth.size()) != a2v.cols()) throw DimensionError("mouth_ratio: column count mismatch");
  const RowVectorX<double> col = a2v.colwise().mean();
  double in = 0.0, rest = 0.0;
  Index n_in = 0, n_rest = 0;
  for (Index j = 0; j < col.size(); ++j) {
    if (mouth[static_cast<std::size_t>(j)]) {
      in += col(j);
      ++n_in;
    } else {
      rest += col(j);
      ++n_rest;
    }
  }
  if (n_in == 0 || n_rest == 0) throw std::invalid_argument("mouth_ratio: need mouth and non-mouth columns");
  rest /= static_cast<double>(n_rest);
  if (rest <= 0.0) return std::numeric_limits<double>::infinity();
  return (in / static_cast<double>(n_in)) / rest;
}

int cmd_inspect_attn(const InspectArgs& args, std::ostream& log, std::ostream& err) {
  return guarded(err, [&] {
    Checkpoint ck = load_checkpoint(args.checkpoint);
    const MMDiT<float> model = model_from_checkpoint(ck);
    const RunConfig& cfg = ck.config;
    const GuidanceSpec spec = spec_from(cfg, args.task, args.omega, args.steps);
    if (!task_generates_video(spec.task) && spec.task != Task::TV2A) {
      throw ConfigError("--task", "needs a task with a video stream");
    }
    std::vector<Index> blocks = args.blocks;
    if (blocks.empty())
      for (Index b = 0; b < cfg.model.n_blocks; ++b) blocks.push_back(b);
    for (Index b : blocks)
      if (b < 0 || b >= cfg.model.n_blocks) {
        throw ConfigError("--blocks", "block " + std::to_string(b) + " outside [0, " + std::to_string(cfg.model.n_blocks) + ")");
      }
    std::vector<Index> at = args.at_steps;
    if (at.empty()) at = {0, spec.steps / 2, spec.steps - 1};
    for (Index s : at)
      if (s < 0 || s >= spec.steps) {
        throw ConfigError("--at-steps", "step " + std::to_string(s) + " outside [0, " + std::to_string(spec.steps) + ")");
      }
    const std::string dir = out_dir(args.out, cfg);
    const TemplateBank bank = TemplateBank::build(cfg.world);
    const CapturedMaps maps = capture_attention(model, spec.task, args.seed, spec, blocks, at, cfg.world, bank);
    const Index nv = cfg.model.video_tokens(), na = cfg.model.audio_frames;
    const auto mouth = mouth_tokens(cfg.model, cfg.world);
    ordered_json summary = ordered_json::array();
    for (const auto& [key, joint] : maps) {
      const auto [s, b] = key;
      const CrossMaps c = split_cross(joint, nv, na);
      const std::string tag = "_step" + std::to_string(s) + "_block" + std::to_string(b) + ".pgm";
      write_pgm(join(dir, "attn_a2v" + tag), c.a2v);
      write_pgm(join(dir, "attn_v2a" + tag), c.v2a);
      const double ratio = mouth_ratio(c.a2v, mouth);
      log << "step " << s << " block " << b << ": a2v mouth/non-mouth " << ratio << "\n";
      summary.push_back({{"step", s},
                         {"block", b},
                         {"a2v_mouth_ratio", ratio},
                         {"a2v_max_row_sum", c.a2v.rowwise().sum().maxCoeff()},
                         {"v2a_max_row_sum", c.v2a.rowwise().sum().maxCoeff()}});
    }
    write_file_atomic(join(dir, "attention.json"), summary.dump(2) + "\n");
    return int{kOk};
  });
}

}  // namespace avdit::cli
