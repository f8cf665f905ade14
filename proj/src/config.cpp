#include "avdit/cli/config.hpp"

#include <fstream>
#include <limits>
#include <set>
#include <sstream>

namespace avdit::cli {

using nlohmann::json;

namespace {

// Larger integers are rejected outright so later arithmetic on extents cannot overflow.
constexpr Index kMaxInt = Index{1} << 30;

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "config" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, Index& out, Index lo = std::numeric_limits<Index>::min()) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_number_integer()) throw ConfigError(field(key), "expected an integer");
    if (v->is_number_unsigned() && v->get<std::uint64_t>() > static_cast<std::uint64_t>(kMaxInt)) {
      throw ConfigError(field(key), "out of range");
    }
    const auto x = v->get<std::int64_t>();
    if (x > kMaxInt || x < -kMaxInt) throw ConfigError(field(key), "out of range");
    if (x < lo) throw ConfigError(field(key), "must be >= " + std::to_string(lo));
    out = x;
  }
  void get(const std::string& key, int& out) {
    Index x = out;
    get(key, x);
    out = static_cast<int>(x);
  }
  void get(const std::string& key, std::uint64_t& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_number_integer() || (!v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
      throw ConfigError(field(key), "expected a non-negative integer");
    }
    out = v->get<std::uint64_t>();
  }
  void get(const std::string& key, double& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_number()) throw ConfigError(field(key), "expected a number");
    out = v->get<double>();
  }
  void get(const std::string& key, bool& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_boolean()) throw ConfigError(field(key), "expected true or false");
    out = v->get<bool>();
  }
  void get(const std::string& key, std::string& out) {
    const json* v = find(key);
    if (!v) return;
    if (!v->is_string()) throw ConfigError(field(key), "expected a string");
    out = v->get<std::string>();
  }
  void get(const std::string& key, Task& out) {
    std::string s;
    get(key, s);
    if (find(key)) out = task_from(s, field(key));
  }

  static Task task_from(const std::string& s, const std::string& where) {
    for (Task t : kAllTasks)
      if (task_name(t) == s) return t;
    throw ConfigError(where, "unknown task '" + s + "'");
  }

  /// Rejects keys nobody asked for.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(field(it.key()), "unknown key");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_model(const json& j, ModelConfig& m) {
  Section s(j, "model");
  s.get("n_blocks", m.n_blocks);
  s.get("model_dim", m.model_dim);
  s.get("n_heads", m.n_heads);
  s.get("head_dim", m.head_dim);
  s.get("ffn_mult", m.ffn_mult);
  s.get("patch_t", m.patch_t);
  s.get("patch_h", m.patch_h);
  s.get("patch_w", m.patch_w);
  s.get("norm_eps", m.norm_eps);
  s.finish();
}

void read_world(const json& j, ToyWorldConfig& w) {
  Section s(j, "world");
  s.get("alphabet", w.alphabet);
  s.get("frames", w.frames);
  s.get("height", w.height);
  s.get("width", w.width);
  s.get("video_channels", w.video_channels);
  s.get("audio_per_frame", w.audio_per_frame);
  s.get("audio_channels", w.audio_channels);
  s.get("timbre_dim", w.timbre_dim);
  if (const json* m = s.find("mouth")) {
    if (!m->is_array()) throw ConfigError("world.mouth", "expected a list of [row, col] pairs");
    w.mouth.clear();
    for (std::size_t i = 0; i < m->size(); ++i) {
      const json& cell = (*m)[i];
      const std::string where = "world.mouth[" + std::to_string(i) + "]";
      if (!cell.is_array() || cell.size() != 2 || !cell[0].is_number_integer() || !cell[1].is_number_integer()) {
        throw ConfigError(where, "expected [row, col]");
      }
      if (cell[0].is_number_unsigned() || cell[1].is_number_unsigned()) {
        if (cell[0].get<std::uint64_t>() > static_cast<std::uint64_t>(kMaxInt) ||
            cell[1].get<std::uint64_t>() > static_cast<std::uint64_t>(kMaxInt)) {
          throw ConfigError(where, "out of range");
        }
      }
      w.mouth.emplace_back(cell[0].get<std::int64_t>(), cell[1].get<std::int64_t>());
    }
  }
  s.get("noise_std", w.noise_std);
  s.get("text_len", w.text_len);
  s.get("text_dim", w.text_dim);
  s.get("ref_len", w.ref_len);
  s.get("ref_min", w.ref_min);
  s.get("ref_max", w.ref_max);
  s.get("n_identities", w.n_identities);
  s.get("template_gain", w.template_gain);
  s.get("timbre_gain", w.timbre_gain);
  s.get("bank_seed", w.bank_seed);
  s.finish();
}

void read_hyper(const json& j, OptimizerHyper& h) {
  Section s(j, "train.hyper");
  s.get("lr", h.lr);
  s.get("beta1", h.beta1);
  s.get("beta2", h.beta2);
  s.get("eps", h.eps);
  s.get("weight_decay", h.weight_decay);
  s.get("clip_norm", h.clip_norm);
  s.finish();
}

void read_train(const json& j, TrainConfig& t) {
  Section s(j, "train");
  s.get("stage", t.stage);
  t.task_cycle = default_task_cycle(t.stage == 2 ? 2 : 1);
  s.get("steps", t.steps);
  s.get("batch_size", t.batch_size);
  if (const json* h = s.find("hyper")) read_hyper(*h, t.hyper);
  s.get("cfg_dropout", t.cfg_dropout);
  s.get("tts_ref_prob", t.tts_ref_prob);
  if (const json* c = s.find("task_cycle")) {
    if (!c->is_array()) throw ConfigError("train.task_cycle", "expected a list of task names");
    t.task_cycle.clear();
    for (std::size_t i = 0; i < c->size(); ++i) {
      const std::string where = "train.task_cycle[" + std::to_string(i) + "]";
      if (!(*c)[i].is_string()) throw ConfigError(where, "expected a task name");
      t.task_cycle.push_back(Section::task_from((*c)[i].get<std::string>(), where));
    }
  }
  s.get("seed", t.seed);
  s.get("checkpoint_every", t.checkpoint_every);
  s.get("record_wall_time", t.record_wall_time);
  s.finish();
}

void read_sample(const json& j, GuidanceSpec& g) {
  Section s(j, "sample");
  s.get("omega", g.omega);
  s.get("steps", g.steps);
  s.get("task", g.task);
  s.get("seed", g.seed);
  std::string method = g.method == Integrator::heun ? "heun" : "euler";
  s.get("method", method);
  if (method == "euler") {
    g.method = Integrator::euler;
  } else if (method == "heun") {
    g.method = Integrator::heun;
  } else {
    throw ConfigError("sample.method", "expected \"euler\" or \"heun\"");
  }
  s.finish();
}

void read_paths(const json& j, RunPaths& p) {
  Section s(j, "paths");
  s.get("metrics", p.metrics);
  s.get("checkpoint", p.checkpoint);
  s.get("init", p.init);
  s.get("out", p.out);
  s.finish();
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  world.validate();
  check_compatible(model, world);
  train.validate();
  sample.validate();
  if (paths.checkpoint.empty() && train.checkpoint_every > 0) {
    throw ConfigError("paths.checkpoint", "required when train.checkpoint_every > 0");
  }
}

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  Section s(j, "");
  ModelConfig arch;
  if (const json* m = s.find("model")) read_model(*m, arch);
  if (const json* w = s.find("world")) read_world(*w, c.world);
  if (const json* t = s.find("train")) read_train(*t, c.train);
  if (const json* g = s.find("sample")) read_sample(*g, c.sample);
  if (const json* p = s.find("paths")) read_paths(*p, c.paths);
  s.get("init_seed", c.init_seed);
  s.finish();
  c.world.validate();
  c.model = model_config_for(c.world, arch);
  c.train.metrics_path = c.paths.metrics;
  c.train.checkpoint_path = c.paths.checkpoint;
  c.train.init_checkpoint = c.paths.init;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("file", "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  json j = json::parse(ss.str(), nullptr, false);
  if (j.is_discarded()) throw ConfigError("file", path + " is not valid JSON");
  return parse_run_config(j);
}

nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  const ModelConfig& m = c.model;
  j["model"] = {{"n_blocks", m.n_blocks}, {"model_dim", m.model_dim}, {"n_heads", m.n_heads},
                {"head_dim", m.head_dim}, {"ffn_mult", m.ffn_mult},   {"patch_t", m.patch_t},
                {"patch_h", m.patch_h},   {"patch_w", m.patch_w},     {"norm_eps", m.norm_eps}};
  const ToyWorldConfig& w = c.world;
  auto mouth = nlohmann::ordered_json::array();
  for (const auto& [h, x] : w.mouth) mouth.push_back({h, x});
  j["world"] = {{"alphabet", w.alphabet},
                {"frames", w.frames},
                {"height", w.height},
                {"width", w.width},
                {"video_channels", w.video_channels},
                {"audio_per_frame", w.audio_per_frame},
                {"audio_channels", w.audio_channels},
                {"timbre_dim", w.timbre_dim},
                {"mouth", mouth},
                {"noise_std", w.noise_std},
                {"text_len", w.text_len},
                {"text_dim", w.text_dim},
                {"ref_len", w.ref_len},
                {"ref_min", w.ref_min},
                {"ref_max", w.ref_max},
                {"n_identities", w.n_identities},
                {"template_gain", w.template_gain},
                {"timbre_gain", w.timbre_gain},
                {"bank_seed", w.bank_seed}};
  const TrainConfig& t = c.train;
  auto cycle = nlohmann::ordered_json::array();
  for (Task task : t.task_cycle) cycle.push_back(std::string(task_name(task)));
  j["train"] = {{"stage", t.stage},
                {"steps", t.steps},
                {"batch_size", t.batch_size},
                {"hyper",
                 {{"lr", t.hyper.lr},
                  {"beta1", t.hyper.beta1},
                  {"beta2", t.hyper.beta2},
                  {"eps", t.hyper.eps},
                  {"weight_decay", t.hyper.weight_decay},
                  {"clip_norm", t.hyper.clip_norm}}},
                {"cfg_dropout", t.cfg_dropout},
                {"tts_ref_prob", t.tts_ref_prob},
                {"task_cycle", cycle},
                {"seed", t.seed},
                {"checkpoint_every", t.checkpoint_every},
                {"record_wall_time", t.record_wall_time}};
  const GuidanceSpec& g = c.sample;
  j["sample"] = {{"omega", g.omega},
                 {"steps", g.steps},
                 {"task", std::string(task_name(g.task))},
                 {"seed", g.seed},
                 {"method", g.method == Integrator::heun ? "heun" : "euler"}};
  j["paths"] = {{"metrics", c.paths.metrics}, {"checkpoint", c.paths.checkpoint}, {"init", c.paths.init},
                {"out", c.paths.out}};
  j["init_seed"] = c.init_seed;
  return j;
}

}  // namespace avdit::cli
