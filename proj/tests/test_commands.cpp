#include "doctest.h"

#include "avdit/cli/commands.hpp"
#include "avdit/cli/pgm.hpp"
#include "temp_dir.hpp"

#include <sstream>

using namespace avdit;
using namespace avdit::cli;
using avdit::testing::slurp;
using avdit::testing::spit;
using avdit::testing::TempDir;
using nlohmann::json;

namespace {

/// Small model on the default world so command tests stay fast.
json small_config(const TempDir& dir, int stage, Index steps) {
  json j;
  j["model"] = {{"n_blocks", 2}, {"model_dim", 16}, {"n_heads", 2}, {"head_dim", 8}, {"ffn_mult", 2}};
  j["train"] = {{"stage", stage}, {"steps", steps}, {"batch_size", 2}, {"seed", 11}};
  if (stage == 2) j["train"]["task_cycle"] = {"T2AV", "TV2A", "TI2AV", "TR2AV"};
  j["sample"] = {{"steps", 4}, {"omega", 2.0}};
  j["paths"] = {{"metrics", dir / "metrics.csv"}, {"checkpoint", dir / "ckpt.utlk"}};
  j["init_seed"] = 5;
  return j;
}

std::string write_config(const TempDir& dir, const json& j, const std::string& name = "run.json") {
  spit(dir / name, j.dump(2));
  return dir / name;
}

int train(const std::string& config, std::string* err_out = nullptr, const std::string& resume = "") {
  std::ostringstream log, err;
  TrainArgs a;
  a.config = config;
  a.resume = resume;
  const int code = cmd_train(a, log, err);
  if (err_out) *err_out = err.str();
  return code;
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("train: zero steps writes a header-only CSV") {
  TempDir dir;
  CHECK(train(write_config(dir, small_config(dir, 1, 0))) == kOk);
  CHECK(slurp(dir / "metrics.csv") == metrics_header());
  CHECK(std::filesystem::exists(dir / "ckpt.utlk"));
}

TEST_CASE("train: invalid config exits 2 with the field path") {
  TempDir dir;
  json j = small_config(dir, 1, 3);
  j["train"]["batch_size"] = 0;
  std::string err;
  CHECK(train(write_config(dir, j), &err) == kBadConfig);
  CHECK(err.find("train.batch_size") != std::string::npos);
  CHECK(train(dir / "absent.json", &err) == kBadConfig);
}

TEST_CASE("train: identical config and seed give identical CSV bytes") {
  TempDir a, b;
  CHECK(train(write_config(a, small_config(a, 2, 6))) == kOk);
  CHECK(train(write_config(b, small_config(b, 2, 6))) == kOk);
  const std::string csv = slurp(a / "metrics.csv");
  CHECK(lines(csv).size() == 7);
  CHECK(csv == slurp(b / "metrics.csv"));
  const Checkpoint ca = load_checkpoint(a / "ckpt.utlk"), cb = load_checkpoint(b / "ckpt.utlk");
  for (Index i = 0; i < ca.params.size(); ++i) CHECK(ca.params[i].value.identical(cb.params[i].value));
}

TEST_CASE("train: resumed run reproduces the uninterrupted rows") {
  TempDir full, part;
  CHECK(train(write_config(full, small_config(full, 2, 8))) == kOk);
  json j = small_config(part, 2, 8);
  j["train"]["checkpoint_every"] = 4;
  const std::string cfg = write_config(part, j);
  CHECK(train(cfg) == kOk);
  REQUIRE(std::filesystem::exists(part / "ckpt.utlk.step4"));
  std::filesystem::remove(part / "metrics.csv");
  CHECK(train(cfg, nullptr, part / "ckpt.utlk.step4") == kOk);
  const auto a = lines(slurp(full / "metrics.csv"));
  const auto b = lines(slurp(part / "metrics.csv"));
  REQUIRE(b.size() == 5);
  CHECK(b[0] == a[0]);
  for (int i = 1; i < 5; ++i) CHECK(b[static_cast<std::size_t>(i)] == a[static_cast<std::size_t>(i + 4)]);
  const Checkpoint ca = load_checkpoint(full / "ckpt.utlk"), cb = load_checkpoint(part / "ckpt.utlk");
  for (Index i = 0; i < ca.params.size(); ++i) CHECK(ca.params[i].value.identical(cb.params[i].value));
}

TEST_CASE("train: stage 2 from a stage-1 checkpoint, NaN weights exit 3") {
  TempDir dir;
  CHECK(train(write_config(dir, small_config(dir, 1, 2), "s1.json")) == kOk);
  Checkpoint ck = load_checkpoint(dir / "ckpt.utlk");
  json j = small_config(dir, 2, 2);
  j["paths"]["init"] = dir / "ckpt.utlk";
  j["paths"]["checkpoint"] = dir / "s2.utlk";
  CHECK(train(write_config(dir, j, "s2.json")) == kOk);
  CHECK(!load_checkpoint(dir / "s2.utlk").params.at("video.in.w").value.identical(ck.params.at("video.in.w").value));

  ck.params.at("audio.in.w").value[0] = std::nanf("");
  save_checkpoint(dir / "nan.utlk", ck);
  j["paths"]["init"] = dir / "nan.utlk";
  std::string err;
  CHECK(train(write_config(dir, j, "nan.json"), &err) == kNumeric);
  CHECK(err.find("step 0") != std::string::npos);
  CHECK(err.find("T2AV") != std::string::npos);
}

namespace {

struct Trained {
  TempDir dir;
  std::string ckpt;
  Trained() {
    REQUIRE(train(write_config(dir, small_config(dir, 2, 4))) == kOk);
    ckpt = dir / "ckpt.utlk";
  }
};

int run_sample(const std::string& ckpt, const std::string& out, const std::string& task, std::uint64_t seed,
           std::optional<double> omega = std::nullopt) {
  std::ostringstream log, err;
  SampleArgs a;
  a.checkpoint = ckpt;
  a.out = out;
  a.task = task;
  a.seed = seed;
  a.omega = omega;
  return cmd_sample(a, log, err);
}

}  // namespace

TEST_CASE("sample: dumps, renders and manifest") {
  Trained t;
  const ToyWorldConfig w;
  CHECK(run_sample(t.ckpt, t.dir / "s1", "T2AV", 3, 1.0) == kOk);
  CHECK(run_sample(t.ckpt, t.dir / "s2", "T2AV", 3, 1.0) == kOk);
  CHECK(slurp(t.dir / "s1/latents.utlk") == slurp(t.dir / "s2/latents.utlk"));
  const auto dump = load_tensor_dump(t.dir / "s1/latents.utlk");
  REQUIRE(dump.size() == 2);
  CHECK(dump[0].second.shape() == Shape{w.frames, w.height, w.width, w.video_channels});
  CHECK(dump[1].second.shape() == Shape{w.audio_frames(), w.audio_channels});
  for (Index f = 0; f < w.frames; ++f) {
    const GrayImage img = read_pgm(t.dir / ("s1/video_frame" + std::to_string(f) + ".pgm"));
    CHECK(img.height == w.height);
    CHECK(img.width == w.width * w.video_channels);
  }
  CHECK(read_pgm(t.dir / "s1/audio.pgm").width == w.audio_frames());
  const json m = json::parse(slurp(t.dir / "s1/manifest.json"));
  CHECK(m["task"] == "T2AV");
  CHECK(m["seed"] == 3);
  CHECK(m["omega"] == 1.0);
  CHECK(m["phonemes"].size() == static_cast<std::size_t>(w.frames));

  CHECK(run_sample(t.ckpt, t.dir / "s3", "TTS", 3) == kOk);
  CHECK(load_tensor_dump(t.dir / "s3/latents.utlk").size() == 1);
  CHECK(run_sample(t.ckpt, t.dir / "s4", "T2V", 3) == kBadConfig);
}

TEST_CASE("sample: TV2A emits the conditioning video bit-exactly") {
  Trained t;
  CHECK(run_sample(t.ckpt, t.dir / "tv", "TV2A", 9) == kOk);
  const ToyWorldConfig w;
  const TemplateBank bank = TemplateBank::build(w);
  const TaskInputs in = task_inputs(Task::TV2A, sample_input_seed(9), w, bank);
  const auto dump = load_tensor_dump(t.dir / "tv/latents.utlk");
  CHECK(dump[0].first == "video");
  CHECK(dump[0].second.identical(in.truth.video));
}

TEST_CASE("eval: report reproducible per seed") {
  Trained t;
  std::ostringstream l1, l2, err;
  EvalArgs a;
  a.checkpoint = t.ckpt;
  a.n_samples = 2;
  a.seed = 4;
  a.steps = 3;
  a.out = t.dir / "e1";
  CHECK(cmd_eval(a, l1, err) == kOk);
  a.out = t.dir / "e2";
  CHECK(cmd_eval(a, l2, err) == kOk);
  CHECK(l1.str() == l2.str());
  CHECK(slurp(t.dir / "e1/report.json") == slurp(t.dir / "e2/report.json"));
  const json r = json::parse(slurp(t.dir / "e1/report.json"));
  CHECK(r["tasks"]["TR2AV"].contains("timbre_similarity"));
  CHECK(r["tasks"]["T2AV"]["sync_agreement"]["n"] == 2);
  a.n_samples = 0;
  CHECK(cmd_eval(a, l1, err) == kBadConfig);
}

TEST_CASE("inspect-attn: files, shapes and row sums") {
  Trained t;
  const Checkpoint ck = load_checkpoint(t.ckpt);
  const MMDiT<float> model = model_from_checkpoint(ck);
  const ModelConfig& cfg = ck.config.model;
  const TemplateBank bank = TemplateBank::build(ck.config.world);
  GuidanceSpec spec = ck.config.sample;
  const CapturedMaps maps = capture_attention(model, Task::T2AV, 1, spec, {0, 1}, {0, 3}, ck.config.world, bank);
  CHECK(maps.size() == 4);
  const Index nv = cfg.video_tokens(), na = cfg.audio_frames;
  for (const auto& [key, joint] : maps) {
    CHECK(((joint.rowwise().sum().array() - 1.0).abs() < 1e-5).all());
    const CrossMaps c = split_cross(joint, nv, na);
    CHECK(c.a2v.rows() == na);
    CHECK(c.a2v.cols() == nv);
    CHECK(c.v2a.rows() == nv);
    CHECK(c.v2a.cols() == na);
    CHECK((c.a2v.rowwise().sum().array() <= 1.0 + 1e-6).all());
    CHECK((c.v2a.rowwise().sum().array() <= 1.0 + 1e-6).all());
  }

  std::ostringstream log, err;
  InspectArgs a;
  a.checkpoint = t.ckpt;
  a.seed = 1;
  a.blocks = {1};
  a.at_steps = {0, 2};
  a.out = t.dir / "attn";
  CHECK(cmd_inspect_attn(a, log, err) == kOk);
  for (const char* name : {"attn_a2v_step0_block1.pgm", "attn_v2a_step0_block1.pgm", "attn_a2v_step2_block1.pgm",
                           "attn_v2a_step2_block1.pgm"}) {
    const GrayImage img = read_pgm(t.dir / (std::string("attn/") + name));
    const bool a2v = std::string(name).find("a2v") != std::string::npos;
    CHECK(img.height == (a2v ? na : nv));
    CHECK(img.width == (a2v ? nv : na));
  }
  CHECK(!std::filesystem::exists(t.dir / "attn/attn_a2v_step0_block0.pgm"));
  a.blocks = {2};
  CHECK(cmd_inspect_attn(a, log, err) == kBadConfig);
  CHECK(err.str().find("--blocks") != std::string::npos);
  a.blocks = {0};
  a.at_steps = {4};
  CHECK(cmd_inspect_attn(a, log, err) == kBadConfig);
}

TEST_CASE("mouth token mask and ratio") {
  const ToyWorldConfig w;
  const ModelConfig cfg = model_config_for(w);
  const auto mouth = mouth_tokens(cfg, w);
  REQUIRE(static_cast<Index>(mouth.size()) == cfg.video_tokens());
  // 2x2 patches: the lower row of patches holds the mouth
  for (Index i = 0; i < cfg.video_tokens(); ++i) CHECK(mouth[static_cast<std::size_t>(i)] == (i % 4 >= 2));
  MatrixX<double> a2v = MatrixX<double>::Constant(3, cfg.video_tokens(), 0.01);
  for (Index j = 0; j < cfg.video_tokens(); ++j)
    if (mouth[static_cast<std::size_t>(j)]) a2v.col(j).setConstant(0.03);
  CHECK(mouth_ratio(a2v, mouth) == doctest::Approx(3.0));
}
