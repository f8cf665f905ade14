#include "doctest.h"

#include "avdit/cli/checkpoint.hpp"
#include "avdit/cli/config.hpp"
#include "avdit/cli/pgm.hpp"
#include "config_fuzz.hpp"
#include "temp_dir.hpp"
#include "test_util.hpp"

#include <random>

using namespace avdit;
using namespace avdit::cli;
using avdit::testing::slurp;
using avdit::testing::spit;
using avdit::testing::TempDir;
using nlohmann::json;

namespace {

std::string config_error_field(const json& j) {
  try {
    parse_run_config(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<accepted>";
}

json valid_config() { return json::parse(to_json(RunConfig{}).dump()); }

}  // namespace

TEST_CASE("config: empty object gives the defaults") {
  const RunConfig c = parse_run_config(json::object());
  const RunConfig d;
  CHECK(to_json(c) == to_json(d));
  CHECK(c.model.video_frames == c.world.frames);
  CHECK(c.model.audio_frames == c.world.audio_frames());
  CHECK(c.train.hyper.lr == 1e-3);
}

TEST_CASE("config: round trip") {
  json j = valid_config();
  j["model"]["n_blocks"] = 3;
  j["world"]["template_gain"] = 3.5;
  j["world"]["mouth"] = json::array({json::array({1, 1}), json::array({2, 1})});
  j["train"]["stage"] = 2;
  j["train"]["task_cycle"] = {"T2AV", "TV2A", "TI2AV", "TR2AV"};
  j["train"]["seed"] = 18446744073709551615ull;
  j["sample"]["method"] = "heun";
  j["sample"]["task"] = "TR2AV";
  j["paths"]["metrics"] = "m.csv";
  const RunConfig c = parse_run_config(j);
  CHECK(c.model.n_blocks == 3);
  CHECK(c.world.mouth.size() == 2);
  CHECK(c.train.seed == 18446744073709551615ull);
  CHECK(c.sample.method == Integrator::heun);
  CHECK(c.train.metrics_path == "m.csv");
  CHECK(to_json(parse_run_config(json::parse(to_json(c).dump()))) == to_json(c));
}

TEST_CASE("config: field paths in diagnostics") {
  json j = valid_config();
  j["train"]["hyper"]["momentum"] = 0.9;
  CHECK(config_error_field(j) == "train.hyper.momentum");

  j = valid_config();
  j["extra"] = 1;
  CHECK(config_error_field(j) == "extra");

  j = valid_config();
  j["world"]["frames"] = "eight";
  CHECK(config_error_field(j) == "world.frames");

  j = valid_config();
  j["world"]["frames"] = 8.5;
  CHECK(config_error_field(j) == "world.frames");

  j = valid_config();
  j["train"]["stage"] = 2;
  j["train"]["task_cycle"] = {"T2AV", "TTX"};
  CHECK(config_error_field(j) == "train.task_cycle[1]");

  j = valid_config();
  j["train"]["stage"] = 2;
  j["train"]["task_cycle"] = {"T2AV", "TV2A"};
  CHECK(config_error_field(j) == "train.task_cycle");

  j = valid_config();
  j["model"]["patch_h"] = 3;
  CHECK(config_error_field(j).rfind("model.", 0) == 0);

  j = valid_config();
  j["world"]["mouth"] = json::array({json::array({9, 0})});
  CHECK(config_error_field(j) == "world.mouth");

  j = valid_config();
  j["world"]["mouth"][0] = "x";
  CHECK(config_error_field(j) == "world.mouth[0]");

  j = valid_config();
  j["sample"]["steps"] = 0;
  CHECK(config_error_field(j) == "sample.steps");

  j = valid_config();
  j["train"]["seed"] = -1;
  CHECK(config_error_field(j) == "train.seed");

  j = valid_config();
  j["model"]["model_dim"] = 1ll << 40;
  CHECK(config_error_field(j) == "model.model_dim");

  j = valid_config();
  j["train"]["checkpoint_every"] = 10;
  j["paths"]["checkpoint"] = "";
  CHECK(config_error_field(j) == "paths.checkpoint");

  CHECK(config_error_field(json::array()) == "config");
}

TEST_CASE("config: unreadable and malformed files") {
  TempDir dir;
  CHECK_THROWS_AS(load_run_config(dir / "missing.json"), ConfigError);
  spit(dir / "bad.json", "{\"train\": ");
  try {
    load_run_config(dir / "bad.json");
    FAIL("accepted malformed JSON");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "file");
  }
}

TEST_CASE("config fuzz: mutated files are rejected with a field or accepted, never crash") {
  TempDir dir;
  const auto out = testing::fuzz_config_files(valid_config(), 100, 2024, dir);
  INFO(out.first_crash);
  CHECK(out.crashed == 0);
  CHECK(out.accepted + out.rejected == 100);
  CHECK(out.rejected > 30);
}

namespace {

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.config = parse_run_config(json::object());
  std::mt19937_64 rng(8);
  c.params.add("audio.x", testing::random_tensor<float>({3, 4}, rng), true);
  c.params.add("video.y", testing::random_tensor<float>({5}, rng), false);
  c.params.add("z", testing::random_tensor<float>({2, 0}, rng), true);
  c.params.at("audio.x").value[0] = -0.0f;
  c.params.at("audio.x").value[1] = std::numeric_limits<float>::denorm_min();
  OptimizerState opt;
  opt.step = 41;
  opt.moments["audio.x"] = {testing::random_tensor<float>({3, 4}, rng), testing::random_tensor<float>({3, 4}, rng)};
  c.optimizer = opt;
  c.rng_seed = 0xfeedfacecafebeefull;
  c.rng_step = 41;
  return c;
}

bool bits_equal(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), static_cast<std::size_t>(a.numel()) * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("checkpoint round trip is bit-exact") {
  TempDir dir;
  const Checkpoint c = sample_checkpoint();
  save_checkpoint(dir / "a.utlk", c);
  CHECK(!std::filesystem::exists(dir / "a.utlk.tmp"));
  const Checkpoint r = load_checkpoint(dir / "a.utlk");
  REQUIRE(r.params.size() == c.params.size());
  for (Index i = 0; i < c.params.size(); ++i) {
    CHECK(r.params[i].name == c.params[i].name);
    CHECK(r.params[i].trainable == c.params[i].trainable);
    CHECK(bits_equal(r.params[i].value, c.params[i].value));
  }
  REQUIRE(r.optimizer);
  CHECK(r.optimizer->step == 41);
  CHECK(bits_equal(r.optimizer->moments.at("audio.x").m, c.optimizer->moments.at("audio.x").m));
  CHECK(bits_equal(r.optimizer->moments.at("audio.x").v, c.optimizer->moments.at("audio.x").v));
  CHECK(r.rng_seed == c.rng_seed);
  CHECK(r.rng_step == 41);
  CHECK(to_json(r.config) == to_json(c.config));
  save_checkpoint(dir / "b.utlk", r);
  CHECK(slurp(dir / "a.utlk") == slurp(dir / "b.utlk"));
}

TEST_CASE("checkpoint layout") {
  TempDir dir;
  const Checkpoint c = sample_checkpoint();
  save_checkpoint(dir / "a.utlk", c);
  const std::string bytes = slurp(dir / "a.utlk");
  CHECK(bytes.substr(0, 4) == "UTLK");
  std::uint32_t version;
  std::uint64_t len;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&len, bytes.data() + 8, 8);
  CHECK(version == 1);
  const json header = json::parse(bytes.substr(16, len));
  CHECK(header["kind"] == "checkpoint");
  CHECK(header["tensors"].size() == 5);
  // payload: 12 + 5 + 0 params, 2 x 12 moments
  CHECK(bytes.size() - 16 - len == (12 + 5 + 24) * sizeof(float));
  const auto& first = header["tensors"][0];
  CHECK(first["name"] == "audio.x");
  CHECK(first["offset"] == 0);
  float v;
  std::memcpy(&v, bytes.data() + 16 + len + 2 * sizeof(float), sizeof v);
  CHECK(v == c.params.at("audio.x").value[2]);
}

TEST_CASE("checkpoint: corrupt files are rejected") {
  TempDir dir;
  save_checkpoint(dir / "a.utlk", sample_checkpoint());
  const std::string good = slurp(dir / "a.utlk");

  std::string bad = good;
  bad[0] = 'X';
  spit(dir / "b.utlk", bad);
  CHECK_THROWS_AS(load_checkpoint(dir / "b.utlk"), FormatError);

  bad = good;
  bad[4] = 2;
  spit(dir / "b.utlk", bad);
  CHECK_THROWS_AS(load_checkpoint(dir / "b.utlk"), FormatError);

  spit(dir / "b.utlk", good.substr(0, good.size() - 4));
  CHECK_THROWS_AS(load_checkpoint(dir / "b.utlk"), FormatError);

  spit(dir / "b.utlk", good.substr(0, 12));
  CHECK_THROWS_AS(load_checkpoint(dir / "b.utlk"), FormatError);

  CHECK_THROWS(load_checkpoint(dir / "nothing.utlk"));

  save_tensor_dump(dir / "d.utlk", RunConfig{}, {{"audio", Tensor<float>({2, 2})}});
  CHECK_THROWS_AS(load_checkpoint(dir / "d.utlk"), FormatError);
  CHECK_THROWS_AS(load_tensor_dump(dir / "a.utlk"), FormatError);
}

TEST_CASE("tensor dump round trip") {
  TempDir dir;
  std::mt19937_64 rng(3);
  NamedTensors t{{"video", testing::random_tensor<float>({8, 4, 4, 8}, rng)},
                 {"audio", testing::random_tensor<float>({16, 8}, rng)}};
  save_tensor_dump(dir / "x.utlk", RunConfig{}, t);
  const auto r = load_tensor_dump(dir / "x.utlk");
  REQUIRE(r.size() == 2);
  CHECK(r[0].first == "video");
  CHECK(bits_equal(r[0].second, t[0].second));
  CHECK(bits_equal(r[1].second, t[1].second));
  const json header = json::parse(slurp(dir / "x.utlk").substr(16, [&] {
    std::uint64_t len;
    std::memcpy(&len, slurp(dir / "x.utlk").data() + 8, 8);
    return len;
  }()));
  CHECK(!header.contains("optimizer"));
}

TEST_CASE("pgm export") {
  TempDir dir;
  MatrixX<double> m(2, 3);
  m << -1.0, 0.0, 1.0, 0.5, -0.5, 3.0;
  write_pgm(dir / "a.pgm", m);
  const std::string bytes = slurp(dir / "a.pgm");
  CHECK(bytes.substr(0, 11) == "P5\n3 2\n255\n");
  CHECK(bytes.size() == 11 + 6);
  const GrayImage img = read_pgm(dir / "a.pgm");
  CHECK(img.width == 3);
  CHECK(img.height == 2);
  CHECK(img.pixels[0] == 0);
  CHECK(img.pixels[5] == 255);
  CHECK(img.pixels[1] == 64);  // 1/4 of the range, rounded

  CHECK(to_gray(MatrixX<double>::Constant(2, 2, 7.0)).pixels == std::vector<std::uint8_t>(4, 0));
  m(0, 0) = std::nan("");
  CHECK_THROWS_AS(to_gray(m), NumericError);
  spit(dir / "b.pgm", "P5\n3 2\n255\nabc");
  CHECK_THROWS(read_pgm(dir / "b.pgm"));
}
