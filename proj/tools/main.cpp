#include "avdit/cli/commands.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace avdit;
using namespace avdit::cli;

int main(int argc, char** argv) {
  CLI::App app{"toy dual-stream audio-video flow-matching transformer"};
  app.require_subcommand(1);

  TrainArgs train;
  std::uint64_t train_seed = 0;
  auto* t = app.add_subcommand("train", "train one stage from a JSON config");
  t->add_option("--config", train.config, "run config")->required();
  t->add_option("--resume", train.resume, "checkpoint to continue from");
  auto* t_seed = t->add_option("--seed", train_seed, "override train.seed");

  SampleArgs sample;
  std::string s_task;
  double s_omega = 0.0;
  Index s_steps = 0;
  auto* s = app.add_subcommand("sample", "generate one sample and dump it");
  s->add_option("--checkpoint", sample.checkpoint)->required();
  auto* s_task_opt = s->add_option("--task", s_task, "TTS, T2AV, TV2A, TI2AV or TR2AV");
  auto* s_omega_opt = s->add_option("--omega", s_omega, "guidance scale");
  auto* s_steps_opt = s->add_option("--steps", s_steps, "sampler steps");
  s->add_option("--seed", sample.seed);
  s->add_option("--out", sample.out, "output directory");

  EvalArgs eval;
  double e_omega = 0.0;
  Index e_steps = 0;
  auto* e = app.add_subcommand("eval", "sync / adherence / timbre report");
  e->add_option("--checkpoint", eval.checkpoint)->required();
  e->add_option("--n-samples", eval.n_samples, "samples per task");
  e->add_option("--seed", eval.seed);
  auto* e_omega_opt = e->add_option("--omega", e_omega);
  auto* e_steps_opt = e->add_option("--steps", e_steps);
  e->add_option("--out", eval.out, "directory for report.txt / report.json");

  InspectArgs inspect;
  std::string i_task;
  double i_omega = 0.0;
  Index i_steps = 0;
  auto* i = app.add_subcommand("inspect-attn", "export joint-attention maps as PGM");
  i->add_option("--checkpoint", inspect.checkpoint)->required();
  i->add_option("--seed", inspect.seed);
  auto* i_task_opt = i->add_option("--task", i_task);
  i->add_option("--blocks", inspect.blocks, "block indices (default all)")->delimiter(',');
  i->add_option("--at-steps", inspect.at_steps, "sampler steps (default first, middle, last)")->delimiter(',');
  auto* i_omega_opt = i->add_option("--omega", i_omega);
  auto* i_steps_opt = i->add_option("--steps", i_steps);
  i->add_option("--out", inspect.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : kBadConfig;
  }

  if (*t) {
    if (*t_seed) train.seed = train_seed;
    return cmd_train(train, std::cout, std::cerr);
  }
  if (*s) {
    if (*s_task_opt) sample.task = s_task;
    if (*s_omega_opt) sample.omega = s_omega;
    if (*s_steps_opt) sample.steps = s_steps;
    return cmd_sample(sample, std::cout, std::cerr);
  }
  if (*e) {
    if (*e_omega_opt) eval.omega = e_omega;
    if (*e_steps_opt) eval.steps = e_steps;
    return cmd_eval(eval, std::cout, std::cerr);
  }
  if (*i_task_opt) inspect.task = i_task;
  if (*i_omega_opt) inspect.omega = i_omega;
  if (*i_steps_opt) inspect.steps = i_steps;
  return cmd_inspect_attn(inspect, std::cout, std::cerr);
}
