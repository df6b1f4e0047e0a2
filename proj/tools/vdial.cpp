// Command-line front end: gen-data, train, eval, ablate, score.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "vdial/experiment.hpp"

namespace fs = std::filesystem;
using namespace vdial;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ConfigInvalid:
    case ErrorKind::ConfigHashMismatch: return kExitConfig;
    case ErrorKind::IoError:
    case ErrorKind::FormatVersionMismatch:
    case ErrorKind::DatasetMissing: return kExitIo;
    default: return kExitFailure;
  }
}

std::size_t thread_count() {
  const char* v = std::getenv("VDIALOG_THREADS");
  if (!v) return 1;
  const long n = std::strtol(v, nullptr, 10);
  return n > 0 ? static_cast<std::size_t>(n) : 1;
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value config file");
  cmd->add_option("--seed", c.seed, "master seed (overrides the config)");
  cmd->add_option("--out-dir", c.out_dir, "output directory");
  cmd->add_option("--set", c.overrides, "extra key=value overrides");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  for (const auto& kv : c.overrides) cfg = parse_config(kv, cfg);
  if (c.seed) cfg.seed = c.seed;
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) { io::write_file_atomic(path, text); }

std::vector<std::string> read_lines(const std::string& path) {
  std::istringstream in(io::read_file(path));
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  return lines;
}

Log stderr_log() {
  return [](const std::string& line) { std::cerr << line << "\n"; };
}

int cmd_gen_data(const Common& c) {
  ExperimentConfig cfg = resolve(c);
  if (c.seed) cfg.data.seed = *c.seed;
  if (!cfg.seed) cfg.seed = cfg.data.seed;
  cfg.validate();
  const auto data = synth::generate_dataset(cfg.data);
  write_dataset(data, c.out_dir);
  std::cout << "wrote " << data.samples.size() << " samples, " << data.clips.size() << " clips to " << c.out_dir << "\n";
  return kExitOk;
}

int cmd_train(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  cfg.validate();
  const auto data = obtain_dataset(cfg);
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  std::string loss_log;
  const RunOutcome run = run_experiment(cfg, data, stderr_log());
  for (const auto& r : run.train.losses) loss_log += nlohmann::json{{"step", r.step}, {"loss", r.loss}}.dump() + "\n";
  for (const auto& e : run.train.evals)
    loss_log += nlohmann::json{{"step", e.step}, {"validation", e.metric}}.dump() + "\n";
  write_text(out / "config.txt", to_text(cfg));
  write_text(out / "train_log.jsonl", loss_log);
  save_checkpoint(out / "checkpoint.bin", run.checkpoint);
  nlohmann::json report = run.test.to_json();
  report["best_step"] = run.train.best_step;
  report["steps"] = run.train.steps;
  write_text(out / "report.json", report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return kExitOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& split, const std::string& subset,
             bool strip_history) {
  ExperimentConfig cfg = resolve(c);
  if (!subset.empty()) set_config_value(cfg, "eval_subset", subset);
  cfg.validate();
  const Checkpoint ckpt = load_checkpoint(checkpoint, config_hash(cfg));
  const auto data = obtain_dataset(cfg);
  VideoDialogModel model(cfg.model_config(), Vocab::from_tokens(ckpt.vocab), *cfg.seed);
  restore_parameters(model, ckpt);
  const auto samples = select_samples(data, split, cfg.eval_subset);
  require(!samples.empty(), ErrorKind::ConfigInvalid, "no samples in split " + split);
  const EvalReport rep = evaluate_model(model, data, samples, {strip_history});
  std::cout << rep.to_json().dump(2) << "\n";
  return kExitOk;
}

int cmd_ablate(const Common& c, const std::string& axis_name, std::vector<std::string> values,
               std::optional<std::size_t> seeds) {
  ExperimentConfig cfg = resolve(c);
  if (!axis_name.empty()) cfg.axis = parse_axis(axis_name);
  if (!values.empty()) cfg.axis_values = values;
  if (seeds) cfg.seeds = *seeds;
  require(cfg.axis != AblationAxis::None, ErrorKind::ConfigInvalid, "ablate needs an axis");
  const AblationTable table = run_ablation(cfg, cfg.axis, cfg.axis_values, thread_count(), stderr_log());
  const fs::path out(c.out_dir);
  fs::create_directories(out);
  write_text(out / "ablation.txt", table.to_text());
  write_text(out / "ablation.jsonl", table.to_jsonl());
  std::cout << table.to_text();
  return kExitOk;
}

int cmd_score(const std::string& candidates, const std::string& references, const std::string& ranks) {
  nlohmann::json out;
  if (!ranks.empty()) {
    std::vector<std::size_t> r;
    for (const auto& line : read_lines(ranks))
      if (!line.empty()) r.push_back(config_detail::parse_number<std::size_t>("rank", line));
    const auto rep = retrieval_report(r);
    out = {{"mrr", rep.mrr}, {"r@1", rep.r_at_1}, {"r@5", rep.r_at_5}, {"r@10", rep.r_at_10},
           {"mean_rank", rep.mean_rank}, {"count", rep.count}};
  } else {
    require(!candidates.empty() && !references.empty(), ErrorKind::ConfigInvalid,
            "score needs --candidates and --references, or --ranks");
    const auto rep = generative_report(read_lines(candidates), read_lines(references));
    out = {{"bleu2", rep.bleu2}, {"bleu3", rep.bleu3},     {"bleu4", rep.bleu4}, {"meteor", rep.meteor},
           {"rouge_l", rep.rouge_l}, {"cider", rep.cider}, {"count", rep.corpus_size}};
  }
  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video-grounded dialog: data generation, training, evaluation and ablations"};
  app.require_subcommand(1);

  Common gen, train, eval, ablate;
  auto* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic dataset into --out-dir");
  add_common(gen_cmd, gen);

  auto* train_cmd = app.add_subcommand("train", "train one configuration and evaluate on the test split");
  add_common(train_cmd, train);

  std::string checkpoint, split = "test", subset;
  bool strip_history = false;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, eval);
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--split", split, "train, val or test");
  eval_cmd->add_option("--subset", subset, "all, visual or coreference");
  eval_cmd->add_flag("--strip-history", strip_history, "drop earlier rounds from every context");

  std::string axis;
  std::vector<std::string> values;
  std::optional<std::size_t> seeds;
  auto* ablate_cmd = app.add_subcommand("ablate", "train one run per axis value and seed, emit a table");
  add_common(ablate_cmd, ablate);
  ablate_cmd->add_option("--axis", axis, "blocks, frames, rounds, joint_vs_frozen, audio_on_off");
  ablate_cmd->add_option("--values", values, "axis values (default: the standard grid)")->delimiter(',');
  ablate_cmd->add_option("--seeds", seeds, "number of seeds");

  std::string candidates, references, ranks;
  auto* score_cmd = app.add_subcommand("score", "score generated answers or retrieval ranks");
  score_cmd->add_option("--candidates", candidates, "one generated answer per line");
  score_cmd->add_option("--references", references, "one reference per line");
  score_cmd->add_option("--ranks", ranks, "one 1-based rank per line");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(train);
    if (*eval_cmd) return cmd_eval(eval, checkpoint, split, subset, strip_history);
    if (*ablate_cmd) return cmd_ablate(ablate, axis, values, seeds);
    if (*score_cmd) return cmd_score(candidates, references, ranks);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
