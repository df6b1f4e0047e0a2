#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "vdial/checkpoint.hpp"

namespace vdial {

using Log = std::function<void(const std::string&)>;

inline synth::Dataset obtain_dataset(const ExperimentConfig& cfg) {
  if (cfg.data_dir.empty()) return synth::generate_dataset(cfg.data);
  const std::filesystem::path dir(cfg.data_dir);
  require(std::filesystem::exists(dir / "manifest.jsonl"), ErrorKind::DatasetMissing,
          "no dataset manifest in " + dir.string());
  return read_dataset(dir, cfg.data.fps);
}

inline Vocab experiment_vocab(const synth::Dataset& data, const ExperimentConfig& cfg) {
  return build_vocab(dataset_corpus(data), cfg.vocab_max);
}

/// Samples of one split, filtered to a question subset and thinned to at
/// most `limit` evenly spaced samples (0 = no limit).
inline std::vector<const DialogSample*> select_samples(const synth::Dataset& data, std::string_view split,
                                                       EvalSubset subset = EvalSubset::All, std::size_t limit = 0) {
  std::vector<const DialogSample*> out;
  for (const DialogSample* s : data.split(split)) {
    if (subset == EvalSubset::Visual && !synth::visually_determined(s->question_type)) continue;
    if (subset == EvalSubset::Coreference && !s->coreference) continue;
    out.push_back(s);
  }
  if (limit == 0 || out.size() <= limit) return out;
  std::vector<const DialogSample*> thinned;
  for (std::size_t i = 0; i < limit; ++i) thinned.push_back(out[i * out.size() / limit]);
  return thinned;
}

struct EvalReport {
  Task task = Task::Retrieval;
  std::optional<GenerationEval> generation;
  std::map<int, GenerativeReport> generation_by_round;
  std::optional<RetrievalEval> retrieval;

  std::map<std::string, double> metrics() const {
    if (retrieval) {
      const auto& r = retrieval->report;
      return {{"mrr", r.mrr}, {"r@1", r.r_at_1}, {"r@5", r.r_at_5}, {"r@10", r.r_at_10}, {"mean_rank", r.mean_rank}};
    }
    const auto& g = generation->report;
    return {{"bleu2", g.bleu2},     {"bleu3", g.bleu3},   {"bleu4", g.bleu4},
            {"meteor", g.meteor},   {"rouge_l", g.rouge_l}, {"cider", g.cider},
            {"token_accuracy", generation->token_accuracy}, {"exact_match", generation->exact_match}};
  }

  /// The metric a comparison table leads with.
  std::string primary_metric() const { return retrieval ? "mrr" : "cider"; }

  std::map<std::string, double> round_metrics(int round) const {
    if (retrieval) {
      auto it = retrieval->by_round.find(round);
      if (it == retrieval->by_round.end()) return {};
      return {{"mrr", it->second.mrr}, {"r@1", it->second.r_at_1}, {"mean_rank", it->second.mean_rank},
              {"count", static_cast<double>(it->second.count)}};
    }
    auto it = generation_by_round.find(round);
    if (it == generation_by_round.end()) return {};
    return {{"bleu4", it->second.bleu4}, {"cider", it->second.cider}, {"rouge_l", it->second.rouge_l},
            {"count", static_cast<double>(it->second.corpus_size)}};
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["task"] = to_string(task);
    j["metrics"] = metrics();
    nlohmann::json rounds = nlohmann::json::object();
    std::vector<int> keys;
    if (retrieval)
      for (const auto& [r, unused] : retrieval->by_round) keys.push_back(r);
    else
      for (const auto& [r, unused] : generation_by_round) keys.push_back(r);
    for (int r : keys) rounds[std::to_string(r)] = round_metrics(r);
    j["by_round"] = rounds;
    return j;
  }
};

inline EvalReport evaluate_model(const VideoDialogModel& model, const synth::Dataset& data,
                                 const std::vector<const DialogSample*>& samples, const ContextOptions& opts = {}) {
  EvalReport rep;
  rep.task = model.config().task;
  if (rep.task == Task::Retrieval) {
    rep.retrieval = evaluate_retrieval(model, data, samples, opts);
    return rep;
  }
  rep.generation = evaluate_generation(model, data, samples, opts);
  std::map<int, std::pair<std::vector<std::string>, std::vector<std::string>>> grouped;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& [cands, refs] = grouped[samples[i]->round];
    cands.push_back(rep.generation->predictions[i]);
    refs.push_back(rep.generation->references[i]);
  }
  for (const auto& [round, pair] : grouped)
    if (pair.first.size() >= 2) rep.generation_by_round[round] = generative_report(pair.first, pair.second);
  return rep;
}

/// Larger is better: validation MRR for retrieval, negated teacher-forced
/// reconstruction loss for generation.
inline Monitor validation_monitor(const synth::Dataset& data, std::vector<const DialogSample*> val) {
  return {[&data, val = std::move(val)](const VideoDialogModel& m) {
            if (m.config().task == Task::Retrieval) return evaluate_retrieval(m, data, val).report.mrr;
            return -evaluate_generation(m, data, val, {}, false).loss;
          },
          std::nullopt};
}

struct RunOutcome {
  std::unique_ptr<VideoDialogModel> model;
  TrainResult train;
  EvalReport test;
  Checkpoint checkpoint;
};

/// Trains one configuration with early stopping on the validation split and
/// evaluates the restored best parameters on the test split.
inline RunOutcome run_experiment(const ExperimentConfig& cfg, const synth::Dataset& data, const Log& log = {}) {
  cfg.validate();
  require(cfg.profile == "toy", ErrorKind::ConfigInvalid, "the paper profile validates shapes only and cannot train");
  RunOutcome out;
  out.model = std::make_unique<VideoDialogModel>(cfg.model_config(), experiment_vocab(data, cfg), *cfg.seed);
  Trainer trainer(*out.model, data, data.split("train"), cfg.train_config());
  const Monitor monitor = validation_monitor(data, select_samples(data, "val", EvalSubset::All, cfg.eval_limit));
  out.train = trainer.run(&monitor, [&](const StepRecord& r) {
    if (log && (r.step % 10 == 0 || r.step == 1)) {
      std::ostringstream line;
      line << "step " << r.step << " loss " << r.loss;
      log(line.str());
    }
  });
  if (log) {
    for (const auto& e : out.train.evals) {
      std::ostringstream line;
      line << "eval step " << e.step << " metric " << e.metric;
      log(line.str());
    }
  }
  out.checkpoint = capture_checkpoint(trainer, config_hash(cfg));
  out.test = evaluate_model(*out.model, data, select_samples(data, "test", cfg.eval_subset));
  return out;
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

inline constexpr std::array<int, 4> kReportedRounds = {1, 3, 5, 10};

inline std::vector<std::string> default_axis_values(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::Blocks: return {"none", "b5", "b4+b5"};
    case AblationAxis::Frames: return {"6", "16", "32", "40"};
    case AblationAxis::Rounds: return {"1", "3", "5", "10"};
    case AblationAxis::JointVsFrozen: return {"text_only", "frozen", "joint"};
    case AblationAxis::AudioOnOff: return {"off", "on"};
    case AblationAxis::None: return {"base"};
  }
  return {};
}

/// The configuration for one value of an axis. Round values leave the
/// configuration unchanged: rounds are sliced at evaluation time.
inline ExperimentConfig apply_axis(ExperimentConfig cfg, AblationAxis axis, const std::string& value) {
  switch (axis) {
    case AblationAxis::None: break;
    case AblationAxis::Blocks: {
      cfg.trainable_blocks = config_detail::parse_blocks("blocks", value);
      for (int b : cfg.trainable_blocks)
        require(b == 4 || b == 5, ErrorKind::ConfigInvalid, "block ablation values are none, b5, b4+b5");
      cfg.use_video = true;
      break;
    }
    case AblationAxis::Frames: {
      const auto n = config_detail::parse_number<std::size_t>("frames", value);
      require(n == 4 || n == 6 || n == 16 || n == 32 || n == 40, ErrorKind::ConfigInvalid,
              "frame ablation values are 4, 6, 16, 32, 40");
      cfg.data.frames = n;
      break;
    }
    case AblationAxis::Rounds: {
      const auto r = config_detail::parse_number<int>("rounds", value);
      require(r >= 1 && r <= 10, ErrorKind::ConfigInvalid, "round values must be in [1, 10]");
      break;
    }
    case AblationAxis::JointVsFrozen:
      if (value == "text_only") {
        cfg.use_video = false;
      } else if (value == "frozen") {
        cfg.use_video = true;
        cfg.trainable_blocks = {};
      } else if (value == "joint") {
        cfg.use_video = true;
        cfg.trainable_blocks = {4, 5};
      } else {
        fail(ErrorKind::ConfigInvalid, "joint_vs_frozen values are text_only, frozen, joint");
      }
      break;
    case AblationAxis::AudioOnOff:
      require(value == "on" || value == "off", ErrorKind::ConfigInvalid, "audio values are on, off");
      cfg.use_audio = value == "on";
      break;
  }
  return cfg;
}

struct AblationCell {
  std::string value;
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;
  std::size_t steps = 0;
};

struct AblationTable {
  AblationAxis axis = AblationAxis::None;
  std::string primary = "mrr";
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds;
  std::vector<AblationCell> cells;

  std::vector<double> per_seed(const std::string& value, const std::string& metric) const {
    std::vector<double> out;
    for (const auto& c : cells)
      if (c.value == value) out.push_back(c.metrics.at(metric));
    return out;
  }

  double mean(const std::string& value, const std::string& metric) const {
    const auto v = per_seed(value, metric);
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  }

  /// Sample standard deviation over seeds (0 for a single seed).
  double spread(const std::string& value, const std::string& metric) const {
    const auto v = per_seed(value, metric);
    if (v.size() < 2) return 0.0;
    const double m = mean(value, metric);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
  }

  std::string to_text() const {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(4);
    out << "axis: " << to_string(axis) << "  metric: " << primary << "\n";
    out << "value";
    for (auto s : seeds) out << "\tseed " << s;
    out << "\tmean\tstd\n";
    for (const auto& v : values) {
      out << v;
      for (double x : per_seed(v, primary)) out << "\t" << x;
      out << "\t" << mean(v, primary) << "\t" << spread(v, primary) << "\n";
    }
    return out.str();
  }

  std::string to_jsonl() const {
    std::string out;
    for (const auto& c : cells) {
      nlohmann::json j{{"axis", to_string(axis)}, {"value", c.value}, {"seed", c.seed},
                       {"metrics", c.metrics}, {"steps", c.steps}};
      out += j.dump() + "\n";
    }
    return out;
  }
};

/// One run per (value, seed); the rounds axis trains once per seed and
/// reads each round's slice. Cells run on `threads` workers; results land
/// in fixed slots, so the table does not depend on scheduling.
inline AblationTable run_ablation(const ExperimentConfig& base, AblationAxis axis, std::vector<std::string> values,
                                  std::size_t threads = 1, const Log& log = {}) {
  base.validate();
  if (values.empty()) values = default_axis_values(axis);
  for (const auto& v : values) (void)apply_axis(base, axis, v);

  AblationTable table;
  table.axis = axis;
  table.values = values;
  table.primary = base.task == Task::Retrieval ? "mrr" : "cider";
  for (std::size_t i = 0; i < base.seeds; ++i) table.seeds.push_back(*base.seed + i);

  const bool per_round = axis == AblationAxis::Rounds;
  struct Job {
    std::string value;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (const auto& v : per_round ? std::vector<std::string>{"all"} : values)
    for (auto s : table.seeds) jobs.push_back({v, s});

  std::map<std::size_t, synth::Dataset> datasets;  // keyed by frame count
  for (const auto& job : jobs) {
    const auto cfg = per_round ? base : apply_axis(base, axis, job.value);
    if (!datasets.contains(cfg.data.frames)) datasets.emplace(cfg.data.frames, obtain_dataset(cfg));
  }

  std::vector<std::vector<AblationCell>> results(jobs.size());
  std::vector<std::exception_ptr> errors(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs.size(); j = next++) {
      try {
        auto cfg = per_round ? base : apply_axis(base, axis, jobs[j].value);
        cfg.seed = jobs[j].seed;
        const Log cell_log = [&, j](const std::string& line) {
          if (!log) return;
          std::lock_guard lock(log_mutex);
          log("[" + jobs[j].value + " seed " + std::to_string(jobs[j].seed) + "] " + line);
        };
        const RunOutcome run = run_experiment(cfg, datasets.at(cfg.data.frames), cell_log);
        if (per_round) {
          for (const auto& v : values)
            results[j].push_back({v, jobs[j].seed, run.test.round_metrics(std::stoi(v)), run.train.steps});
        } else {
          results[j].push_back({jobs[j].value, jobs[j].seed, run.test.metrics(), run.train.steps});
        }
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (const auto& v : values)
    for (const auto& r : results)
      for (const auto& c : r)
        if (c.value == v) table.cells.push_back(c);
  return table;
}

}  // namespace vdial
