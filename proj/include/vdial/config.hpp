#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vdial/train.hpp"

namespace vdial {

enum class AblationAxis { None, Blocks, Frames, Rounds, JointVsFrozen, AudioOnOff };

inline const char* to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::None: return "none";
    case AblationAxis::Blocks: return "blocks";
    case AblationAxis::Frames: return "frames";
    case AblationAxis::Rounds: return "rounds";
    case AblationAxis::JointVsFrozen: return "joint_vs_frozen";
    case AblationAxis::AudioOnOff: return "audio_on_off";
  }
  return "none";
}

inline AblationAxis parse_axis(const std::string& s) {
  for (auto a : {AblationAxis::None, AblationAxis::Blocks, AblationAxis::Frames, AblationAxis::Rounds,
                 AblationAxis::JointVsFrozen, AblationAxis::AudioOnOff})
    if (s == to_string(a)) return a;
  fail(ErrorKind::ConfigInvalid, "unknown ablation axis " + s);
}

/// Which test questions a held-out evaluation scores.
enum class EvalSubset { All, Visual, Coreference };

inline const char* to_string(EvalSubset e) {
  return e == EvalSubset::All ? "all" : e == EvalSubset::Visual ? "visual" : "coreference";
}

/// Everything one run needs. Serialized as `key = value` lines; `#` starts
/// a comment. Unknown keys are rejected.
struct ExperimentConfig {
  Task task = Task::Retrieval;
  std::string profile = "toy";
  std::optional<std::uint64_t> seed;

  // model
  std::size_t d_model = 64;
  std::size_t heads = 2;
  std::size_t layers = 2;
  std::size_t d_ff = 128;
  BlockMode block_mode = BlockMode::StandardResidual;
  std::size_t decoder_layers = 2;
  std::size_t vocab_max = 512;
  std::size_t max_words = 100;
  bool use_video = true;
  bool use_audio = true;
  std::set<int> trainable_blocks{4, 5};
  std::set<int> taps{5};
  Pooling pooling = Pooling::FirstToken;
  double w_vta = 1.0;
  double w_nsp = 1.0;

  // data
  std::string data_dir;  // empty: generate in memory from the fields below
  synth::SynthConfig data;

  // optimizer / loop
  double lr = 3e-4;
  std::size_t batch = 8;
  std::size_t max_steps = 600;
  std::size_t eval_every = 100;
  std::size_t patience = 5;
  std::optional<double> mask_rate;  // default: 0.15 generative, 0.10 retrieval
  std::size_t k_negatives = 7;
  std::size_t eval_limit = 0;       // 0 = every validation sample
  EvalSubset eval_subset = EvalSubset::All;

  // ablation
  AblationAxis axis = AblationAxis::None;
  std::vector<std::string> axis_values;
  std::size_t seeds = 3;

  /// Recorded reference settings: 768-wide, 6 layers, lr 5e-5, batch 64
  /// (16 for retrieval). Shape validation only.
  static ExperimentConfig paper(Task task) {
    ExperimentConfig c;
    c.task = task;
    c.profile = "paper";
    c.d_model = 768;
    c.heads = 12;
    c.layers = 6;
    c.d_ff = 3072;
    c.decoder_layers = 6;
    c.vocab_max = 30522;
    c.max_words = task == Task::Retrieval ? 200 : 100;
    c.taps = {4, 5};
    c.lr = 5e-5;
    c.batch = task == Task::Retrieval ? 16 : 64;
    c.data.frame_size = 224;
    return c;
  }

  double effective_mask_rate() const { return mask_rate.value_or(task == Task::Generative ? 0.15 : 0.10); }

  ModelConfig model_config() const {
    ModelConfig m;
    if (profile == "paper") m = ModelConfig::paper(task);
    m.task = task;
    m.profile = profile;
    m.transformer = {layers, heads, d_model, d_ff, block_mode};
    m.decoder_layers = decoder_layers;
    m.vocab_max = vocab_max;
    m.text.max_words = max_words;
    m.use_video = use_video;
    m.use_audio = use_audio;
    m.visual.trainable_blocks = trainable_blocks;
    m.visual.taps = taps;
    m.visual.frames = data.frames;
    m.visual.frame_size = data.frame_size;
    m.visual.fps = data.fps;
    m.audio_dim = data.audio_dim;
    m.pooling = pooling;
    m.w_vta = w_vta;
    m.w_nsp = w_nsp;
    return m;
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.max_steps = max_steps;
    t.batch = batch;
    t.adam.lr = lr;
    t.eval_every = eval_every;
    t.patience = patience;
    t.mask_rate = effective_mask_rate();
    t.k_negatives = k_negatives;
    t.seed = seed.value_or(0);
    return t;
  }

  void validate() const {
    require(seed.has_value(), ErrorKind::ConfigInvalid, "seed is mandatory");
    require(profile == "toy" || profile == "paper", ErrorKind::ConfigInvalid, "profile must be toy or paper");
    model_config().validate();
    require(lr > 0.0 && batch >= 1 && max_steps >= 1 && eval_every >= 1, ErrorKind::ConfigInvalid,
            "optimizer settings must be positive");
    const double rate = effective_mask_rate();
    require(rate > 0.0 && rate < 1.0, ErrorKind::ConfigInvalid, "mask_rate must be in (0, 1)");
    require(k_negatives >= 1 && k_negatives < data.pool_size, ErrorKind::ConfigInvalid,
            "k_negatives must be in [1, pool_size)");
    require(data.dialogs >= 3 && data.rounds >= 1 && data.rounds <= 10, ErrorKind::ConfigInvalid, "data sizes");
    require(data.frames >= 1 && data.frames <= 64, ErrorKind::ConfigInvalid, "frames must be in [1, 64]");
    require(seeds >= 1, ErrorKind::ConfigInvalid, "seeds must be positive");
  }
};

namespace config_detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  require(ec == std::errc() && ptr == v.data() + v.size(), ErrorKind::ConfigInvalid,
          "bad numeric value for " + key + ": '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  fail(ErrorKind::ConfigInvalid, "bad boolean for " + key + ": '" + v + "'");
}

/// "none", "b5", "b4+b5", "4,5" all name block sets.
inline std::set<int> parse_blocks(const std::string& key, const std::string& v) {
  std::set<int> out;
  if (v == "none" || v.empty()) return out;
  std::string norm = v;
  for (char& c : norm)
    if (c == '+') c = ',';
  for (auto item : split_list(norm)) {
    if (!item.empty() && item[0] == 'b') item.erase(0, 1);
    out.insert(parse_number<int>(key, item));
  }
  return out;
}

inline std::string blocks_string(const std::set<int>& blocks) {
  if (blocks.empty()) return "none";
  std::string out;
  for (int b : blocks) out += (out.empty() ? "b" : "+b") + std::to_string(b);
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace config_detail

inline void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& v) {
  using namespace config_detail;
  auto size = [&] { return parse_number<std::size_t>(key, v); };
  auto real = [&] { return parse_number<double>(key, v); };
  if (key == "task") {
    require(v == "generative" || v == "retrieval", ErrorKind::ConfigInvalid, "task must be generative or retrieval");
    c.task = v == "generative" ? Task::Generative : Task::Retrieval;
  } else if (key == "profile") c.profile = v;
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "d_model") c.d_model = size();
  else if (key == "heads") c.heads = size();
  else if (key == "layers") c.layers = size();
  else if (key == "d_ff") c.d_ff = size();
  else if (key == "block_mode") {
    require(v == "standard" || v == "literal_sum", ErrorKind::ConfigInvalid, "block_mode must be standard or literal_sum");
    c.block_mode = v == "standard" ? BlockMode::StandardResidual : BlockMode::LiteralSum;
  } else if (key == "decoder_layers") c.decoder_layers = size();
  else if (key == "vocab_max") c.vocab_max = size();
  else if (key == "max_words") c.max_words = size();
  else if (key == "use_video") c.use_video = parse_bool(key, v);
  else if (key == "use_audio") c.use_audio = parse_bool(key, v);
  else if (key == "trainable_blocks") c.trainable_blocks = parse_blocks(key, v);
  else if (key == "taps") c.taps = parse_blocks(key, v);
  else if (key == "pooling") {
    require(v == "first" || v == "mean", ErrorKind::ConfigInvalid, "pooling must be first or mean");
    c.pooling = v == "first" ? Pooling::FirstToken : Pooling::Mean;
  } else if (key == "w_vta") c.w_vta = real();
  else if (key == "w_nsp") c.w_nsp = real();
  else if (key == "data_dir") c.data_dir = v;
  else if (key == "dialogs") c.data.dialogs = size();
  else if (key == "rounds") c.data.rounds = size();
  else if (key == "frames") c.data.frames = size();
  else if (key == "frame_size") c.data.frame_size = size();
  else if (key == "fps") c.data.fps = real();
  else if (key == "audio_steps") c.data.audio_steps = size();
  else if (key == "audio_dim") c.data.audio_dim = size();
  else if (key == "pool_size") c.data.pool_size = size();
  else if (key == "val_fraction") c.data.val_fraction = real();
  else if (key == "test_fraction") c.data.test_fraction = real();
  else if (key == "data_seed") c.data.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "lr") c.lr = real();
  else if (key == "batch") c.batch = size();
  else if (key == "max_steps") c.max_steps = size();
  else if (key == "eval_every") c.eval_every = size();
  else if (key == "patience") c.patience = size();
  else if (key == "mask_rate") c.mask_rate = real();
  else if (key == "k_negatives") c.k_negatives = size();
  else if (key == "eval_limit") c.eval_limit = size();
  else if (key == "eval_subset") {
    if (v == "all") c.eval_subset = EvalSubset::All;
    else if (v == "visual") c.eval_subset = EvalSubset::Visual;
    else if (v == "coreference") c.eval_subset = EvalSubset::Coreference;
    else fail(ErrorKind::ConfigInvalid, "eval_subset must be all, visual or coreference");
  } else if (key == "axis") c.axis = parse_axis(v);
  else if (key == "axis_values") c.axis_values = split_list(v);
  else if (key == "seeds") c.seeds = size();
  else fail(ErrorKind::ConfigInvalid, "unknown config key '" + key + "'");
}

inline ExperimentConfig parse_config(const std::string& text, ExperimentConfig base = {}) {
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::ConfigInvalid, "line " + std::to_string(number) + ": expected key = value");
    set_config_value(base, config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
  }
  return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::IoError, "cannot read config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

/// Keys that determine the parameter set and its meaning, in canonical form.
inline std::vector<std::pair<std::string, std::string>> model_keys(const ExperimentConfig& c) {
  using namespace config_detail;
  return {{"task", to_string(c.task)},
          {"profile", c.profile},
          {"d_model", std::to_string(c.d_model)},
          {"heads", std::to_string(c.heads)},
          {"layers", std::to_string(c.layers)},
          {"d_ff", std::to_string(c.d_ff)},
          {"block_mode", c.block_mode == BlockMode::StandardResidual ? "standard" : "literal_sum"},
          {"decoder_layers", std::to_string(c.decoder_layers)},
          {"vocab_max", std::to_string(c.vocab_max)},
          {"max_words", std::to_string(c.max_words)},
          {"use_video", c.use_video ? "true" : "false"},
          {"use_audio", c.use_audio ? "true" : "false"},
          {"trainable_blocks", blocks_string(c.trainable_blocks)},
          {"taps", blocks_string(c.taps)},
          {"pooling", c.pooling == Pooling::FirstToken ? "first" : "mean"},
          {"w_vta", format_double(c.w_vta)},
          {"w_nsp", format_double(c.w_nsp)},
          {"frames", std::to_string(c.data.frames)},
          {"frame_size", std::to_string(c.data.frame_size)},
          {"audio_steps", std::to_string(c.data.audio_steps)},
          {"audio_dim", std::to_string(c.data.audio_dim)}};
}

/// Round-trippable text form of every key.
inline std::string to_text(const ExperimentConfig& c) {
  using namespace config_detail;
  std::string out;
  auto put = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
  if (c.seed) put("seed", std::to_string(*c.seed));
  for (const auto& [k, v] : model_keys(c))
    if (k != "frames" && k != "frame_size" && k != "audio_steps" && k != "audio_dim") put(k, v);
  if (!c.data_dir.empty()) put("data_dir", c.data_dir);
  put("dialogs", std::to_string(c.data.dialogs));
  put("rounds", std::to_string(c.data.rounds));
  put("frames", std::to_string(c.data.frames));
  put("frame_size", std::to_string(c.data.frame_size));
  put("fps", format_double(c.data.fps));
  put("audio_steps", std::to_string(c.data.audio_steps));
  put("audio_dim", std::to_string(c.data.audio_dim));
  put("pool_size", std::to_string(c.data.pool_size));
  put("val_fraction", format_double(c.data.val_fraction));
  put("test_fraction", format_double(c.data.test_fraction));
  put("data_seed", std::to_string(c.data.seed));
  put("lr", format_double(c.lr));
  put("batch", std::to_string(c.batch));
  put("max_steps", std::to_string(c.max_steps));
  put("eval_every", std::to_string(c.eval_every));
  put("patience", std::to_string(c.patience));
  if (c.mask_rate) put("mask_rate", format_double(*c.mask_rate));
  put("k_negatives", std::to_string(c.k_negatives));
  put("eval_limit", std::to_string(c.eval_limit));
  put("eval_subset", to_string(c.eval_subset));
  put("axis", to_string(c.axis));
  if (!c.axis_values.empty()) {
    std::string joined;
    for (const auto& v : c.axis_values) joined += (joined.empty() ? "" : ",") + v;
    put("axis_values", joined);
  }
  put("seeds", std::to_string(c.seeds));
  return out;
}

/// FNV-1a over the canonical model keys.
inline std::uint64_t config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [k, v] : model_keys(c))
    for (char ch : k + "=" + v + "\n") {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
  return h;
}

}  // namespace vdial
