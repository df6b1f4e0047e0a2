#pragma once

#include <array>
#include <bit>
#include <filesystem>
#include <string>
#include <vector>

#include "vdial/config.hpp"
#include "vdial/dataset_io.hpp"

namespace vdial {

inline constexpr std::array<char, 8> kCheckpointMagic = {'V', 'D', 'C', 'K', 'P', 'T', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<double> values;

  friend bool operator==(const CheckpointTensor&, const CheckpointTensor&) = default;
};

/// Complete training state. Parameters and moments are stored as raw f64
/// bits, so a round trip is exact.
struct Checkpoint {
  std::uint64_t config_hash = 0;
  std::uint64_t step = 0;
  std::vector<std::string> vocab;
  std::vector<CheckpointTensor> params;
  AdamConfig adam_config;
  std::uint64_t adam_step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::string rng_state;
  std::vector<std::uint64_t> order;
  std::uint64_t cursor = 0;
};

namespace ckpt_detail {

inline void put_f64(std::string& out, double v) { io::put_u64(out, std::bit_cast<std::uint64_t>(v)); }
inline double get_f64(io::ByteReader& r) { return std::bit_cast<double>(r.u64()); }

inline void put_string(std::string& out, const std::string& s) {
  io::put_u64(out, s.size());
  out += s;
}

inline std::string get_string(io::ByteReader& r) {
  const std::uint64_t n = r.u64();
  require(n <= r.remaining(), ErrorKind::IoError, r.source() + ": truncated");
  return r.raw(static_cast<std::size_t>(n));
}

inline void put_values(std::string& out, const std::vector<double>& v) {
  io::put_u64(out, v.size());
  for (double x : v) put_f64(out, x);
}

inline std::vector<double> get_values(io::ByteReader& r) {
  const std::uint64_t n = r.u64();
  require(n <= r.remaining() / 8, ErrorKind::IoError, r.source() + ": truncated");
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = get_f64(r);
  return v;
}

}  // namespace ckpt_detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  using namespace ckpt_detail;
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  io::put_u32(out, kCheckpointVersion);
  io::put_u64(out, c.config_hash);
  io::put_u64(out, c.step);
  io::put_u64(out, c.vocab.size());
  for (const auto& t : c.vocab) put_string(out, t);
  io::put_u64(out, c.params.size());
  for (const auto& p : c.params) {
    put_string(out, p.name);
    io::put_u64(out, p.shape.size());
    for (std::size_t d : p.shape) io::put_u64(out, d);
    put_values(out, p.values);
  }
  put_f64(out, c.adam_config.lr);
  put_f64(out, c.adam_config.beta1);
  put_f64(out, c.adam_config.beta2);
  put_f64(out, c.adam_config.eps);
  io::put_u64(out, c.adam_step);
  io::put_u64(out, c.first_moment.size());
  for (std::size_t i = 0; i < c.first_moment.size(); ++i) {
    put_values(out, c.first_moment[i]);
    put_values(out, c.second_moment[i]);
  }
  put_string(out, c.rng_state);
  io::put_u64(out, c.order.size());
  for (auto o : c.order) io::put_u64(out, o);
  io::put_u64(out, c.cursor);
  return out;
}

inline Checkpoint decode_checkpoint(io::ByteReader r) {
  using namespace ckpt_detail;
  const std::string magic = r.raw(kCheckpointMagic.size());
  require(std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin()), ErrorKind::FormatVersionMismatch,
          r.source() + ": not a checkpoint");
  const std::uint32_t version = r.u32();
  require(version == kCheckpointVersion, ErrorKind::FormatVersionMismatch,
          r.source() + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.config_hash = r.u64();
  c.step = r.u64();
  const std::uint64_t vocab_size = r.u64();
  require(vocab_size <= r.remaining(), ErrorKind::IoError, r.source() + ": truncated");
  for (std::uint64_t i = 0; i < vocab_size; ++i) c.vocab.push_back(get_string(r));
  const std::uint64_t n_params = r.u64();
  require(n_params <= r.remaining(), ErrorKind::IoError, r.source() + ": truncated");
  for (std::uint64_t i = 0; i < n_params; ++i) {
    CheckpointTensor t;
    t.name = get_string(r);
    const std::uint64_t rank = r.u64();
    require(rank <= 8, ErrorKind::IoError, r.source() + ": implausible rank");
    for (std::uint64_t d = 0; d < rank; ++d) t.shape.push_back(static_cast<std::size_t>(r.u64()));
    t.values = get_values(r);
    require(t.values.size() == shape_numel(t.shape), ErrorKind::IoError, r.source() + ": tensor size mismatch");
    c.params.push_back(std::move(t));
  }
  c.adam_config.lr = get_f64(r);
  c.adam_config.beta1 = get_f64(r);
  c.adam_config.beta2 = get_f64(r);
  c.adam_config.eps = get_f64(r);
  c.adam_step = r.u64();
  const std::uint64_t n_moments = r.u64();
  require(n_moments <= r.remaining(), ErrorKind::IoError, r.source() + ": truncated");
  for (std::uint64_t i = 0; i < n_moments; ++i) {
    c.first_moment.push_back(get_values(r));
    c.second_moment.push_back(get_values(r));
  }
  c.rng_state = get_string(r);
  const std::uint64_t n_order = r.u64();
  require(n_order <= r.remaining() / 8, ErrorKind::IoError, r.source() + ": truncated");
  for (std::uint64_t i = 0; i < n_order; ++i) c.order.push_back(r.u64());
  c.cursor = r.u64();
  require(r.at_end(), ErrorKind::IoError, r.source() + ": trailing bytes");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  io::write_file_atomic(path, encode_checkpoint(c));
}

/// Reads and validates a checkpoint; rejects one written for another config.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_hash) {
  Checkpoint c = decode_checkpoint(io::ByteReader(io::read_file(path), path.string()));
  require(c.config_hash == expected_hash, ErrorKind::ConfigHashMismatch,
          path.string() + " was written for a different configuration");
  return c;
}

inline Checkpoint capture_checkpoint(const Trainer& trainer, std::uint64_t hash) {
  Checkpoint c;
  c.config_hash = hash;
  c.step = trainer.step;
  c.vocab = trainer.model.vocab().tokens();
  for (const auto& p : trainer.model.params().all())
    c.params.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  c.adam_config = trainer.adam.config;
  c.adam_step = trainer.adam.step;
  c.first_moment = trainer.adam.first_moment;
  c.second_moment = trainer.adam.second_moment;
  c.rng_state = trainer.rng.state();
  c.order.assign(trainer.order.begin(), trainer.order.end());
  c.cursor = trainer.cursor;
  return c;
}

/// Copies parameter values into `model`, matching by name and shape.
inline void restore_parameters(VideoDialogModel& model, const Checkpoint& c) {
  const auto& all = model.params().all();
  require(all.size() == c.params.size(), ErrorKind::ConfigHashMismatch, "parameter count differs from checkpoint");
  for (std::size_t i = 0; i < all.size(); ++i) {
    const auto& src = c.params[i];
    require(all[i].name == src.name && all[i].tensor.shape() == src.shape, ErrorKind::ConfigHashMismatch,
            "parameter " + all[i].name + " differs from checkpoint");
    Tensor t = all[i].tensor;
    std::copy(src.values.begin(), src.values.end(), t.data().begin());
  }
  model.clear_feature_cache();
}

/// Restores parameters, optimizer moments and sampling state.
inline void restore_trainer(Trainer& trainer, const Checkpoint& c) {
  restore_parameters(trainer.model, c);
  trainer.step = c.step;
  trainer.adam.config = c.adam_config;
  trainer.adam.step = c.adam_step;
  trainer.adam.first_moment = c.first_moment;
  trainer.adam.second_moment = c.second_moment;
  trainer.rng.set_state(c.rng_state);
  require(c.order.size() == trainer.order.size(), ErrorKind::ConfigHashMismatch, "training set size differs");
  trainer.order.assign(c.order.begin(), c.order.end());
  trainer.cursor = static_cast<std::size_t>(c.cursor);
}

}  // namespace vdial
