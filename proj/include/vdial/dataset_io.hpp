#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vdial/synth.hpp"

namespace vdial {

namespace io {

inline constexpr std::array<char, 8> kTensorMagic = {'V', 'D', 'T', 'E', 'N', 'S', 'O', 'R'};
inline constexpr std::uint32_t kTensorVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

/// Bounds-checked little-endian reader over an in-memory file.
class ByteReader {
 public:
  ByteReader(std::string bytes, std::string source) : bytes_(std::move(bytes)), source_(std::move(source)) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int b = 0; b < width; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_++])) << (8 * b);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }

  std::string raw(std::size_t n) {
    need(n);
    std::string out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& source() const { return source_; }

 private:
  void need(std::size_t n) const {
    require(bytes_.size() - pos_ >= n, ErrorKind::IoError, source_ + ": truncated");
  }

  std::string bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::IoError, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  require(!in.bad(), ErrorKind::IoError, "read failure on " + path.string());
  return buf.str();
}

/// Writes through a temporary sibling and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::IoError, "cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    require(out.good(), ErrorKind::IoError, "write failure on " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  require(!ec, ErrorKind::IoError, "cannot rename " + tmp.string() + ": " + ec.message());
}

/// 16-byte header (magic, version, rank), u64 dims, little-endian f32 payload.
inline std::string encode_tensor(const std::vector<std::size_t>& shape, const std::vector<float>& values) {
  std::string out(kTensorMagic.begin(), kTensorMagic.end());
  put_u32(out, kTensorVersion);
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (std::size_t d : shape) put_u64(out, d);
  for (float v : values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

struct RawTensor {
  std::vector<std::size_t> shape;
  std::vector<float> values;
};

inline RawTensor decode_tensor(ByteReader reader) {
  const std::string magic = reader.raw(kTensorMagic.size());
  require(std::equal(magic.begin(), magic.end(), kTensorMagic.begin()), ErrorKind::FormatVersionMismatch,
          reader.source() + ": bad magic header");
  const std::uint32_t version = reader.u32();
  require(version == kTensorVersion, ErrorKind::FormatVersionMismatch,
          reader.source() + ": unsupported version " + std::to_string(version));
  const std::uint32_t rank = reader.u32();
  require(rank <= 8, ErrorKind::IoError, reader.source() + ": implausible rank");
  RawTensor t;
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    t.shape.push_back(static_cast<std::size_t>(reader.u64()));
    count *= t.shape.back();
  }
  require(reader.remaining() == count * 4, ErrorKind::IoError, reader.source() + ": payload size mismatch");
  t.values.resize(count);
  for (auto& v : t.values) v = std::bit_cast<float>(reader.u32());
  return t;
}

inline nlohmann::json sample_to_json(const DialogSample& s) {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& t : s.history) history.push_back({t.question, t.answer});
  return {{"id", s.id},
          {"dialog", s.dialog_index},
          {"round", s.round},
          {"caption", s.caption},
          {"history", history},
          {"question", s.question},
          {"answer", s.answer},
          {"candidates", s.candidates},
          {"gt_index", s.gt_index},
          {"video", s.video_ref},
          {"audio", s.audio_ref},
          {"question_type", s.question_type},
          {"coreference", s.coreference},
          {"split", s.split}};
}

inline DialogSample sample_from_json(const nlohmann::json& j) {
  DialogSample s;
  s.id = j.at("id").get<std::string>();
  s.dialog_index = j.at("dialog").get<int>();
  s.round = j.at("round").get<int>();
  s.caption = j.at("caption").get<std::string>();
  for (const auto& t : j.at("history")) s.history.push_back({t.at(0).get<std::string>(), t.at(1).get<std::string>()});
  s.question = j.at("question").get<std::string>();
  s.answer = j.at("answer").get<std::string>();
  s.candidates = j.at("candidates").get<std::vector<std::string>>();
  s.gt_index = j.at("gt_index").get<int>();
  s.video_ref = j.at("video").get<std::string>();
  s.audio_ref = j.at("audio").get<std::string>();
  s.question_type = j.at("question_type").get<std::string>();
  s.coreference = j.at("coreference").get<bool>();
  s.split = j.at("split").get<std::string>();
  return s;
}

}  // namespace io

/// Manifest (JSON Lines) plus one sidecar tensor file per clip and per audio
/// track. Tensor files are written first and the manifest last, each through
/// an atomic rename, so a readable manifest implies complete sidecars.
inline void write_dataset(const synth::Dataset& data, const std::filesystem::path& dir) {
  for (const auto& [ref, clip] : data.clips)
    io::write_file_atomic(dir / ref, io::encode_tensor({clip.frames, clip.height, clip.width, 3}, clip.pixels));
  for (const auto& [ref, a] : data.audio) io::write_file_atomic(dir / ref, io::encode_tensor({a.steps, a.dim}, a.values));
  std::string manifest;
  for (const auto& s : data.samples) manifest += io::sample_to_json(s).dump() + "\n";
  io::write_file_atomic(dir / "manifest.jsonl", manifest);
}

/// Reads and validates everything before returning; any defect throws.
inline synth::Dataset read_dataset(const std::filesystem::path& dir, double fps = 16.0) {
  const std::string manifest = io::read_file(dir / "manifest.jsonl");
  synth::Dataset data;
  std::istringstream lines(manifest);
  std::string line;
  std::size_t number = 0;
  while (std::getline(lines, line)) {
    ++number;
    if (line.empty()) continue;
    try {
      data.samples.push_back(io::sample_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::IoError, "manifest line " + std::to_string(number) + ": " + e.what());
    }
  }
  require(!manifest.empty() && manifest.back() == '\n', ErrorKind::IoError, "manifest is truncated");
  for (const auto& s : data.samples) {
    if (!data.clips.contains(s.video_ref)) {
      auto t = io::decode_tensor(io::ByteReader(io::read_file(dir / s.video_ref), s.video_ref));
      require(t.shape.size() == 4 && t.shape[3] == 3, ErrorKind::IoError, s.video_ref + ": not a clip tensor");
      data.clips[s.video_ref] = VideoClip{t.shape[0], t.shape[1], t.shape[2], fps, std::move(t.values)};
    }
    if (!data.audio.contains(s.audio_ref)) {
      auto t = io::decode_tensor(io::ByteReader(io::read_file(dir / s.audio_ref), s.audio_ref));
      require(t.shape.size() == 2, ErrorKind::IoError, s.audio_ref + ": not an audio tensor");
      data.audio[s.audio_ref] = AudioFeatures{t.shape[0], t.shape[1], std::move(t.values)};
    }
  }
  return data;
}

}  // namespace vdial
