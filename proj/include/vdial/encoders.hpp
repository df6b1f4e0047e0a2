#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "vdial/media.hpp"
#include "vdial/ops.hpp"
#include "vdial/optim.hpp"
#include "vdial/text.hpp"

namespace vdial {

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

struct Linear {
  Tensor weight;  // [in×out]
  Tensor bias;    // [out]
};

/// Xavier-normal weights unless `stddev` is given; zero bias.
inline Linear make_linear(ParamStore& store, Rng& rng, const std::string& name, std::size_t in, std::size_t out,
                          double stddev = 0.0) {
  if (stddev <= 0.0) stddev = std::sqrt(2.0 / static_cast<double>(in + out));
  return {store.normal(name + ".weight", {in, out}, stddev, rng), store.constant(name + ".bias", {out}, 0.0)};
}

inline Tensor apply(const Linear& layer, const Tensor& x) { return add_bias(matmul(x, layer.weight), layer.bias); }

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

inline LayerNormParams make_layer_norm(ParamStore& store, const std::string& name, std::size_t dim) {
  return {store.constant(name + ".gamma", {dim}, 1.0), store.constant(name + ".beta", {dim}, 0.0)};
}

inline Tensor apply(const LayerNormParams& ln, const Tensor& x) { return layer_norm(x, ln.gamma, ln.beta, 1e-5); }

enum class BlockMode {
  StandardResidual,  // h = x + MHA(LN(x)); y = h + FFN(LN(h))
  LiteralSum,        // y = FFN(x) + MHA(x)
};

struct TransformerConfig {
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t d_model = 64;
  std::size_t d_ff = 128;
  BlockMode mode = BlockMode::StandardResidual;

  void validate() const {
    require(layers >= 1, ErrorKind::ConfigInvalid, "a transformer needs at least one layer");
    require(heads >= 1 && d_model % heads == 0, ErrorKind::HeadsDivisibility,
            "d_model " + std::to_string(d_model) + " not divisible by " + std::to_string(heads) + " heads");
    require(d_ff >= 1, ErrorKind::ConfigInvalid, "feed-forward width must be positive");
  }
};

struct AttentionParams {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  std::size_t heads = 1;
};

inline AttentionParams make_attention(ParamStore& store, Rng& rng, const std::string& name, std::size_t d,
                                      std::size_t heads) {
  require(heads >= 1 && d % heads == 0, ErrorKind::HeadsDivisibility,
          "d " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  return {make_linear(store, rng, name + ".query", d, d), make_linear(store, rng, name + ".key", d, d),
          make_linear(store, rng, name + ".value", d, d), make_linear(store, rng, name + ".output", d, d), heads};
}

/// Projected multi-head attention of `queries` over `keys_values`.
inline Tensor multi_head_attention(const AttentionParams& p, const Tensor& queries, const Tensor& keys_values,
                                   const std::vector<bool>& key_mask = {}, bool causal = false,
                                   std::vector<double>* probs_out = nullptr) {
  const Tensor q = apply(p.query, queries);
  const Tensor k = apply(p.key, keys_values);
  const Tensor v = apply(p.value, keys_values);
  return apply(p.output, attention(q, k, v, p.heads, key_mask, causal, probs_out));
}

struct FeedForward {
  Linear up;
  Linear down;
};

inline Tensor apply(const FeedForward& ffn, const Tensor& x) { return apply(ffn.down, gelu(apply(ffn.up, x))); }

struct TransformerBlock {
  LayerNormParams attn_norm;
  AttentionParams attn;
  LayerNormParams ffn_norm;
  FeedForward ffn;
  BlockMode mode = BlockMode::StandardResidual;
};

inline TransformerBlock make_transformer_block(ParamStore& store, Rng& rng, const std::string& name,
                                               const TransformerConfig& cfg) {
  TransformerBlock block;
  block.mode = cfg.mode;
  block.attn = make_attention(store, rng, name + ".attn", cfg.d_model, cfg.heads);
  block.ffn = {make_linear(store, rng, name + ".ffn.up", cfg.d_model, cfg.d_ff),
               make_linear(store, rng, name + ".ffn.down", cfg.d_ff, cfg.d_model)};
  if (cfg.mode == BlockMode::StandardResidual) {
    block.attn_norm = make_layer_norm(store, name + ".attn_norm", cfg.d_model);
    block.ffn_norm = make_layer_norm(store, name + ".ffn_norm", cfg.d_model);
  }
  return block;
}

inline Tensor transformer_block(const TransformerBlock& block, const Tensor& x, const std::vector<bool>& mask = {},
                                std::vector<double>* probs_out = nullptr) {
  require(x.rank() == 2 && x.cols() == block.attn.query.weight.dim(0), ErrorKind::ShapeMismatch,
          "transformer block input " + shape_string(x.shape()) + " vs model dim " +
              std::to_string(block.attn.query.weight.dim(0)));
  if (block.mode == BlockMode::LiteralSum) {
    return add(apply(block.ffn, x), multi_head_attention(block.attn, x, x, mask, false, probs_out));
  }
  const Tensor normed = apply(block.attn_norm, x);
  const Tensor h = add(x, multi_head_attention(block.attn, normed, normed, mask, false, probs_out));
  return add(h, apply(block.ffn, apply(block.ffn_norm, h)));
}

struct TransformerStack {
  std::vector<TransformerBlock> blocks;
};

inline TransformerStack make_transformer_stack(ParamStore& store, Rng& rng, const std::string& name,
                                               const TransformerConfig& cfg) {
  cfg.validate();
  TransformerStack stack;
  for (std::size_t i = 0; i < cfg.layers; ++i)
    stack.blocks.push_back(make_transformer_block(store, rng, name + ".layer" + std::to_string(i), cfg));
  return stack;
}

/// Runs every block; `probs_out`, when given, collects each layer's weights.
inline Tensor forward(const TransformerStack& stack, Tensor x, const std::vector<bool>& mask = {},
                      std::vector<std::vector<double>>* probs_out = nullptr) {
  for (const auto& block : stack.blocks) {
    std::vector<double> probs;
    x = transformer_block(block, x, mask, probs_out ? &probs : nullptr);
    if (probs_out) probs_out->push_back(std::move(probs));
  }
  return x;
}

enum class Modality { Video, Audio, Text };

struct ModalEmbedding {
  Tensor states;  // [seq_len×d]
  Modality modality = Modality::Text;
  std::vector<bool> mask;

  std::size_t length() const { return states.rows(); }
};

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

struct TextEncoder {
  TextEmbeddings embeddings;
  LayerNormParams embed_norm;
  TransformerStack stack;
};

inline TextEncoder make_text_encoder(ParamStore& store, Rng& rng, const std::string& name, std::size_t vocab_size,
                                     std::size_t max_positions, const TransformerConfig& cfg) {
  cfg.validate();
  TextEncoder enc;
  enc.embeddings.token = store.normal(name + ".token_embedding", {vocab_size, cfg.d_model}, 0.02, rng);
  enc.embeddings.segment = store.normal(name + ".segment_embedding", {kSegmentCount, cfg.d_model}, 0.02, rng);
  enc.embeddings.position = store.normal(name + ".position_embedding", {max_positions, cfg.d_model}, 0.02, rng);
  enc.embed_norm = make_layer_norm(store, name + ".embed_norm", cfg.d_model);
  enc.stack = make_transformer_stack(store, rng, name, cfg);
  return enc;
}

/// E_d for `seq`, optionally with substituted (masked) ids.
inline ModalEmbedding text_encoder_forward(const TextEncoder& enc, const TokenSequence& seq,
                                           std::span<const int> ids = {}) {
  const std::size_t max_positions = enc.embeddings.position.rows();
  require(seq.size() <= max_positions, ErrorKind::SequenceTooLong,
          "text of " + std::to_string(seq.size()) + " tokens exceeds " + std::to_string(max_positions) + " positions");
  const Tensor embedded = embed_input(ids.empty() ? std::span<const int>(seq.ids) : ids, seq, enc.embeddings);
  return {forward(enc.stack, apply(enc.embed_norm, embedded), {}), Modality::Text, seq.attention_mask};
}

// ---------------------------------------------------------------------------
// Visual encoder
// ---------------------------------------------------------------------------

struct BackboneBlockSpec {
  std::size_t channels = 8;
  std::size_t spatial_stride = 1;
  std::size_t temporal_stride = 1;
};

/// Five separable (spatial 1×k×k then temporal k×1×1) conv blocks b1..b5,
/// with global-average-pooled taps on b4 and/or b5.
struct VisualBackboneConfig {
  static constexpr std::size_t kBlocks = 5;
  std::array<BackboneBlockSpec, kBlocks> blocks{};
  std::set<int> taps{5};              // 1-based block numbers, subset of {4, 5}
  std::set<int> trainable_blocks{};   // 1-based block numbers
  std::size_t in_channels = 3;
  std::size_t frame_size = 32;
  std::size_t frames = 16;
  double fps = 16.0;
  std::size_t spatial_kernel = 3;
  std::size_t temporal_kernel = 3;

  static VisualBackboneConfig toy() {
    VisualBackboneConfig cfg;
    cfg.blocks = {{{8, 2, 1}, {16, 2, 2}, {24, 2, 1}, {32, 1, 1}, {32, 2, 1}}};
    return cfg;
  }

  /// Shapes of the reported setup: 224×224 frames at 16 fps with 1024-wide
  /// b4/b5 taps. Only validated, never instantiated.
  static VisualBackboneConfig paper() {
    VisualBackboneConfig cfg;
    cfg.blocks = {{{64, 2, 1}, {192, 2, 2}, {480, 2, 1}, {1024, 2, 1}, {1024, 2, 1}}};
    cfg.taps = {4, 5};
    cfg.frame_size = 224;
    cfg.frames = 16;
    cfg.fps = 16.0;
    return cfg;
  }

  void validate() const {
    require(!taps.empty(), ErrorKind::ConfigInvalid, "at least one tap point is required");
    for (int t : taps) require(t == 4 || t == 5, ErrorKind::ConfigInvalid, "taps must be drawn from {b4, b5}");
    for (int b : trainable_blocks)
      require(b >= 1 && b <= static_cast<int>(kBlocks), ErrorKind::ConfigInvalid,
              "trainable block b" + std::to_string(b) + " is not defined");
    for (const auto& b : blocks)
      require(b.channels >= 1 && b.spatial_stride >= 1 && b.temporal_stride >= 1, ErrorKind::ConfigInvalid,
              "backbone blocks need positive channels and strides");
    require(frames >= 1 && frame_size >= 1, ErrorKind::ConfigInvalid, "empty clip geometry");
    if (taps.size() == 2)
      require(blocks[4].temporal_stride == 1, ErrorKind::ConfigInvalid,
              "tapping b4 and b5 together needs a unit temporal stride in b5");
  }

  static std::size_t strided(std::size_t extent, std::size_t stride) { return (extent + stride - 1) / stride; }

  /// Temporal tokens emitted for `n` input frames.
  std::size_t output_tokens(std::size_t n) const {
    const int last = *taps.rbegin();
    for (int i = 0; i < last; ++i) n = strided(n, blocks[static_cast<std::size_t>(i)].temporal_stride);
    return n;
  }

  std::size_t feature_dim() const {
    std::size_t d = 0;
    for (int t : taps) d += blocks[static_cast<std::size_t>(t - 1)].channels;
    return d;
  }
};

struct BackboneBlock {
  Tensor spatial_weight;   // [1, k, k, Cin, Cout]
  Tensor spatial_bias;
  Tensor temporal_weight;  // [k, 1, 1, Cout, Cout]
  Tensor temporal_bias;
};

struct VisualBackbone {
  VisualBackboneConfig config;
  std::vector<BackboneBlock> blocks;
};

/// Blocks outside `trainable_blocks` are created frozen (requires_grad off).
inline VisualBackbone make_visual_backbone(ParamStore& store, Rng& rng, const std::string& name,
                                           const VisualBackboneConfig& cfg) {
  cfg.validate();
  VisualBackbone net{cfg, {}};
  std::size_t cin = cfg.in_channels;
  const std::size_t ks = cfg.spatial_kernel, kt = cfg.temporal_kernel;
  for (std::size_t i = 0; i < VisualBackboneConfig::kBlocks; ++i) {
    const std::size_t cout = cfg.blocks[i].channels;
    const std::string block = name + ".b" + std::to_string(i + 1);
    BackboneBlock b;
    b.spatial_weight = store.normal(block + ".spatial.weight", {1, ks, ks, cin, cout},
                                    std::sqrt(2.0 / static_cast<double>(ks * ks * cin)), rng);
    b.spatial_bias = store.constant(block + ".spatial.bias", {cout}, 0.0);
    b.temporal_weight = store.normal(block + ".temporal.weight", {kt, 1, 1, cout, cout},
                                     std::sqrt(2.0 / static_cast<double>(kt * cout)), rng);
    b.temporal_bias = store.constant(block + ".temporal.bias", {cout}, 0.0);
    const bool trainable = cfg.trainable_blocks.contains(static_cast<int>(i) + 1);
    for (Tensor* t : {&b.spatial_weight, &b.spatial_bias, &b.temporal_weight, &b.temporal_bias})
      t->set_requires_grad(trainable);
    net.blocks.push_back(std::move(b));
    cin = cout;
  }
  return net;
}

/// Backbone progress: activation entering block `next_block` (0-based) and
/// the pooled taps collected so far.
struct BackboneActivation {
  Tensor x;
  std::vector<Tensor> taps;
  std::size_t next_block = 0;
};

inline BackboneActivation backbone_input(const VisualBackbone& net, const Tensor& clip) {
  const auto& cfg = net.config;
  require(clip.rank() == 4 && clip.dim(1) == cfg.frame_size && clip.dim(2) == cfg.frame_size &&
              clip.dim(3) == cfg.in_channels,
          ErrorKind::FrameShapeMismatch,
          "clip " + shape_string(clip.shape()) + " does not match " + std::to_string(cfg.frame_size) + "x" +
              std::to_string(cfg.frame_size) + "x" + std::to_string(cfg.in_channels) + " frames");
  require(clip.dim(0) >= 1, ErrorKind::FrameShapeMismatch, "clip has no frames");
  return {clip, {}, 0};
}

/// Advances `act` through blocks [act.next_block, end_block).
inline BackboneActivation backbone_run(const VisualBackbone& net, BackboneActivation act, std::size_t end_block) {
  const auto& cfg = net.config;
  const std::size_t ks = cfg.spatial_kernel, kt = cfg.temporal_kernel;
  for (std::size_t i = act.next_block; i < std::min(end_block, VisualBackboneConfig::kBlocks); ++i) {
    const auto& spec = cfg.blocks[i];
    const auto& b = net.blocks[i];
    Conv3dGeometry spatial{{1, spec.spatial_stride, spec.spatial_stride}, {0, ks / 2, ks / 2}};
    Conv3dGeometry temporal{{spec.temporal_stride, 1, 1}, {kt / 2, 0, 0}};
    act.x = relu(conv3d(act.x, b.spatial_weight, b.spatial_bias, spatial));
    act.x = relu(conv3d(act.x, b.temporal_weight, b.temporal_bias, temporal));
    if (cfg.taps.contains(static_cast<int>(i) + 1)) act.taps.push_back(spatial_avg_pool(act.x));
    act.next_block = i + 1;
  }
  return act;
}

inline Tensor backbone_features(const BackboneActivation& act) {
  require(!act.taps.empty(), ErrorKind::InvalidArgument, "backbone has not reached a tap point");
  return act.taps.size() == 1 ? act.taps.front() : concat_cols(act.taps);
}

/// Number of leading blocks that are frozen; their output depends on the clip only.
inline std::size_t frozen_prefix(const VisualBackbone& net) {
  std::size_t n = 0;
  while (n < VisualBackboneConfig::kBlocks && !net.config.trainable_blocks.contains(static_cast<int>(n) + 1)) ++n;
  return n;
}

/// f_v: [tokens × feature_dim] from a [T, H, W, 3] clip tensor.
inline Tensor visual_backbone_forward(const VisualBackbone& net, const Tensor& clip) {
  return backbone_features(backbone_run(net, backbone_input(net, clip), VisualBackboneConfig::kBlocks));
}

/// Projection to the model width, learned positions, transformer head.
struct TokenEncoder {
  Linear projection;
  Tensor position;  // [max_tokens×d]
  TransformerStack stack;
};

inline TokenEncoder make_token_encoder(ParamStore& store, Rng& rng, const std::string& name, std::size_t in_dim,
                                       std::size_t max_tokens, const TransformerConfig& cfg) {
  cfg.validate();
  return {make_linear(store, rng, name + ".projection", in_dim, cfg.d_model),
          store.normal(name + ".position_embedding", {max_tokens, cfg.d_model}, 0.02, rng),
          make_transformer_stack(store, rng, name, cfg)};
}

inline Tensor token_encoder_forward(const TokenEncoder& enc, const Tensor& features) {
  require(features.rank() == 2 && features.cols() == enc.projection.weight.dim(0), ErrorKind::ShapeMismatch,
          "features " + shape_string(features.shape()) + " vs projection input " +
              std::to_string(enc.projection.weight.dim(0)));
  const std::size_t n = features.rows();
  require(n <= enc.position.rows(), ErrorKind::SequenceTooLong,
          std::to_string(n) + " tokens exceed " + std::to_string(enc.position.rows()) + " positions");
  const Tensor projected = add(apply(enc.projection, features), slice_rows(enc.position, 0, n));
  return forward(enc.stack, projected);
}

inline ModalEmbedding visual_encoder_forward(const TokenEncoder& enc, const Tensor& visual_features) {
  Tensor states = token_encoder_forward(enc, visual_features);
  return {states, Modality::Video, std::vector<bool>(states.rows(), true)};
}

// ---------------------------------------------------------------------------
// Audio
// ---------------------------------------------------------------------------

/// Seeded random projection + tanh standing in for a pretrained audio CNN.
/// Holds no parameters, so no gradient can ever reach it.
class FrozenAudioFeaturizer {
 public:
  FrozenAudioFeaturizer(std::size_t raw_dim, std::size_t feature_dim, std::uint64_t seed = 0xA0D10)
      : raw_dim_(raw_dim), feature_dim_(feature_dim), weights_(raw_dim * feature_dim) {
    Rng rng(seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(raw_dim));
    for (double& w : weights_) w = rng.normal() * stddev;
  }

  std::size_t raw_dim() const { return raw_dim_; }
  std::size_t feature_dim() const { return feature_dim_; }

  /// raw: [steps × raw_dim] row-major.
  AudioFeatures operator()(std::span<const double> raw, std::size_t steps) const {
    require(raw.size() == steps * raw_dim_, ErrorKind::ShapeMismatch, "raw audio size");
    AudioFeatures out{steps, feature_dim_, std::vector<float>(steps * feature_dim_)};
    for (std::size_t s = 0; s < steps; ++s)
      for (std::size_t f = 0; f < feature_dim_; ++f) {
        double acc = 0.0;
        for (std::size_t r = 0; r < raw_dim_; ++r) acc += raw[s * raw_dim_ + r] * weights_[r * feature_dim_ + f];
        out.values[s * feature_dim_ + f] = static_cast<float>(std::tanh(acc));
      }
    return out;
  }

 private:
  std::size_t raw_dim_;
  std::size_t feature_dim_;
  std::vector<double> weights_;
};

inline ModalEmbedding audio_encoder_forward(const TokenEncoder& enc, const AudioFeatures& features) {
  require(features.steps > 0 && !features.values.empty(), ErrorKind::EmptyAudio, "no audio features");
  Tensor states = token_encoder_forward(enc, features.to_tensor());
  return {states, Modality::Audio, std::vector<bool>(states.rows(), true)};
}

}  // namespace vdial
