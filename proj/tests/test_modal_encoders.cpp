#include <gtest/gtest.h>

#include <numeric>

#include "support.hpp"
#include "vdial/encoders.hpp"

using namespace vdial;
using vdial::testing::random_tensor;

namespace {

void zero(Tensor t) {
  for (double& v : t.data()) v = 0.0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor random_clip(Rng& rng, std::size_t frames, std::size_t size = 32) {
  std::vector<double> v(frames * size * size * 3);
  for (double& x : v) x = rng.uniform();
  return Tensor::from({frames, size, size, 3}, std::move(v));
}

bool any_nonzero(std::span<const double> g) {
  return std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
}

}  // namespace

TEST(MultiHeadAttention, SinglePositionReturnsProjectedValue) {
  ParamStore store;
  Rng rng(1);
  const auto p = make_attention(store, rng, "a", 8, 2);
  const Tensor q = random_tensor(rng, {1, 8}, 1.0, false), kv = random_tensor(rng, {1, 8}, 1.0, false);
  const Tensor want = apply(p.output, apply(p.value, kv));
  EXPECT_LT(max_abs_diff(multi_head_attention(p, q, kv), want), 1e-12);
}

TEST(MultiHeadAttention, MaskedKeysAreIgnored) {
  ParamStore store;
  Rng rng(2);
  const auto p = make_attention(store, rng, "a", 8, 2);
  const Tensor q = random_tensor(rng, {3, 8}, 1.0, false), kv = random_tensor(rng, {5, 8}, 1.0, false);
  const std::vector<bool> only_third{false, false, true, false, false};
  const Tensor masked = multi_head_attention(p, q, kv, only_third);
  const Tensor single = multi_head_attention(p, q, slice_rows(kv, 2, 3));
  EXPECT_LT(max_abs_diff(masked, single), 1e-12);
}

TEST(MultiHeadAttention, JointKeyValuePermutationInvariance) {
  ParamStore store;
  Rng rng(3);
  const auto p = make_attention(store, rng, "a", 12, 3);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor q = random_tensor(rng, {4, 12}, 1.0, false), kv = random_tensor(rng, {4, 12}, 1.0, false);
    std::vector<int> perm(4);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span<int>(perm));
    const Tensor a = multi_head_attention(p, q, kv);
    const Tensor b = multi_head_attention(p, q, gather_rows(kv, perm));
    EXPECT_LT(max_abs_diff(a, b), 1e-12);
  }
}

TEST(MultiHeadAttention, HeadsMustDivideWidth) {
  ParamStore store;
  Rng rng(4);
  try {
    make_attention(store, rng, "a", 10, 3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::HeadsDivisibility);
  }
}

TEST(TransformerBlock, ZeroOutputProjections) {
  for (auto mode : {BlockMode::StandardResidual, BlockMode::LiteralSum}) {
    ParamStore store;
    Rng rng(5);
    TransformerConfig cfg{1, 2, 8, 16, mode};
    const auto block = make_transformer_block(store, rng, "blk", cfg);
    for (Tensor t : {block.attn.output.weight, block.attn.output.bias, block.ffn.down.weight, block.ffn.down.bias})
      zero(t);
    const Tensor x = random_tensor(rng, {5, 8}, 1.0, false);
    const Tensor y = transformer_block(block, x);
    EXPECT_EQ(y.shape(), x.shape());
    if (mode == BlockMode::StandardResidual) {
      EXPECT_LT(max_abs_diff(y, x), 1e-15);
    } else {
      EXPECT_LT(max_abs_diff(y, Tensor::zeros({5, 8})), 1e-15);
    }
  }
}

TEST(TransformerBlock, ShapePreservedInBothModes) {
  for (auto mode : {BlockMode::StandardResidual, BlockMode::LiteralSum}) {
    ParamStore store;
    Rng rng(6);
    const auto block = make_transformer_block(store, rng, "blk", {1, 4, 16, 32, mode});
    EXPECT_EQ(transformer_block(block, random_tensor(rng, {7, 16}, 1.0, false)).shape(), (Shape{7, 16}));
  }
}

TEST(TransformerBlock, EverySublayerWeightMatchesFiniteDifferences) {
  for (auto mode : {BlockMode::StandardResidual, BlockMode::LiteralSum}) {
    ParamStore store;
    Rng rng(7);
    const auto block = make_transformer_block(store, rng, "blk", {1, 2, 4, 6, mode});
    const Tensor x = random_tensor(rng, {3, 4}, 1.0, false);
    std::vector<Tensor> params;
    for (const auto& p : store.all()) params.push_back(p.tensor);
    const auto res = vdial::testing::grad_check([&](const std::vector<Tensor>&) { return transformer_block(block, x); },
                                                params, rng);
    EXPECT_LE(res.max_rel_error, 1e-4) << res.worst;
    for (const auto& p : store.all()) EXPECT_TRUE(any_nonzero(p.tensor.grad())) << p.name;
  }
}

TEST(TextEncoder, ToyShapeAndDeterminism) {
  ParamStore store;
  Rng rng(8);
  const auto enc = make_text_encoder(store, rng, "text", 50, 32, {});
  TokenSequence seq;
  for (int i = 0; i < 12; ++i) seq.push(5 + i, i % 4);
  const auto a = text_encoder_forward(enc, seq), b = text_encoder_forward(enc, seq);
  EXPECT_EQ(a.states.shape(), (Shape{12, 64}));
  EXPECT_EQ(std::vector<double>(a.states.data().begin(), a.states.data().end()),
            std::vector<double>(b.states.data().begin(), b.states.data().end()));
  EXPECT_EQ(a.modality, Modality::Text);
}

TEST(TextEncoder, ReportedShapesValidate) {
  EXPECT_NO_THROW((TransformerConfig{6, 12, 768, 3072, BlockMode::StandardResidual}.validate()));
  EXPECT_NO_THROW(VisualBackboneConfig::paper().validate());
}

TEST(TextEncoder, TooLongSequenceThrows) {
  ParamStore store;
  Rng rng(9);
  const auto enc = make_text_encoder(store, rng, "text", 20, 4, {1, 2, 8, 8, BlockMode::StandardResidual});
  TokenSequence seq;
  for (int i = 0; i < 5; ++i) seq.push(5, 0);
  EXPECT_THROW(text_encoder_forward(enc, seq), Error);
}

TEST(VisualBackbone, ToyFeatureShapeFollowsStrides) {
  for (std::set<int> taps : {std::set<int>{5}, std::set<int>{4}, std::set<int>{4, 5}}) {
    ParamStore store;
    Rng rng(10);
    auto cfg = VisualBackboneConfig::toy();
    cfg.taps = taps;
    const auto net = make_visual_backbone(store, rng, "bb", cfg);
    for (std::size_t frames : {4u, 6u, 16u}) {
      const Tensor f = visual_backbone_forward(net, random_clip(rng, frames));
      std::size_t tokens = frames;
      for (const auto& b : cfg.blocks) tokens = (tokens + b.temporal_stride - 1) / b.temporal_stride;
      std::size_t width = 0;
      for (int t : taps) width += cfg.blocks[static_cast<std::size_t>(t - 1)].channels;
      EXPECT_EQ(f.shape(), (Shape{tokens, width}));
      EXPECT_EQ(f.rows(), cfg.output_tokens(frames));
      EXPECT_EQ(f.cols(), cfg.feature_dim());
    }
  }
}

TEST(VisualBackbone, WrongFrameSizeThrows) {
  ParamStore store;
  Rng rng(11);
  const auto net = make_visual_backbone(store, rng, "bb", VisualBackboneConfig::toy());
  try {
    visual_backbone_forward(net, random_clip(rng, 4, 16));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::FrameShapeMismatch);
  }
}

TEST(VisualBackbone, GradientsLandExactlyOnTrainableBlocks) {
  for (std::set<int> trainable : {std::set<int>{}, std::set<int>{5}, std::set<int>{4, 5}, std::set<int>{2}}) {
    ParamStore store;
    Rng rng(12);
    auto cfg = VisualBackboneConfig::toy();
    cfg.trainable_blocks = trainable;
    const auto net = make_visual_backbone(store, rng, "bb", cfg);
    for (const auto& p : store.all())
      if (p.tensor.requires_grad()) Tensor(p.tensor).mutable_grad();
    {
      Tape tape;
      const Tensor f = visual_backbone_forward(net, random_clip(rng, 8));
      tape.backward(sum(mul(f, f)));
    }
    for (const auto& p : store.all()) {
      const int block = p.name[4] - '0';  // "bb.bN..."
      const bool listed = trainable.contains(block);
      EXPECT_EQ(p.tensor.has_grad() && any_nonzero(p.tensor.grad()), listed) << p.name;
    }
  }
}

TEST(VisualBackbone, FrozenPrefixCountsLeadingFrozenBlocks) {
  ParamStore store;
  Rng rng(13);
  auto cfg = VisualBackboneConfig::toy();
  cfg.trainable_blocks = {4, 5};
  EXPECT_EQ(frozen_prefix(make_visual_backbone(store, rng, "a", cfg)), 3u);
  cfg.trainable_blocks = {};
  EXPECT_EQ(frozen_prefix(make_visual_backbone(store, rng, "b", cfg)), 5u);
}

TEST(VisualBackbone, ResumingFromCachedPrefixMatchesFullPass) {
  ParamStore store;
  Rng rng(14);
  auto cfg = VisualBackboneConfig::toy();
  cfg.trainable_blocks = {4, 5};
  const auto net = make_visual_backbone(store, rng, "bb", cfg);
  const Tensor clip = random_clip(rng, 16);
  const auto prefix = backbone_run(net, backbone_input(net, clip), frozen_prefix(net));
  const Tensor resumed = backbone_features(backbone_run(net, prefix, VisualBackboneConfig::kBlocks));
  EXPECT_EQ(max_abs_diff(resumed, visual_backbone_forward(net, clip)), 0.0);
}

TEST(VisualEncoder, TokensMapToModelWidth) {
  ParamStore store;
  Rng rng(15);
  const auto enc = make_token_encoder(store, rng, "v", 32, 16, {});
  const auto e = visual_encoder_forward(enc, random_tensor(rng, {8, 32}, 1.0, false));
  EXPECT_EQ(e.states.shape(), (Shape{8, 64}));
  EXPECT_EQ(e.modality, Modality::Video);
  EXPECT_EQ(e.mask.size(), 8u);
}

TEST(AudioEncoder, FeaturizerIsDeterministicAndParameterFree) {
  const FrozenAudioFeaturizer f(16, 32, 5), g(16, 32, 5);
  Rng rng(16);
  std::vector<double> raw(8 * 16);
  for (double& x : raw) x = rng.normal();
  EXPECT_EQ(f(raw, 8), g(raw, 8));
  EXPECT_EQ(f(raw, 8).steps, 8u);
}

TEST(AudioEncoder, HeadWeightsReceiveGradients) {
  ParamStore store;
  Rng rng(17);
  const auto enc = make_token_encoder(store, rng, "a", 32, 16, {});
  const FrozenAudioFeaturizer f(16, 32);
  std::vector<double> raw(8 * 16);
  for (double& x : raw) x = rng.normal();
  const AudioFeatures feats = f(raw, 8);
  {
    Tape tape;
    const auto e = audio_encoder_forward(enc, feats);
    EXPECT_EQ(e.states.shape(), (Shape{8, 64}));
    tape.backward(sum(mul(e.states, e.states)));
  }
  for (const auto& p : store.all()) EXPECT_TRUE(p.tensor.has_grad() && any_nonzero(p.tensor.grad())) << p.name;
}

TEST(AudioEncoder, EmptyAudioThrows) {
  ParamStore store;
  Rng rng(18);
  const auto enc = make_token_encoder(store, rng, "a", 32, 16, {});
  try {
    audio_encoder_forward(enc, AudioFeatures{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyAudio);
  }
}
