#include <gtest/gtest.h>

#include "support.hpp"
#include "vdial/model.hpp"

using namespace vdial;
using vdial::testing::random_tensor;

namespace {

ModalEmbedding stream(Rng& rng, std::size_t n, std::size_t d, Modality m) {
  return {random_tensor(rng, {n, d}, 1.0, false), m, std::vector<bool>(n, true)};
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct DecoderFixture {
  ParamStore store;
  Rng rng{3};
  TransformerConfig cfg{1, 2, 16, 32, BlockMode::StandardResidual};
  Tensor table = store.normal("token", {20, 16}, 0.5, rng);
  AnswerDecoder dec = make_answer_decoder(store, rng, "dec", table, 10, 2, cfg);
};

FusedState encoded(Rng& rng, std::size_t n, std::size_t d) {
  FusedState f = fuse_streams(std::nullopt, std::nullopt, stream(rng, n, d, Modality::Text));
  f.h_embd = f.h_fuse;
  return f;
}

}  // namespace

TEST(FuseStreams, ConcatenatesInVideoAudioTextOrder) {
  Rng rng(1);
  const auto v = stream(rng, 8, 64, Modality::Video), a = stream(rng, 8, 64, Modality::Audio);
  const auto t = stream(rng, 12, 64, Modality::Text);
  const FusedState f = fuse_streams(v, a, t);
  EXPECT_EQ(f.h_fuse.shape(), (Shape{28, 64}));
  EXPECT_EQ(f.span(Modality::Video), (std::pair<std::size_t, std::size_t>{0, 8}));
  EXPECT_EQ(f.span(Modality::Audio), (std::pair<std::size_t, std::size_t>{8, 16}));
  EXPECT_EQ(f.span(Modality::Text), (std::pair<std::size_t, std::size_t>{16, 28}));
  EXPECT_EQ(f.h_fuse.at(9, 5), a.states.at(1, 5));
  EXPECT_EQ(f.h_fuse.at(27, 63), t.states.at(11, 63));
}

TEST(FuseStreams, AbsentModalitiesLeaveEmptySpans) {
  Rng rng(2);
  const FusedState f = fuse_streams(std::nullopt, std::nullopt, stream(rng, 5, 8, Modality::Text));
  EXPECT_EQ(f.length(), 5u);
  EXPECT_EQ(f.span(Modality::Video), (std::pair<std::size_t, std::size_t>{0, 0}));
}

TEST(FuseStreams, WidthMismatchThrows) {
  Rng rng(3);
  try {
    fuse_streams(stream(rng, 4, 32, Modality::Video), std::nullopt, stream(rng, 5, 64, Modality::Text));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::DimMismatch);
  }
}

TEST(CrossEncode, PreservesFusedShape) {
  ParamStore store;
  Rng rng(4);
  const auto stack = make_transformer_stack(store, rng, "cross", {});
  const FusedState f = cross_encode(
      fuse_streams(stream(rng, 8, 64, Modality::Video), stream(rng, 8, 64, Modality::Audio),
                   stream(rng, 12, 64, Modality::Text)),
      stack);
  EXPECT_EQ(f.h_embd.shape(), (Shape{28, 64}));
}

TEST(AnswerDecoder, LogitsAreCausal) {
  DecoderFixture fx;
  const FusedState ctx = encoded(fx.rng, 6, 16);
  const std::vector<int> a{2, 7, 9, 11, 5}, b{2, 7, 9, 13, 17};
  const Tensor la = decoder_forward(fx.dec, ctx, a), lb = decoder_forward(fx.dec, ctx, b);
  EXPECT_EQ(la.shape(), (Shape{5, 20}));
  EXPECT_LT(max_abs_diff(slice_rows(la, 0, 3), slice_rows(lb, 0, 3)), 1e-14);
  EXPECT_GT(max_abs_diff(slice_rows(la, 4, 5), slice_rows(lb, 4, 5)), 1e-6);
}

TEST(AnswerDecoder, MaskedContextRowsAreInvisible) {
  DecoderFixture fx;
  FusedState ctx = encoded(fx.rng, 6, 16);
  ctx.mask = {true, true, true, false, false, true};
  const std::vector<int> prefix{2, 7, 9};
  const Tensor before = decoder_forward(fx.dec, ctx, prefix);
  FusedState changed = ctx;
  std::vector<double> v(ctx.h_embd.data().begin(), ctx.h_embd.data().end());
  for (std::size_t c = 0; c < 16; ++c) v[3 * 16 + c] += 5.0;
  changed.h_embd = Tensor::from({6, 16}, v);
  EXPECT_LT(max_abs_diff(before, decoder_forward(fx.dec, changed, prefix)), 1e-14);
}

TEST(AnswerDecoder, NeedsCrossEncodedState) {
  DecoderFixture fx;
  const FusedState raw = fuse_streams(std::nullopt, std::nullopt, stream(fx.rng, 4, 16, Modality::Text));
  const int start[] = {2};
  EXPECT_THROW(decoder_forward(fx.dec, raw, start), Error);
}

TEST(AnswerDecoder, PrefixLongerThanPositionsThrows) {
  DecoderFixture fx;
  const FusedState ctx = encoded(fx.rng, 3, 16);
  const std::vector<int> prefix(11, 5);
  try {
    decoder_forward(fx.dec, ctx, prefix);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SequenceTooLong);
  }
}

TEST(GreedyDecode, ScriptedLogitsStopAtEndToken) {
  // Prefer id len(prefix)+4 until the prefix has 3 tokens, then the end id.
  auto scripted = [](const std::vector<int>& prefix) {
    std::vector<double> logits(10, 0.0);
    logits[prefix.size() < 3 ? prefix.size() + 4 : 3] = 1.0;
    return logits;
  };
  EXPECT_EQ(greedy_decode(scripted, 2, 3, 16), (std::vector<int>{5, 6, 3}));
  EXPECT_EQ(greedy_decode(scripted, 2, 3, 2), (std::vector<int>{5, 6}));
}

TEST(GreedyDecode, TiesGoToLowestId) {
  auto flat = [](const std::vector<int>&) { return std::vector<double>(6, 0.25); };
  EXPECT_EQ(greedy_decode(flat, 2, 5, 3), (std::vector<int>{0, 0, 0}));
}

TEST(GreedyDecode, MatchesArgmaxOfTeacherForcedLogits) {
  DecoderFixture fx;
  const FusedState ctx = encoded(fx.rng, 5, 16);
  const auto out = greedy_decode(fx.dec, ctx, 6);
  ASSERT_FALSE(out.empty());
  std::vector<int> prefix{fx.dec.start_id};
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Tensor logits = decoder_forward(fx.dec, ctx, prefix);
    std::size_t best = 0;
    for (std::size_t v = 1; v < 20; ++v)
      if (logits.at(prefix.size() - 1, v) > logits.at(prefix.size() - 1, best)) best = v;
    EXPECT_EQ(out[i], static_cast<int>(best));
    prefix.push_back(out[i]);
  }
}

TEST(RetrievalScoring, RankTiesBreakByCandidateId) {
  std::vector<RetrievalScore> s{{0, 0, 0, 1.0}, {1, 0, 0, 2.0}, {2, 0, 0, 1.0}, {3, 0, 0, 2.0}};
  rank_scores(s);
  std::vector<std::size_t> order;
  for (const auto& x : s) order.push_back(x.candidate);
  EXPECT_EQ(order, (std::vector<std::size_t>{1, 3, 0, 2}));
  EXPECT_EQ(rank_of(s, 0), 3u);
  EXPECT_THROW(rank_of(s, 9), Error);
}

TEST(RetrievalScoring, CombinedScoreIsWeightedSum) {
  ParamStore store;
  Rng rng(6);
  RetrievalHead head = make_retrieval_head(store, rng, "r", 8);
  head.w_vta = 0.7;
  head.w_nsp = 0.3;
  const Tensor ctx = random_tensor(rng, {1, 8}, 1.0, false);
  std::vector<Tensor> cands;
  for (int i = 0; i < 5; ++i) cands.push_back(random_tensor(rng, {1, 8}, 1.0, false));
  for (const auto& s : score_embeddings(head, ctx, cands)) {
    double ip = 0.0;
    for (std::size_t c = 0; c < 8; ++c) ip += ctx[c] * cands[s.candidate][c];
    EXPECT_NEAR(s.vta_score, ip, 1e-12);
    EXPECT_NEAR(s.combined_score, 0.7 * s.vta_score + 0.3 * s.nsp_logit, 1e-12);
  }
}

TEST(RetrievalScoring, EmptyPoolThrows) {
  ParamStore store;
  Rng rng(7);
  const RetrievalHead head = make_retrieval_head(store, rng, "r", 8);
  try {
    score_embeddings(head, Tensor::zeros({1, 8}), {});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyPool);
  }
}

TEST(VideoDialogModel, CachedVisualFeaturesMatchFullBackbonePass) {
  synth::SynthConfig sc;
  sc.dialogs = 2;
  sc.pool_size = 10;
  const auto data = synth::generate_dataset(sc);
  ModelConfig mc;
  mc.task = Task::Retrieval;
  mc.visual.trainable_blocks = {4, 5};
  VideoDialogModel model(mc, build_vocab(dataset_corpus(data), 256), 1);
  const auto& [key, clip] = *data.clips.begin();
  const Tensor direct = visual_backbone_forward(*model.backbone(), clip.to_tensor());
  EXPECT_EQ(max_abs_diff(model.visual_features(key, clip), direct), 0.0);
  EXPECT_EQ(max_abs_diff(model.visual_features(key, clip), direct), 0.0);
}

TEST(VideoDialogModel, EncodedContextHasAllThreeStreams) {
  synth::SynthConfig sc;
  sc.dialogs = 2;
  sc.pool_size = 10;
  const auto data = synth::generate_dataset(sc);
  VideoDialogModel model(ModelConfig{}, build_vocab(dataset_corpus(data), 256), 1);
  const DialogSample& s = data.samples[3];
  const TokenSequence seq = model.context_tokens(s);
  const FusedState f = model.encode(data, s, seq);
  EXPECT_EQ(f.span(Modality::Video).second - f.span(Modality::Video).first, 8u);
  EXPECT_EQ(f.span(Modality::Audio).second - f.span(Modality::Audio).first, sc.audio_steps);
  EXPECT_EQ(f.span(Modality::Text).second - f.span(Modality::Text).first, seq.size());
  EXPECT_EQ(f.h_embd.shape(), (Shape{f.length(), 64}));
}

TEST(VideoDialogModel, PaperProfileIsShapeOnly) {
  const auto cfg = ModelConfig::paper(Task::Generative);
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(cfg.transformer.d_model, 768u);
  EXPECT_EQ(cfg.visual.feature_dim(), 2048u);  // two 1024-d taps, concatenated
  try {
    VideoDialogModel model(cfg, Vocab::from_tokens(Vocab::reserved_tokens()), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ConfigInvalid);
  }
}
