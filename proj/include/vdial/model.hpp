#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vdial/fusion.hpp"
#include "vdial/objectives.hpp"
#include "vdial/synth.hpp"

namespace vdial {

enum class Task { Generative, Retrieval };

inline const char* to_string(Task t) { return t == Task::Generative ? "generative" : "retrieval"; }

struct ModelConfig {
  Task task = Task::Generative;
  std::string profile = "toy";
  TransformerConfig transformer;
  std::size_t decoder_layers = 2;
  std::size_t vocab_max = 512;
  std::size_t max_text_positions = 192;
  std::size_t max_answer_len = 16;
  std::size_t max_media_tokens = 64;
  VisualBackboneConfig visual = VisualBackboneConfig::toy();
  bool use_video = true;
  bool use_audio = true;
  std::size_t audio_dim = 32;
  DialogInputOptions text;
  Pooling pooling = Pooling::FirstToken;
  double w_vta = 1.0;
  double w_nsp = 1.0;

  /// Shapes of the reported system: 768-wide, 6 layers, 1024-d audio and
  /// visual taps, 224×224 frames; 100-word history (200 for retrieval).
  static ModelConfig paper(Task task) {
    ModelConfig cfg;
    cfg.task = task;
    cfg.profile = "paper";
    cfg.transformer = {6, 12, 768, 3072, BlockMode::StandardResidual};
    cfg.decoder_layers = 6;
    cfg.vocab_max = 30522;
    cfg.max_text_positions = 512;
    cfg.visual = VisualBackboneConfig::paper();
    cfg.audio_dim = 1024;
    cfg.text.max_words = task == Task::Retrieval ? 200 : 100;
    return cfg;
  }

  void validate() const {
    require(profile == "toy" || profile == "paper", ErrorKind::ConfigInvalid, "unknown profile " + profile);
    transformer.validate();
    visual.validate();
    require(decoder_layers >= 1, ErrorKind::ConfigInvalid, "decoder needs at least one layer");
    require(text.max_words >= 8, ErrorKind::ConfigInvalid, "max_words must be at least 8");
    require(max_answer_len >= 2 && max_media_tokens >= 1, ErrorKind::ConfigInvalid, "sequence limits too small");
    require(w_vta >= 0.0 && w_nsp >= 0.0, ErrorKind::ConfigInvalid, "retrieval weights must be nonnegative");
  }
};

/// Every text string the vocabulary must cover.
inline std::vector<std::string> dataset_corpus(const synth::Dataset& data) {
  std::vector<std::string> corpus;
  for (const auto& s : data.samples) {
    corpus.push_back(s.caption);
    corpus.push_back(s.question);
    corpus.push_back(s.answer);
    for (const auto& c : s.candidates) corpus.push_back(c);
  }
  return corpus;
}

struct ContextOptions {
  bool strip_history = false;
};

/// The full video-dialog network for one task. Non-copyable: parameters are
/// shared handles owned through `store`.
class VideoDialogModel {
 public:
  VideoDialogModel(ModelConfig cfg, Vocab vocab, std::uint64_t seed) : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.validate();
    require(cfg_.profile == "toy", ErrorKind::ConfigInvalid, "the paper profile only validates shapes");
    Rng rng(mix_seed(seed, 0x1417));
    const auto& t = cfg_.transformer;
    text_ = make_text_encoder(store_, rng, "text", vocab_.size(), cfg_.max_text_positions, t);
    if (cfg_.use_video) {
      backbone_ = make_visual_backbone(store_, rng, "backbone", cfg_.visual);
      video_ = make_token_encoder(store_, rng, "video", cfg_.visual.feature_dim(), cfg_.max_media_tokens, t);
    }
    if (cfg_.use_audio) audio_ = make_token_encoder(store_, rng, "audio", cfg_.audio_dim, cfg_.max_media_tokens, t);
    cross_ = make_transformer_stack(store_, rng, "cross", t);
    mlm_head_ = make_token_head(store_, rng, "mlm_head", t.d_model, vocab_.size());
    if (cfg_.task == Task::Generative) {
      decoder_ = make_answer_decoder(store_, rng, "decoder", text_.embeddings.token, cfg_.max_answer_len + 1,
                                     cfg_.decoder_layers, t);
    } else {
      retrieval_ = make_retrieval_head(store_, rng, "retrieval", t.d_model);
      retrieval_->pooling = cfg_.pooling;
      retrieval_->w_vta = cfg_.w_vta;
      retrieval_->w_nsp = cfg_.w_nsp;
    }
  }

  VideoDialogModel(const VideoDialogModel&) = delete;
  VideoDialogModel& operator=(const VideoDialogModel&) = delete;

  const ModelConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const TextEncoder& text_encoder() const { return text_; }
  const TokenHead& mlm_head() const { return mlm_head_; }
  const AnswerDecoder& decoder() const {
    require(decoder_.has_value(), ErrorKind::InvalidArgument, "model has no decoder");
    return *decoder_;
  }
  const RetrievalHead& retrieval() const {
    require(retrieval_.has_value(), ErrorKind::InvalidArgument, "model has no retrieval head");
    return *retrieval_;
  }
  const std::optional<VisualBackbone>& backbone() const { return backbone_; }

  TokenSequence context_tokens(const DialogSample& sample, const ContextOptions& opts = {}) const {
    if (!opts.strip_history) return assemble_dialog_input(sample, cfg_.text, vocab_);
    DialogSample stripped = sample;
    stripped.history.clear();
    return assemble_dialog_input(stripped, cfg_.text, vocab_);
  }

  /// f_v for a clip. The output of the leading frozen blocks depends on the
  /// clip only and is cached under `clip_key`.
  Tensor visual_features(const std::string& clip_key, const VideoClip& clip) const {
    const VisualBackbone& net = *backbone_;
    const std::size_t frozen = frozen_prefix(net);
    auto it = feature_cache_.find(clip_key);
    if (it == feature_cache_.end()) {
      NoGradGuard no_grad;
      auto act = backbone_run(net, backbone_input(net, clip.to_tensor()), frozen);
      it = feature_cache_.emplace(clip_key, std::move(act)).first;
    }
    return backbone_features(backbone_run(net, it->second, VisualBackboneConfig::kBlocks));
  }

  void clear_feature_cache() const { feature_cache_.clear(); }

  /// Encodes and cross-encodes one dialog context. `ids` substitutes masked
  /// token ids for the text stream when nonempty.
  FusedState encode(const TokenSequence& seq, std::span<const int> ids, const std::string& clip_key,
                    const VideoClip* clip, const AudioFeatures* audio) const {
    std::optional<ModalEmbedding> ev, ea;
    if (cfg_.use_video) {
      require(clip != nullptr, ErrorKind::InvalidArgument, "video model needs a clip");
      ev = visual_encoder_forward(*video_, visual_features(clip_key, *clip));
    }
    if (cfg_.use_audio) {
      require(audio != nullptr, ErrorKind::EmptyAudio, "audio model needs audio features");
      ea = audio_encoder_forward(*audio_, *audio);
    }
    return cross_encode(fuse_streams(ev, ea, text_encoder_forward(text_, seq, ids)), cross_);
  }

  FusedState encode(const synth::Dataset& data, const DialogSample& s, const TokenSequence& seq,
                    std::span<const int> ids = {}) const {
    const VideoClip* clip = nullptr;
    const AudioFeatures* audio = nullptr;
    if (cfg_.use_video) clip = &data.clips.at(s.video_ref);
    if (cfg_.use_audio) audio = &data.audio.at(s.audio_ref);
    return encode(seq, ids, s.video_ref, clip, audio);
  }

  std::vector<int> answer_tokens(const std::string& answer) const {
    auto ids = tokenize(answer, vocab_);
    if (ids.size() > cfg_.max_answer_len) ids.resize(cfg_.max_answer_len);
    return ids;
  }

  Tensor answer_embedding(const std::string& answer) const {
    return vdial::answer_embedding(*retrieval_, text_, assemble_answer_input(answer, vocab_));
  }

 private:
  ModelConfig cfg_;
  Vocab vocab_;
  ParamStore store_;
  TextEncoder text_;
  std::optional<VisualBackbone> backbone_;
  std::optional<TokenEncoder> video_;
  std::optional<TokenEncoder> audio_;
  TransformerStack cross_;
  TokenHead mlm_head_;
  std::optional<AnswerDecoder> decoder_;
  std::optional<RetrievalHead> retrieval_;
  mutable std::map<std::string, BackboneActivation> feature_cache_;
};

}  // namespace vdial
