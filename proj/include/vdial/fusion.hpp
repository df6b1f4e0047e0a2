#pragma once

#include <algorithm>
#include <numeric>
#include <optional>
#include <utility>
#include <vector>

#include "vdial/encoders.hpp"

namespace vdial {

/// H_fuse = [E_v; E_a; E_d] with a modality tag per row. `h_embd` is set by
/// cross_encode().
struct FusedState {
  Tensor h_fuse;
  Tensor h_embd;
  std::vector<Modality> tags;
  std::vector<bool> mask;

  std::size_t length() const { return tags.size(); }

  /// [begin, end) of the rows tagged `m` (empty range when absent).
  std::pair<std::size_t, std::size_t> span(Modality m) const {
    auto first = std::find(tags.begin(), tags.end(), m);
    if (first == tags.end()) return {0, 0};
    auto last = std::find_if(first, tags.end(), [m](Modality t) { return t != m; });
    return {static_cast<std::size_t>(first - tags.begin()), static_cast<std::size_t>(last - tags.begin())};
  }
};

inline FusedState fuse_streams(const std::optional<ModalEmbedding>& ev, const std::optional<ModalEmbedding>& ea,
                               const ModalEmbedding& ed) {
  FusedState out;
  std::vector<Tensor> parts;
  const std::size_t d = ed.states.cols();
  for (const auto* stream : {ev ? &*ev : nullptr, ea ? &*ea : nullptr, &ed}) {
    if (!stream) continue;
    require(stream->states.rank() == 2 && stream->states.cols() == d, ErrorKind::DimMismatch,
            "stream of shape " + shape_string(stream->states.shape()) + " does not share model dim " +
                std::to_string(d));
    require(stream->mask.size() == stream->length(), ErrorKind::ShapeMismatch, "stream mask length");
    parts.push_back(stream->states);
    out.tags.insert(out.tags.end(), stream->length(), stream->modality);
    out.mask.insert(out.mask.end(), stream->mask.begin(), stream->mask.end());
  }
  out.h_fuse = parts.size() == 1 ? parts.front() : concat_rows(parts);
  return out;
}

/// Full self-attention over the fused sequence, N layers, into h_embd.
inline FusedState cross_encode(FusedState state, const TransformerStack& stack,
                               std::vector<std::vector<double>>* probs_out = nullptr) {
  state.h_embd = forward(stack, state.h_fuse, state.mask, probs_out);
  return state;
}

// ---------------------------------------------------------------------------
// Answer decoder
// ---------------------------------------------------------------------------

struct DecoderLayer {
  LayerNormParams self_norm;
  AttentionParams self_attn;
  LayerNormParams cross_norm;
  AttentionParams cross_attn;
  LayerNormParams ffn_norm;
  FeedForward ffn;
};

/// Shares the text encoder's token table; owns positions and the vocabulary head.
struct AnswerDecoder {
  Tensor token;     // [V×d], shared
  Tensor position;  // [max_len×d]
  std::vector<DecoderLayer> layers;
  LayerNormParams final_norm;
  Linear head;
  int start_id = Vocab::kCls;
  int end_id = Vocab::kSep;
};

inline AnswerDecoder make_answer_decoder(ParamStore& store, Rng& rng, const std::string& name, const Tensor& token_table,
                                         std::size_t max_len, std::size_t layers, const TransformerConfig& cfg) {
  cfg.validate();
  AnswerDecoder dec;
  const std::size_t d = cfg.d_model;
  require(token_table.rank() == 2 && token_table.cols() == d, ErrorKind::DimMismatch, "decoder token table width");
  dec.token = token_table;
  dec.position = store.normal(name + ".position_embedding", {max_len, d}, 0.02, rng);
  for (std::size_t i = 0; i < layers; ++i) {
    const std::string p = name + ".layer" + std::to_string(i);
    DecoderLayer layer;
    layer.self_norm = make_layer_norm(store, p + ".self_norm", d);
    layer.self_attn = make_attention(store, rng, p + ".self_attn", d, cfg.heads);
    layer.cross_norm = make_layer_norm(store, p + ".cross_norm", d);
    layer.cross_attn = make_attention(store, rng, p + ".cross_attn", d, cfg.heads);
    layer.ffn_norm = make_layer_norm(store, p + ".ffn_norm", d);
    layer.ffn = {make_linear(store, rng, p + ".ffn.up", d, cfg.d_ff), make_linear(store, rng, p + ".ffn.down", cfg.d_ff, d)};
    dec.layers.push_back(std::move(layer));
  }
  dec.final_norm = make_layer_norm(store, name + ".final_norm", d);
  dec.head = make_linear(store, rng, name + ".head", d, token_table.rows());
  return dec;
}

/// Teacher-forced next-token logits [T×V] for the prefix `answer_ids`
/// (which starts with the start token).
inline Tensor decoder_forward(const AnswerDecoder& dec, const FusedState& fused, std::span<const int> answer_ids) {
  require(fused.h_embd.defined(), ErrorKind::InvalidArgument, "decoder needs a cross-encoded state");
  const std::size_t t = answer_ids.size();
  require(t >= 1, ErrorKind::InvalidArgument, "decoder needs at least the start token");
  require(t <= dec.position.rows(), ErrorKind::SequenceTooLong,
          "answer prefix of " + std::to_string(t) + " tokens exceeds " + std::to_string(dec.position.rows()));
  Tensor x = add(gather_rows(dec.token, answer_ids), slice_rows(dec.position, 0, t));
  for (const auto& layer : dec.layers) {
    const Tensor s = apply(layer.self_norm, x);
    x = add(x, multi_head_attention(layer.self_attn, s, s, {}, true));
    x = add(x, multi_head_attention(layer.cross_attn, apply(layer.cross_norm, x), fused.h_embd, fused.mask));
    x = add(x, apply(layer.ffn, apply(layer.ffn_norm, x)));
  }
  return apply(dec.head, apply(dec.final_norm, x));
}

/// Appends argmax(next_logits(prefix)) until `end_id` or `max_len` tokens.
/// Ties go to the lowest id. The start token is not part of the output;
/// the end token is, when produced.
template <typename NextLogits>
std::vector<int> greedy_decode(NextLogits&& next_logits, int start_id, int end_id, std::size_t max_len) {
  require(max_len >= 1, ErrorKind::InvalidArgument, "max_len must be at least 1");
  std::vector<int> prefix{start_id};
  std::vector<int> out;
  while (out.size() < max_len) {
    const auto logits = next_logits(std::as_const(prefix));
    require(!logits.empty(), ErrorKind::InvalidArgument, "empty logits");
    const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
    const int id = static_cast<int>(best);
    out.push_back(id);
    if (id == end_id) break;
    prefix.push_back(id);
  }
  return out;
}

inline std::vector<int> greedy_decode(const AnswerDecoder& dec, const FusedState& fused, std::size_t max_len) {
  NoGradGuard no_grad;
  max_len = std::min(max_len, dec.position.rows());
  return greedy_decode(
      [&](const std::vector<int>& prefix) {
        const Tensor logits = decoder_forward(dec, fused, prefix);
        const std::size_t v = logits.cols();
        const auto row = logits.data().subspan((prefix.size() - 1) * v, v);
        return std::vector<double>(row.begin(), row.end());
      },
      dec.start_id, dec.end_id, max_len);
}

// ---------------------------------------------------------------------------
// Retrieval head
// ---------------------------------------------------------------------------

enum class Pooling { FirstToken, Mean };

struct RetrievalHead {
  Linear context_proj;  // fused_e
  Linear answer_proj;   // a_e
  Linear nsp;           // 2-way on fused_e ⊙ a_e
  Pooling pooling = Pooling::FirstToken;
  double w_vta = 1.0;
  double w_nsp = 1.0;
};

inline RetrievalHead make_retrieval_head(ParamStore& store, Rng& rng, const std::string& name, std::size_t d) {
  return {make_linear(store, rng, name + ".context_proj", d, d), make_linear(store, rng, name + ".answer_proj", d, d),
          make_linear(store, rng, name + ".nsp", d, 2)};
}

inline Tensor pool_states(const Tensor& states, Pooling pooling) {
  return pooling == Pooling::FirstToken ? slice_rows(states, 0, 1) : mean_rows(states);
}

/// fused_e: [1×d] pooled, projected context.
inline Tensor context_embedding(const RetrievalHead& head, const FusedState& fused) {
  return apply(head.context_proj, pool_states(fused.h_embd, head.pooling));
}

/// a_e: [1×d] from the text encoder's first-token state of [CLS] A [SEP].
inline Tensor answer_embedding(const RetrievalHead& head, const TextEncoder& enc, const TokenSequence& candidate) {
  return apply(head.answer_proj, pool_states(text_encoder_forward(enc, candidate).states, Pooling::FirstToken));
}

/// [1×2] NSP logits; index 1 means "belongs with the context".
inline Tensor nsp_logits(const RetrievalHead& head, const Tensor& context_vec, const Tensor& answer_vec) {
  return apply(head.nsp, mul(context_vec, answer_vec));
}

struct RetrievalScore {
  std::size_t candidate = 0;
  double vta_score = 0.0;
  double nsp_logit = 0.0;
  double combined_score = 0.0;
};

/// Sorts descending by combined score, ties by ascending candidate id.
inline void rank_scores(std::vector<RetrievalScore>& scores) {
  std::stable_sort(scores.begin(), scores.end(), [](const RetrievalScore& a, const RetrievalScore& b) {
    if (a.combined_score != b.combined_score) return a.combined_score > b.combined_score;
    return a.candidate < b.candidate;
  });
}

/// Scores precomputed candidate embeddings ([1×d] each) against `context_vec`.
inline std::vector<RetrievalScore> score_embeddings(const RetrievalHead& head, const Tensor& context_vec,
                                                    std::span<const Tensor> candidates) {
  require(!candidates.empty(), ErrorKind::EmptyPool, "empty candidate pool");
  NoGradGuard no_grad;
  std::vector<RetrievalScore> scores;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    RetrievalScore s;
    s.candidate = i;
    s.vta_score = dot(context_vec, candidates[i]).item();
    if (head.w_nsp != 0.0) {
      const Tensor logits = nsp_logits(head, context_vec, candidates[i]);
      s.nsp_logit = logits[1] - logits[0];
    }
    s.combined_score = head.w_vta * s.vta_score + head.w_nsp * s.nsp_logit;
    scores.push_back(s);
  }
  rank_scores(scores);
  return scores;
}

inline std::vector<RetrievalScore> score_candidates(const RetrievalHead& head, const TextEncoder& enc,
                                                    const FusedState& context,
                                                    std::span<const TokenSequence> candidates) {
  require(!candidates.empty(), ErrorKind::EmptyPool, "empty candidate pool");
  NoGradGuard no_grad;
  const Tensor ctx = context_embedding(head, context);
  std::vector<Tensor> embedded;
  embedded.reserve(candidates.size());
  for (const auto& c : candidates) embedded.push_back(answer_embedding(head, enc, c));
  return score_embeddings(head, ctx, embedded);
}

/// 1-based rank of candidate `target` in a ranked score list.
inline std::size_t rank_of(std::span<const RetrievalScore> ranked, std::size_t target) {
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (ranked[i].candidate == target) return i + 1;
  fail(ErrorKind::InvalidArgument, "candidate " + std::to_string(target) + " not in ranking");
}

}  // namespace vdial
