#pragma once

#include <optional>
#include <vector>

#include "vdial/fusion.hpp"

namespace vdial {

/// Vocabulary prediction head over fused or encoded token states.
struct TokenHead {
  LayerNormParams norm;
  Linear proj;
};

inline TokenHead make_token_head(ParamStore& store, Rng& rng, const std::string& name, std::size_t d,
                                 std::size_t vocab_size) {
  return {make_layer_norm(store, name + ".norm", d), make_linear(store, rng, name + ".proj", d, vocab_size, 0.02)};
}

inline Tensor apply(const TokenHead& head, const Tensor& x) { return apply(head.proj, apply(head.norm, x)); }

/// Cross-entropy at the masked text positions, read from the text slice of
/// h_embd (or any [L×d] state whose text rows start at `text_offset`).
inline Tensor masked_token_loss(const Tensor& states, std::size_t text_offset, const MaskingOutcome& masking,
                                const TokenHead& head) {
  require(!masking.mask_positions.empty(), ErrorKind::EmptyLossSet, "no masked positions");
  std::vector<int> rows;
  std::vector<int> targets;
  rows.reserve(masking.mask_positions.size());
  for (std::size_t p : masking.mask_positions) {
    rows.push_back(static_cast<int>(text_offset + p));
    targets.push_back(masking.labels[p]);
  }
  const Tensor logits = apply(head, gather_rows(states, rows));
  return cross_entropy_logits(logits, targets, {});
}

/// L_cmlm: masked text tokens predicted from the cross-encoded state.
inline Tensor cmlm_loss(const FusedState& fused, const MaskingOutcome& masking, const TokenHead& head) {
  return masked_token_loss(fused.h_embd, fused.span(Modality::Text).first, masking, head);
}

/// Decoder input/target pair for an answer: ([start] a..., a... [end]).
struct DecoderIo {
  std::vector<int> inputs;
  std::vector<int> targets;
};

inline DecoderIo decoder_io(std::span<const int> answer_tokens, int start_id, int end_id) {
  DecoderIo io;
  io.inputs.push_back(start_id);
  io.inputs.insert(io.inputs.end(), answer_tokens.begin(), answer_tokens.end());
  io.targets.assign(answer_tokens.begin(), answer_tokens.end());
  io.targets.push_back(end_id);
  return io;
}

/// L_rec: mean token cross-entropy over non-pad target positions.
inline Tensor reconstruction_loss(const Tensor& logits, std::span<const int> targets,
                                  const std::vector<bool>& pad_mask = {}) {
  return cross_entropy_logits(logits, targets, pad_mask);
}

/// Two-way cross-entropy on [1×2] NSP logits; label 1 = belongs together.
inline Tensor nsp_loss(const Tensor& logits, int label) {
  require(label == 0 || label == 1, ErrorKind::InvalidArgument, "NSP label must be 0 or 1");
  require(logits.numel() == 2, ErrorKind::ShapeMismatch, "NSP logits must have two entries");
  const int target[] = {label};
  return cross_entropy_logits(reshape(logits, {1, 2}), target, {});
}

/// -log softmax of <c, p> among <c, p>, <c, n_1>, ..., <c, n_k>.
inline Tensor vta_loss(const Tensor& context_vec, const Tensor& positive, const std::vector<Tensor>& negatives) {
  require(!negatives.empty(), ErrorKind::NoNegatives, "VTA needs at least one negative");
  const std::size_t d = context_vec.numel();
  std::vector<Tensor> rows{reshape(positive, {1, d})};
  for (const auto& n : negatives) {
    require(n.numel() == d, ErrorKind::ShapeMismatch, "negative embedding width");
    rows.push_back(reshape(n, {1, d}));
  }
  const Tensor scores = matmul(concat_rows(rows), reshape(context_vec, {d, 1}));
  const int target[] = {0};
  return cross_entropy_logits(reshape(scores, {1, rows.size()}), target, {});
}

struct LossBundle {
  std::optional<Tensor> l_cmlm;
  std::optional<Tensor> l_rec;
  std::optional<Tensor> l_mlm;
  std::optional<Tensor> l_nsp;
  std::optional<Tensor> l_vta;
  double w_cmlm = 1.0;
  double w_rec = 1.0;
  double w_mlm = 1.0;
  double w_nsp = 1.0;
  double w_vta = 1.0;
  std::size_t k_negatives = 7;

  std::size_t active() const {
    return static_cast<std::size_t>(l_cmlm.has_value()) + l_rec.has_value() + l_mlm.has_value() +
           l_nsp.has_value() + l_vta.has_value();
  }
};

inline Tensor total_loss(const LossBundle& bundle) {
  require(bundle.active() > 0, ErrorKind::NoActiveLoss, "no active loss in bundle");
  std::optional<Tensor> total;
  auto accumulate = [&](const std::optional<Tensor>& term, double weight) {
    if (!term) return;
    require(weight >= 0.0, ErrorKind::InvalidArgument, "loss weights must be nonnegative");
    const Tensor weighted = scale(*term, weight);
    total = total ? add(*total, weighted) : weighted;
  };
  accumulate(bundle.l_cmlm, bundle.w_cmlm);
  accumulate(bundle.l_rec, bundle.w_rec);
  accumulate(bundle.l_mlm, bundle.w_mlm);
  accumulate(bundle.l_nsp, bundle.w_nsp);
  accumulate(bundle.l_vta, bundle.w_vta);
  return *total;
}

}  // namespace vdial
