#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vdial/metrics.hpp"
#include "vdial/model.hpp"

namespace vdial {

struct TrainConfig {
  std::size_t max_steps = 2000;
  std::size_t batch = 8;
  AdamConfig adam{};
  std::size_t eval_every = 100;
  std::size_t patience = 5;
  double mask_rate = 0.15;
  std::size_t k_negatives = 7;
  std::uint64_t seed = 1;
};

/// Masks `seq` at `rate`, redrawing until at least one token is selected.
inline MaskingOutcome mask_nonempty(const TokenSequence& seq, double rate, Rng& rng, std::size_t vocab_size) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    auto out = apply_masking(seq, rate, rng, MaskingScheme::ReplaceAll, vocab_size);
    if (!out.mask_positions.empty()) return out;
  }
  fail(ErrorKind::EmptyLossSet, "sequence has no maskable tokens");
}

/// CMLM + reconstruction for one sample, from one pass over the masked context.
inline LossBundle generative_losses(const VideoDialogModel& model, const synth::Dataset& data, const DialogSample& s,
                                    double mask_rate, Rng& rng) {
  const TokenSequence seq = model.context_tokens(s);
  const MaskingOutcome masking = mask_nonempty(seq, mask_rate, rng, model.vocab().size());
  const FusedState fused = model.encode(data, s, seq, masking.masked_ids);
  const auto& dec = model.decoder();
  const DecoderIo io = decoder_io(model.answer_tokens(s.answer), dec.start_id, dec.end_id);
  LossBundle bundle;
  bundle.l_cmlm = cmlm_loss(fused, masking, model.mlm_head());
  bundle.l_rec = reconstruction_loss(decoder_forward(dec, fused, io.inputs), io.targets);
  return bundle;
}

/// MLM + NSP + VTA for one sample; negatives are drawn from its candidate pool.
inline LossBundle retrieval_losses(const VideoDialogModel& model, const synth::Dataset& data, const DialogSample& s,
                                   double mask_rate, std::size_t k_negatives, Rng& rng) {
  const TokenSequence seq = model.context_tokens(s);
  const MaskingOutcome masking = mask_nonempty(seq, mask_rate, rng, model.vocab().size());
  const FusedState fused = model.encode(data, s, seq, masking.masked_ids);
  const auto& head = model.retrieval();

  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < s.candidates.size(); ++i)
    if (static_cast<int>(i) != s.gt_index) others.push_back(i);
  require(!others.empty(), ErrorKind::NoNegatives, "candidate pool has no negatives for " + s.id);
  rng.shuffle(std::span<std::size_t>(others));
  others.resize(std::min(k_negatives, others.size()));

  const Tensor ctx = context_embedding(head, fused);
  const Tensor positive = model.answer_embedding(s.answer);
  std::vector<Tensor> negatives;
  for (std::size_t i : others) negatives.push_back(model.answer_embedding(s.candidates[i]));

  LossBundle bundle;
  bundle.k_negatives = k_negatives;
  bundle.w_nsp = head.w_nsp;
  bundle.w_vta = head.w_vta;
  bundle.l_mlm = cmlm_loss(fused, masking, model.mlm_head());
  bundle.l_nsp = scale(add(nsp_loss(nsp_logits(head, ctx, positive), 1), nsp_loss(nsp_logits(head, ctx, negatives.front()), 0)), 0.5);
  bundle.l_vta = vta_loss(ctx, positive, negatives);
  return bundle;
}

inline LossBundle sample_losses(const VideoDialogModel& model, const synth::Dataset& data, const DialogSample& s,
                                const TrainConfig& cfg, Rng& rng) {
  if (model.config().task == Task::Generative) return generative_losses(model, data, s, cfg.mask_rate, rng);
  return retrieval_losses(model, data, s, cfg.mask_rate, cfg.k_negatives, rng);
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct GenerationEval {
  GenerativeReport report;
  double token_accuracy = 0.0;  // teacher-forced
  double exact_match = 0.0;     // greedy output == reference tokens
  double loss = 0.0;            // teacher-forced reconstruction loss
  std::vector<std::string> predictions;
  std::vector<std::string> references;
};

inline std::string decode_answer(const VideoDialogModel& model, std::span<const int> ids) {
  std::vector<int> body(ids.begin(), ids.end());
  if (!body.empty() && body.back() == model.decoder().end_id) body.pop_back();
  return detokenize(body, model.vocab());
}

inline GenerationEval evaluate_generation(const VideoDialogModel& model, const synth::Dataset& data,
                                          const std::vector<const DialogSample*>& samples,
                                          const ContextOptions& opts = {}, bool decode = true) {
  require(!samples.empty(), ErrorKind::EmptyInput, "nothing to evaluate");
  NoGradGuard no_grad;
  GenerationEval ev;
  const auto& dec = model.decoder();
  std::size_t correct = 0, total = 0, exact = 0;
  for (const DialogSample* s : samples) {
    const TokenSequence seq = model.context_tokens(*s, opts);
    const FusedState fused = model.encode(data, *s, seq);
    const auto answer = model.answer_tokens(s->answer);
    const DecoderIo io = decoder_io(answer, dec.start_id, dec.end_id);
    const Tensor logits = decoder_forward(dec, fused, io.inputs);
    ev.loss += reconstruction_loss(logits, io.targets).item();
    const std::size_t v = logits.cols();
    for (std::size_t i = 0; i < io.targets.size(); ++i) {
      const auto row = logits.data().subspan(i * v, v);
      const auto best = std::max_element(row.begin(), row.end()) - row.begin();
      correct += best == io.targets[i] ? 1 : 0;
      ++total;
    }
    if (decode) {
      const auto out = greedy_decode(dec, fused, model.config().max_answer_len + 1);
      exact += out == io.targets ? 1 : 0;
      ev.predictions.push_back(decode_answer(model, out));
      ev.references.push_back(detokenize(answer, model.vocab()));
    }
  }
  ev.loss /= static_cast<double>(samples.size());
  ev.token_accuracy = static_cast<double>(correct) / static_cast<double>(total);
  if (decode) {
    ev.exact_match = static_cast<double>(exact) / static_cast<double>(samples.size());
    ev.report = generative_report(ev.predictions, ev.references);
  }
  return ev;
}

struct RetrievalEval {
  RetrievalReport report;
  std::vector<std::size_t> ranks;
  std::map<int, RetrievalReport> by_round;
};

inline std::map<int, RetrievalReport> per_round(const std::vector<const DialogSample*>& samples,
                                                const std::vector<std::size_t>& ranks) {
  std::map<int, std::vector<std::size_t>> grouped;
  for (std::size_t i = 0; i < samples.size(); ++i) grouped[samples[i]->round].push_back(ranks[i]);
  std::map<int, RetrievalReport> out;
  for (const auto& [round, r] : grouped) out[round] = retrieval_report(r);
  return out;
}

inline RetrievalEval evaluate_retrieval(const VideoDialogModel& model, const synth::Dataset& data,
                                        const std::vector<const DialogSample*>& samples,
                                        const ContextOptions& opts = {}) {
  require(!samples.empty(), ErrorKind::EmptyInput, "nothing to evaluate");
  NoGradGuard no_grad;
  const auto& head = model.retrieval();
  std::map<std::string, Tensor> answer_cache;
  RetrievalEval ev;
  for (const DialogSample* s : samples) {
    const FusedState fused = model.encode(data, *s, model.context_tokens(*s, opts));
    const Tensor ctx = context_embedding(head, fused);
    std::vector<Tensor> cands;
    cands.reserve(s->candidates.size());
    for (const auto& c : s->candidates) {
      auto it = answer_cache.find(c);
      if (it == answer_cache.end()) it = answer_cache.emplace(c, model.answer_embedding(c)).first;
      cands.push_back(it->second);
    }
    const auto ranked = score_embeddings(head, ctx, cands);
    ev.ranks.push_back(rank_of(ranked, static_cast<std::size_t>(s->gt_index)));
  }
  ev.report = retrieval_report(ev.ranks);
  ev.by_round = per_round(samples, ev.ranks);
  return ev;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
};

struct EvalRecord {
  std::size_t step = 0;
  double metric = 0.0;
};

/// Validation signal for early stopping; larger is better.
struct Monitor {
  std::function<double(const VideoDialogModel&)> metric;
  std::optional<double> stop_at;  // stop as soon as metric ≥ stop_at
};

struct TrainResult {
  std::vector<StepRecord> losses;
  std::vector<EvalRecord> evals;
  std::size_t steps = 0;
  std::size_t best_step = 0;
  double best_metric = -std::numeric_limits<double>::infinity();
  bool reached_target = false;
};

struct Trainer {
  VideoDialogModel& model;
  const synth::Dataset& data;
  std::vector<const DialogSample*> samples;
  TrainConfig cfg;
  AdamState adam;
  Rng rng;
  std::vector<Tensor> params;
  std::size_t step = 0;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;

  Trainer(VideoDialogModel& m, const synth::Dataset& d, std::vector<const DialogSample*> train, TrainConfig c)
      : model(m), data(d), samples(std::move(train)), cfg(c), rng(mix_seed(c.seed, 0x7EA1)) {
    require(!samples.empty(), ErrorKind::EmptyInput, "no training samples");
    require(cfg.batch >= 1, ErrorKind::ConfigInvalid, "batch must be positive");
    adam.config = cfg.adam;
    params = model.params().trainable();
    for (auto& p : params) p.mutable_grad();
    order.resize(samples.size());
  }

  const DialogSample& next_sample() {
    if (cursor == 0) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(std::span<std::size_t>(order));
    }
    const DialogSample& s = *samples[order[cursor]];
    cursor = (cursor + 1) % order.size();
    return s;
  }

  /// One optimizer step over a batch; returns the mean total loss.
  double train_step() {
    double mean = 0.0;
    const double inv = 1.0 / static_cast<double>(cfg.batch);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const DialogSample& s = next_sample();
      Tape tape;
      const Tensor loss = scale(total_loss(sample_losses(model, data, s, cfg, rng)), inv);
      require(std::isfinite(loss.item()), ErrorKind::InvalidArgument, "non-finite loss at step " + std::to_string(step));
      tape.backward(loss);
      mean += loss.item();
    }
    adam_step(params, adam);
    ++step;
    return mean;
  }

  std::vector<std::vector<double>> snapshot() const {
    std::vector<std::vector<double>> out;
    for (const auto& p : model.params().all()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    return out;
  }

  void restore(const std::vector<std::vector<double>>& values) {
    auto& all = model.params().all();
    for (std::size_t i = 0; i < all.size(); ++i) {
      Tensor t = all[i].tensor;
      std::copy(values[i].begin(), values[i].end(), t.data().begin());
    }
  }

  /// Trains up to cfg.max_steps. With a monitor, evaluates every eval_every
  /// steps, stops after `patience` evaluations without improvement (or once
  /// the target is reached) and restores the best parameters.
  TrainResult run(const Monitor* monitor = nullptr,
                  const std::function<void(const StepRecord&)>& on_step = {}) {
    TrainResult result;
    std::vector<std::vector<double>> best;
    std::size_t stale = 0;
    auto evaluate = [&] {
      const double m = monitor->metric(model);
      result.evals.push_back({step, m});
      if (m > result.best_metric) {
        result.best_metric = m;
        result.best_step = step;
        best = snapshot();
        stale = 0;
      } else {
        ++stale;
      }
      if (monitor->stop_at && m >= *monitor->stop_at) result.reached_target = true;
    };
    if (monitor) evaluate();
    while (step < cfg.max_steps && !result.reached_target) {
      const StepRecord rec{step + 1, train_step()};
      result.losses.push_back(rec);
      if (on_step) on_step(rec);
      if (monitor && (step % cfg.eval_every == 0 || step == cfg.max_steps)) {
        evaluate();
        if (stale >= cfg.patience) break;
      }
    }
    result.steps = step;
    if (monitor && !best.empty() && !result.reached_target) restore(best);
    return result;
  }
};

}  // namespace vdial
