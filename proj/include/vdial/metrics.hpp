#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vdial/error.hpp"
#include "vdial/text.hpp"

namespace vdial {

using Tokens = std::vector<std::string>;

/// Lowercase, whitespace and punctuation split; shared by every metric.
inline Tokens metric_tokens(std::string_view text) { return basic_words(text); }

namespace detail {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

inline NgramCounts ngram_counts(const Tokens& tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

/// Corpus BLEU-n, one reference per candidate, uniform weights, no smoothing.
inline double bleu_n(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references, std::size_t n) {
  require(!candidates.empty(), ErrorKind::EmptyCorpus, "BLEU over an empty corpus");
  require(candidates.size() == references.size(), ErrorKind::InvalidArgument, "candidate/reference count mismatch");
  require(n >= 1 && n <= 4, ErrorKind::InvalidArgument, "BLEU order must be in [1, 4]");
  std::vector<double> matched(n, 0.0), total(n, 0.0);
  double cand_len = 0.0, ref_len = 0.0;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    cand_len += static_cast<double>(candidates[s].size());
    ref_len += static_cast<double>(references[s].size());
    for (std::size_t k = 1; k <= n; ++k) {
      const auto cand = detail::ngram_counts(candidates[s], k);
      const auto ref = detail::ngram_counts(references[s], k);
      for (const auto& [gram, count] : cand) {
        auto it = ref.find(gram);
        if (it != ref.end()) matched[k - 1] += static_cast<double>(std::min(count, it->second));
        total[k - 1] += static_cast<double>(count);
      }
    }
  }
  double log_sum = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (matched[k] == 0.0) return 0.0;
    log_sum += std::log(matched[k] / total[k]);
  }
  const double bp = cand_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
  return bp * std::exp(log_sum / static_cast<double>(n));
}

// ---------------------------------------------------------------------------
// ROUGE-L
// ---------------------------------------------------------------------------

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l(const Tokens& candidate, const Tokens& reference, double beta = 1.2) {
  require(!reference.empty(), ErrorKind::EmptyReference, "ROUGE-L needs a nonempty reference");
  const auto lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double r = lcs / static_cast<double>(reference.size());
  const double p = lcs / static_cast<double>(candidate.size());
  const double b2 = beta * beta;
  return (1.0 + b2) * r * p / (r + b2 * p);
}

// ---------------------------------------------------------------------------
// CIDEr
// ---------------------------------------------------------------------------

struct CiderResult {
  double score = 0.0;
  std::vector<double> per_sample;
};

/// Mean over n = 1..max_n of the tf-idf cosine between candidate and
/// reference n-gram vectors, times a Gaussian length penalty, scaled by 10.
/// Document frequencies come from the references; a zero-norm vector
/// contributes a cosine of 0.
inline CiderResult cider_score(const std::vector<Tokens>& candidates, const std::vector<Tokens>& references,
                               std::size_t max_n = 4, double sigma = 6.0) {
  require(candidates.size() == references.size(), ErrorKind::InvalidArgument, "candidate/reference count mismatch");
  require(candidates.size() >= 2, ErrorKind::CorpusTooSmall, "CIDEr needs at least two samples");
  const std::size_t count = candidates.size();
  const double log_n = std::log(static_cast<double>(count));

  std::vector<std::vector<detail::NgramCounts>> cand(count), ref(count);
  std::vector<std::map<std::vector<std::string>, double>> doc_freq(max_n);
  for (std::size_t s = 0; s < count; ++s)
    for (std::size_t k = 1; k <= max_n; ++k) {
      cand[s].push_back(detail::ngram_counts(candidates[s], k));
      ref[s].push_back(detail::ngram_counts(references[s], k));
      for (const auto& entry : ref[s].back()) doc_freq[k - 1][entry.first] += 1.0;
    }

  auto idf = [&](std::size_t k, const std::vector<std::string>& gram) {
    auto it = doc_freq[k].find(gram);
    const double df = it == doc_freq[k].end() ? 0.0 : it->second;
    return log_n - std::log(std::max(1.0, df));
  };

  CiderResult result;
  for (std::size_t s = 0; s < count; ++s) {
    const double delta = static_cast<double>(candidates[s].size()) - static_cast<double>(references[s].size());
    const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
    double total = 0.0;
    for (std::size_t k = 0; k < max_n; ++k) {
      double dot = 0.0, norm_c = 0.0, norm_r = 0.0;
      for (const auto& [gram, c] : cand[s][k]) {
        const double w = static_cast<double>(c) * idf(k, gram);
        norm_c += w * w;
        auto it = ref[s][k].find(gram);
        if (it != ref[s][k].end()) dot += w * static_cast<double>(it->second) * idf(k, gram);
      }
      for (const auto& [gram, c] : ref[s][k]) {
        const double w = static_cast<double>(c) * idf(k, gram);
        norm_r += w * w;
      }
      if (norm_c > 0.0 && norm_r > 0.0) total += dot / (std::sqrt(norm_c) * std::sqrt(norm_r)) * penalty;
    }
    result.per_sample.push_back(10.0 * total / static_cast<double>(max_n));
  }
  for (double v : result.per_sample) result.score += v;
  result.score /= static_cast<double>(count);
  return result;
}

// ---------------------------------------------------------------------------
// METEOR (exact-match variant)
// ---------------------------------------------------------------------------

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
};

/// Exact-match unigram alignment with the most matches, then fewest chunks.
inline MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference) {
  const std::size_t nc = candidate.size(), nr = reference.size();
  if (nc == 0 || nr == 0) return {};
  require(nr < 64, ErrorKind::InvalidArgument, "METEOR alignment supports references below 64 tokens");
  struct Best {
    std::size_t matches;
    std::size_t chunks;
  };
  auto better = [](const Best& a, const Best& b) {
    return a.matches != b.matches ? a.matches > b.matches : a.chunks < b.chunks;
  };
  // State: next candidate index, used reference positions, reference index
  // the previous candidate token aligned to (nr = none).
  std::unordered_map<std::uint64_t, std::unordered_map<std::size_t, Best>> memo;
  auto solve = [&](auto&& self, std::size_t i, std::uint64_t used, std::size_t prev) -> Best {
    if (i == nc) return {0, 0};
    auto& slot = memo[used];
    const std::size_t key = i * (nr + 1) + prev;
    if (auto it = slot.find(key); it != slot.end()) return it->second;
    Best best = self(self, i + 1, used, nr);
    for (std::size_t j = 0; j < nr; ++j) {
      if ((used >> j & 1U) || candidate[i] != reference[j]) continue;
      Best sub = self(self, i + 1, used | (std::uint64_t{1} << j), j);
      sub.matches += 1;
      if (!(prev != nr && j == prev + 1)) sub.chunks += 1;
      if (better(sub, best)) best = sub;
    }
    memo[used][key] = best;
    return best;
  };
  const Best best = solve(solve, 0, 0, nr);
  return {best.matches, best.chunks};
}

/// F_mean·(1 − γ·frag^β) with frag = chunks/matches. A candidate identical
/// to its reference aligns as a single full chunk and gets frag = 0.
inline double meteor_lite(const Tokens& candidate, const Tokens& reference, double alpha = 0.9, double beta = 3.0,
                          double gamma = 0.5) {
  const MeteorAlignment a = meteor_align(candidate, reference);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(candidate.size());
  const double r = m / static_cast<double>(reference.size());
  const double f_mean = p * r / (alpha * p + (1.0 - alpha) * r);
  const bool full = a.chunks == 1 && a.matches == candidate.size() && a.matches == reference.size();
  const double frag = full ? 0.0 : static_cast<double>(a.chunks) / m;
  return f_mean * (1.0 - gamma * std::pow(frag, beta));
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct GenerativeReport {
  double bleu2 = 0.0;
  double bleu3 = 0.0;
  double bleu4 = 0.0;
  double meteor = 0.0;
  double rouge_l = 0.0;
  double cider = 0.0;
  std::size_t corpus_size = 0;
};

inline GenerativeReport generative_report(const std::vector<std::string>& candidates,
                                          const std::vector<std::string>& references) {
  require(!candidates.empty(), ErrorKind::EmptyCorpus, "empty generation corpus");
  require(candidates.size() == references.size(), ErrorKind::InvalidArgument, "candidate/reference count mismatch");
  std::vector<Tokens> cand, ref;
  for (const auto& c : candidates) cand.push_back(metric_tokens(c));
  for (const auto& r : references) ref.push_back(metric_tokens(r));
  GenerativeReport report;
  report.corpus_size = cand.size();
  report.bleu2 = bleu_n(cand, ref, 2);
  report.bleu3 = bleu_n(cand, ref, 3);
  report.bleu4 = bleu_n(cand, ref, 4);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    report.meteor += meteor_lite(cand[i], ref[i]);
    report.rouge_l += rouge_l(cand[i], ref[i]);
  }
  report.meteor /= static_cast<double>(cand.size());
  report.rouge_l /= static_cast<double>(cand.size());
  if (cand.size() >= 2) report.cider = cider_score(cand, ref).score;
  return report;
}

struct RetrievalReport {
  double mrr = 0.0;
  double r_at_1 = 0.0;
  double r_at_5 = 0.0;
  double r_at_10 = 0.0;
  double mean_rank = 0.0;
  std::size_t count = 0;
};

inline RetrievalReport retrieval_report(std::span<const std::size_t> ranks) {
  require(!ranks.empty(), ErrorKind::EmptyInput, "no ranks to report");
  RetrievalReport r;
  for (std::size_t rank : ranks) {
    require(rank >= 1, ErrorKind::InvalidArgument, "ranks are 1-based");
    r.mrr += 1.0 / static_cast<double>(rank);
    r.r_at_1 += rank <= 1 ? 1.0 : 0.0;
    r.r_at_5 += rank <= 5 ? 1.0 : 0.0;
    r.r_at_10 += rank <= 10 ? 1.0 : 0.0;
    r.mean_rank += static_cast<double>(rank);
  }
  const auto n = static_cast<double>(ranks.size());
  r.count = ranks.size();
  r.mrr /= n;
  r.r_at_1 /= n;
  r.r_at_5 /= n;
  r.r_at_10 /= n;
  r.mean_rank /= n;
  return r;
}

}  // namespace vdial
