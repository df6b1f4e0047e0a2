#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vdial/dialog.hpp"
#include "vdial/ops.hpp"
#include "vdial/rng.hpp"

namespace vdial {

// ---------------------------------------------------------------------------
// Pre-tokenization
// ---------------------------------------------------------------------------

namespace detail {

/// Byte length of the UTF-8 sequence starting with `lead`; malformed lead
/// bytes count as single characters so every byte string splits totally.
inline std::size_t utf8_length(unsigned char lead) {
  if (lead < 0x80) return 1;
  if ((lead >> 5) == 0x6) return 2;
  if ((lead >> 4) == 0xE) return 3;
  if ((lead >> 3) == 0x1E) return 4;
  return 1;
}

inline std::vector<std::string> split_chars(std::string_view word) {
  std::vector<std::string> chars;
  for (std::size_t i = 0; i < word.size();) {
    const std::size_t len = std::min(utf8_length(static_cast<unsigned char>(word[i])), word.size() - i);
    chars.emplace_back(word.substr(i, len));
    i += len;
  }
  return chars;
}

}  // namespace detail

/// ASCII-folds case, splits on whitespace and isolates ASCII punctuation.
inline std::vector<std::string> basic_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::exchange(current, {}));
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (u < 0x80 && std::isspace(u)) {
      flush();
    } else if (u < 0x80 && std::ispunct(u)) {
      flush();
      words.emplace_back(1, ch);
    } else {
      current.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : ch);
    }
  }
  flush();
  return words;
}

/// Whitespace-delimited word count, the unit of the dialog word budget.
inline std::size_t count_words(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (char ch : text) {
    const bool space = std::isspace(static_cast<unsigned char>(ch)) != 0;
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr int kCls = 2;
  static constexpr int kSep = 3;
  static constexpr int kMask = 4;
  static constexpr int kReserved = 5;
  static constexpr std::string_view kContinuation = "##";

  static const std::vector<std::string>& reserved_tokens() {
    static const std::vector<std::string> tokens{"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
    return tokens;
  }

  /// Validates a complete id-ordered token list.
  static Vocab from_tokens(std::vector<std::string> tokens) {
    const auto& reserved = reserved_tokens();
    require(tokens.size() >= reserved.size(), ErrorKind::InvalidArgument, "vocabulary misses reserved tokens");
    for (std::size_t i = 0; i < reserved.size(); ++i)
      require(tokens[i] == reserved[i], ErrorKind::InvalidArgument, "reserved token " + reserved[i] + " out of place");
    Vocab vocab;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      require(!tokens[i].empty(), ErrorKind::InvalidArgument, "empty token at id " + std::to_string(i));
      auto [it, inserted] = vocab.ids_.emplace(tokens[i], static_cast<int>(i));
      require(inserted, ErrorKind::InvalidArgument, "duplicate token " + tokens[i]);
    }
    vocab.tokens_ = std::move(tokens);
    return vocab;
  }

  std::size_t size() const { return tokens_.size(); }
  bool contains(std::string_view token) const { return ids_.contains(std::string(token)); }

  int id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? -1 : it->second;
  }

  const std::string& token(int id) const {
    require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), ErrorKind::IndexOutOfVocab,
            "token id " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
  }

  static bool is_special(int id) { return id >= 0 && id < kReserved; }

  const std::vector<std::string>& tokens() const { return tokens_; }

  /// One token per line; the line number is the id.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    require(out.good(), ErrorKind::IoError, "cannot write " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
    require(out.good(), ErrorKind::IoError, "write failed for " + path.string());
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::IoError, "cannot read " + path.string());
    std::vector<std::string> tokens;
    for (std::string line; std::getline(in, line);) tokens.push_back(line);
    return from_tokens(std::move(tokens));
  }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

/// Reserved tokens, then every character as both a word-initial and a
/// continuation piece, then whole words by descending frequency (ties keep
/// first-occurrence order) until `max_size` entries.
inline Vocab build_vocab(const std::vector<std::string>& corpus, std::size_t max_size) {
  require(!corpus.empty(), ErrorKind::EmptyCorpus, "cannot build a vocabulary from an empty corpus");
  std::vector<std::string> order;
  std::unordered_map<std::string, std::size_t> frequency;
  std::map<std::string, bool> chars;
  for (const auto& line : corpus)
    for (auto& word : basic_words(line)) {
      for (auto& c : detail::split_chars(word)) chars.emplace(c, true);
      if (frequency[word]++ == 0) order.push_back(word);
    }
  std::vector<std::string> tokens = Vocab::reserved_tokens();
  for (const auto& [c, unused] : chars) tokens.push_back(c);
  for (const auto& [c, unused] : chars) tokens.push_back(std::string(Vocab::kContinuation) + c);
  require(max_size >= tokens.size(), ErrorKind::InvalidArgument,
          "max_size " + std::to_string(max_size) + " below reserved + character pieces (" +
              std::to_string(tokens.size()) + ")");
  std::stable_sort(order.begin(), order.end(),
                   [&](const std::string& a, const std::string& b) { return frequency[a] > frequency[b]; });
  for (const auto& word : order) {
    if (tokens.size() >= max_size) break;
    if (word.size() == detail::utf8_length(static_cast<unsigned char>(word[0]))) continue;  // single character
    tokens.push_back(word);
  }
  return Vocab::from_tokens(std::move(tokens));
}

/// Greedy longest-match-first WordPiece. A word that cannot be decomposed
/// from some point on contributes one [UNK] for the unmatched remainder.
inline std::vector<int> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<int> ids;
  for (const auto& word : basic_words(text)) {
    const auto chars = detail::split_chars(word);
    std::size_t start = 0;
    while (start < chars.size()) {
      int found = -1;
      std::size_t end = chars.size();
      for (; end > start; --end) {
        std::string piece = start > 0 ? std::string(Vocab::kContinuation) : std::string();
        for (std::size_t i = start; i < end; ++i) piece += chars[i];
        found = vocab.id(piece);
        if (found >= 0) break;
      }
      if (found < 0) {
        ids.push_back(Vocab::kUnk);
        break;
      }
      ids.push_back(found);
      start = end;
    }
  }
  return ids;
}

/// Joins pieces back into text; continuation pieces attach to the previous
/// piece and [PAD] is dropped.
inline std::string detokenize(std::span<const int> ids, const Vocab& vocab) {
  std::string out;
  for (int id : ids) {
    if (id == Vocab::kPad) continue;
    const std::string& tok = vocab.token(id);
    if (tok.starts_with(Vocab::kContinuation) && tok.size() > Vocab::kContinuation.size() && !out.empty()) {
      out += tok.substr(Vocab::kContinuation.size());
      continue;
    }
    if (!out.empty()) out += ' ';
    out += tok;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dialog input assembly
// ---------------------------------------------------------------------------

enum Segment : int {
  kSegmentContext = 0,   // caption and history questions
  kSegmentHistoryAnswer = 1,
  kSegmentQuestion = 2,  // current question
  kSegmentAnswer = 3,
};
inline constexpr std::size_t kSegmentCount = 4;

struct TokenSequence {
  std::vector<int> ids;
  std::vector<int> segments;
  std::vector<int> positions;
  std::vector<bool> attention_mask;
  /// 1-based rounds of the history turns that survived truncation.
  std::vector<int> retained_rounds;

  std::size_t size() const { return ids.size(); }

  void push(int id, int segment) {
    positions.push_back(static_cast<int>(ids.size()));
    ids.push_back(id);
    segments.push_back(segment);
    attention_mask.push_back(true);
  }
};

struct DialogInputOptions {
  std::size_t max_turns = 3;
  std::size_t max_words = 100;
};

/// [CLS] C [SEP] (Q_i [SEP] A_i [SEP])* Q_t [SEP] over at most `max_turns`
/// most recent turns, dropping the oldest turns first until the whitespace
/// word count fits `max_words`. The caption is cut from its end only when the
/// question and caption alone exceed the budget.
inline TokenSequence assemble_dialog_input(const DialogSample& sample, const DialogInputOptions& options,
                                           const Vocab& vocab) {
  require(options.max_words >= 8, ErrorKind::InvalidArgument, "max_words must be at least 8");
  const std::size_t question_words = count_words(sample.question);
  require(question_words <= options.max_words, ErrorKind::QuestionTooLong,
          "question has " + std::to_string(question_words) + " words, budget " + std::to_string(options.max_words));

  const std::size_t available = sample.history.size();
  std::size_t first = available - std::min(options.max_turns, available);
  auto turn_words = [&](std::size_t i) {
    return count_words(sample.history[i].question) + count_words(sample.history[i].answer);
  };
  std::size_t history_words = 0;
  for (std::size_t i = first; i < available; ++i) history_words += turn_words(i);
  const std::size_t caption_words = count_words(sample.caption);
  while (first < available && caption_words + history_words + question_words > options.max_words) {
    history_words -= turn_words(first);
    ++first;
  }

  std::string caption = sample.caption;
  if (caption_words + history_words + question_words > options.max_words) {
    const std::size_t keep = options.max_words - question_words;
    std::string kept;
    std::size_t n = 0;
    bool in_word = false;
    for (char ch : sample.caption) {
      const bool space = std::isspace(static_cast<unsigned char>(ch)) != 0;
      if (!space && !in_word && n++ == keep) break;
      in_word = !space;
      kept.push_back(ch);
    }
    caption = kept;
  }

  TokenSequence seq;
  auto append = [&](std::string_view text, int segment) {
    for (int id : tokenize(text, vocab)) seq.push(id, segment);
    seq.push(Vocab::kSep, segment);
  };
  seq.push(Vocab::kCls, kSegmentContext);
  append(caption, kSegmentContext);
  for (std::size_t i = first; i < available; ++i) {
    append(sample.history[i].question, kSegmentContext);
    append(sample.history[i].answer, kSegmentHistoryAnswer);
    seq.retained_rounds.push_back(static_cast<int>(i) + 1);
  }
  append(sample.question, kSegmentQuestion);
  return seq;
}

/// [CLS] answer [SEP], all in the answer segment.
inline TokenSequence assemble_answer_input(std::string_view answer, const Vocab& vocab) {
  TokenSequence seq;
  seq.push(Vocab::kCls, kSegmentAnswer);
  for (int id : tokenize(answer, vocab)) seq.push(id, kSegmentAnswer);
  seq.push(Vocab::kSep, kSegmentAnswer);
  return seq;
}

// ---------------------------------------------------------------------------
// Masking
// ---------------------------------------------------------------------------

inline constexpr int kNoLabel = -100;

struct MaskingOutcome {
  std::vector<int> masked_ids;
  std::vector<int> labels;  // original id where masked, kNoLabel elsewhere
  std::vector<std::size_t> mask_positions;
};

enum class MaskingScheme {
  ReplaceAll,     // every selected token becomes [MASK]
  Bert80_10_10,   // 80% [MASK], 10% random token, 10% unchanged
};

/// Independently selects each non-special token with probability `rate`.
inline MaskingOutcome apply_masking(const TokenSequence& seq, double rate, Rng& rng,
                                    MaskingScheme scheme = MaskingScheme::ReplaceAll,
                                    std::size_t vocab_size = 0) {
  require(rate > 0.0 && rate < 1.0, ErrorKind::InvalidArgument, "mask rate must lie in (0, 1)");
  MaskingOutcome out;
  out.masked_ids = seq.ids;
  out.labels.assign(seq.ids.size(), kNoLabel);
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (Vocab::is_special(seq.ids[i]) || !rng.bernoulli(rate)) continue;
    out.labels[i] = seq.ids[i];
    out.mask_positions.push_back(i);
    if (scheme == MaskingScheme::ReplaceAll) {
      out.masked_ids[i] = Vocab::kMask;
      continue;
    }
    const double u = rng.uniform();
    if (u < 0.8) {
      out.masked_ids[i] = Vocab::kMask;
    } else if (u < 0.9 && vocab_size > static_cast<std::size_t>(Vocab::kReserved)) {
      out.masked_ids[i] = Vocab::kReserved + static_cast<int>(rng.below(vocab_size - Vocab::kReserved));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Input embedding
// ---------------------------------------------------------------------------

struct TextEmbeddings {
  Tensor token;     // [V×d]
  Tensor segment;   // [kSegmentCount×d]
  Tensor position;  // [max_positions×d]
};

/// Sum of token, segment and position lookups: [len×d].
inline Tensor embed_input(std::span<const int> ids, const TokenSequence& seq, const TextEmbeddings& tables) {
  require(ids.size() == seq.size(), ErrorKind::ShapeMismatch, "embed_input: id list length");
  require(seq.size() <= tables.position.rows(), ErrorKind::SequenceTooLong,
          "sequence of " + std::to_string(seq.size()) + " exceeds " + std::to_string(tables.position.rows()) +
              " positions");
  return add(add(embedding(tables.token, ids), embedding(tables.segment, seq.segments)),
             embedding(tables.position, seq.positions));
}

inline Tensor embed_input(const TokenSequence& seq, const TextEmbeddings& tables) {
  return embed_input(seq.ids, seq, tables);
}

}  // namespace vdial
