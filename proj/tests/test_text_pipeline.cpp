#include <gtest/gtest.h>

#include "support.hpp"
#include "vdial/text.hpp"

using namespace vdial;

namespace {

Vocab small_vocab(std::vector<std::string> extra) {
  auto tokens = Vocab::reserved_tokens();
  tokens.insert(tokens.end(), extra.begin(), extra.end());
  return Vocab::from_tokens(tokens);
}

DialogSample sample_with_history(std::size_t turns) {
  DialogSample s;
  s.caption = "a man walks in";
  for (std::size_t i = 1; i <= turns; ++i)
    s.history.push_back({"question " + std::to_string(i) + " ?", "answer " + std::to_string(i)});
  s.question = "what now ?";
  s.answer = "nothing";
  s.round = static_cast<int>(turns) + 1;
  return s;
}

Vocab vocab_for(const DialogSample& s) {
  std::vector<std::string> corpus{s.caption, s.question, s.answer};
  for (const auto& t : s.history) {
    corpus.push_back(t.question);
    corpus.push_back(t.answer);
  }
  return build_vocab(corpus, 512);
}

}  // namespace

TEST(BuildVocab, ContainsWordsAndReservedTokens) {
  const Vocab v = build_vocab({"a a b"}, 64);
  EXPECT_TRUE(v.contains("a"));
  EXPECT_TRUE(v.contains("b"));
  const auto& reserved = Vocab::reserved_tokens();
  for (std::size_t i = 0; i < reserved.size(); ++i) EXPECT_EQ(v.id(reserved[i]), static_cast<int>(i));
  EXPECT_EQ(v.id("[PAD]"), 0);
  EXPECT_EQ(v.id("[MASK]"), 4);
}

TEST(BuildVocab, Deterministic) {
  const std::vector<std::string> corpus{"the cat sat on the mat", "a dog , too !"};
  EXPECT_EQ(build_vocab(corpus, 100), build_vocab(corpus, 100));
}

TEST(BuildVocab, TooSmallForAlphabetThrows) {
  EXPECT_THROW(build_vocab({"abcdef"}, 8), Error);
}

TEST(BuildVocab, EmptyCorpusThrows) {
  try {
    build_vocab({}, 64);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::EmptyCorpus);
  }
}

TEST(Tokenize, GreedyLongestMatch) {
  const Vocab v = small_vocab({"u", "un", "una", "##able", "##ble", "##a"});
  const auto ids = tokenize("unable", v);
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_EQ(v.token(ids[0]), "una");
  EXPECT_EQ(v.token(ids[1]), "##ble");
  const Vocab w = small_vocab({"un", "##able"});
  const auto ids2 = tokenize("unable", w);
  ASSERT_EQ(ids2.size(), 2u);
  EXPECT_EQ(w.token(ids2[0]), "un");
  EXPECT_EQ(w.token(ids2[1]), "##able");
}

TEST(Tokenize, WholeWordIsOneId) {
  const Vocab v = build_vocab({"picks picks up"}, 128);
  const auto ids = tokenize("picks", v);
  ASSERT_EQ(ids.size(), 1u);
  EXPECT_EQ(v.token(ids[0]), "picks");
}

TEST(Tokenize, UnmatchableWordIsUnk) {
  const Vocab v = small_vocab({"a"});
  const auto ids = tokenize("zz", v);
  ASSERT_EQ(ids.size(), 1u);
  EXPECT_EQ(ids[0], Vocab::kUnk);
}

TEST(Tokenize, RoundTripOfInVocabularyText) {
  // Round-trip oracle: for random sentences over the corpus words, detokenize
  // must reproduce the lowercase whitespace-joined surface form.
  const std::vector<std::string> words{"she", "picks", "up", "the", "red", "cup", "table", "window", "does"};
  std::vector<std::string> corpus;
  Rng rng(4);
  for (int i = 0; i < 40; ++i) {
    std::string s;
    for (std::size_t k = 0, n = 1 + rng.below(8); k < n; ++k) s += (k ? " " : "") + words[rng.below(words.size())];
    corpus.push_back(s);
  }
  const Vocab v = build_vocab(corpus, 200);
  for (const auto& s : corpus) EXPECT_EQ(detokenize(tokenize(s, v), v), s);
  // Sub-word pieces recombine as well.
  const Vocab chars_only = build_vocab({"xyz"}, 20);
  EXPECT_EQ(detokenize(tokenize("zyx", chars_only), chars_only), "zyx");
}

TEST(AssembleDialogInput, KeepsMostRecentTurns) {
  const DialogSample s = sample_with_history(5);
  const Vocab v = vocab_for(s);
  const auto seq = assemble_dialog_input(s, {3, 100}, v);
  EXPECT_EQ(seq.retained_rounds, (std::vector<int>{3, 4, 5}));
}

TEST(AssembleDialogInput, RoundOneLayout) {
  const DialogSample s = sample_with_history(0);
  const Vocab v = vocab_for(s);
  const auto seq = assemble_dialog_input(s, {}, v);
  std::vector<int> want{Vocab::kCls};
  for (int id : tokenize(s.caption, v)) want.push_back(id);
  want.push_back(Vocab::kSep);
  for (int id : tokenize(s.question, v)) want.push_back(id);
  want.push_back(Vocab::kSep);
  EXPECT_EQ(seq.ids, want);
  EXPECT_EQ(seq.segments.back(), kSegmentQuestion);
  for (std::size_t i = 0; i < seq.size(); ++i) EXPECT_EQ(seq.positions[i], static_cast<int>(i));
}

TEST(AssembleDialogInput, WordBudgetDropsOldestTurnsFirst) {
  DialogSample s = sample_with_history(3);
  const Vocab v = vocab_for(s);
  // caption 4 + question 3 + each turn 5 words
  const auto seq = assemble_dialog_input(s, {3, 13}, v);
  EXPECT_EQ(seq.retained_rounds, (std::vector<int>{3}));
  const auto wide = assemble_dialog_input(s, {3, 200}, v);
  EXPECT_EQ(wide.retained_rounds, (std::vector<int>{1, 2, 3}));
}

TEST(AssembleDialogInput, RetrievalWordBudgetHonored) {
  DialogSample s;
  s.caption.clear();
  for (int i = 0; i < 300; ++i) s.caption += "word ";
  s.question = "why ?";
  const Vocab v = build_vocab({s.caption, s.question}, 64);
  const auto seq = assemble_dialog_input(s, {3, 200}, v);
  std::size_t words = 0;
  for (std::size_t i = 0; i < seq.size(); ++i) words += seq.ids[i] == v.id("word") ? 1 : 0;
  EXPECT_EQ(words, 198u);  // 200 minus the 2-word question
}

TEST(AssembleDialogInput, OverlongQuestionThrows) {
  DialogSample s = sample_with_history(0);
  s.question.clear();
  for (int i = 0; i < 20; ++i) s.question += "what ";
  const Vocab v = vocab_for(s);
  try {
    assemble_dialog_input(s, {3, 10}, v);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::QuestionTooLong);
  }
}

TEST(Masking, SpecialTokensNeverMasked) {
  const DialogSample s = sample_with_history(3);
  const Vocab v = vocab_for(s);
  const auto seq = assemble_dialog_input(s, {}, v);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const auto out = apply_masking(seq, 0.5, rng);
    for (std::size_t p : out.mask_positions) {
      EXPECT_FALSE(Vocab::is_special(seq.ids[p]));
      EXPECT_EQ(out.masked_ids[p], Vocab::kMask);
      EXPECT_EQ(out.labels[p], seq.ids[p]);
    }
  }
}

TEST(Masking, RateOutsideOpenIntervalThrows) {
  TokenSequence seq;
  seq.push(10, 0);
  Rng rng(1);
  EXPECT_THROW(apply_masking(seq, 0.0, rng), Error);
  EXPECT_THROW(apply_masking(seq, 1.0, rng), Error);
}

TEST(Masking, BertSchemeKeepsLabels) {
  TokenSequence seq;
  for (int i = 0; i < 2000; ++i) seq.push(5 + i % 30, 0);
  Rng rng(8);
  const auto out = apply_masking(seq, 0.3, rng, MaskingScheme::Bert80_10_10, 40);
  std::size_t masked = 0;
  for (std::size_t p : out.mask_positions) masked += out.masked_ids[p] == Vocab::kMask;
  const double frac = static_cast<double>(masked) / static_cast<double>(out.mask_positions.size());
  EXPECT_NEAR(frac, 0.8, 0.06);
}

TEST(EmbedInput, ZeroTablesGiveZeroEmbedding) {
  TokenSequence seq;
  for (int i = 0; i < 6; ++i) seq.push(5 + i, i % 4);
  const TextEmbeddings t{Tensor::zeros({20, 8}), Tensor::zeros({4, 8}), Tensor::zeros({16, 8})};
  const Tensor e = embed_input(seq, t);
  EXPECT_EQ(e.shape(), (Shape{6, 8}));
  for (double x : e.data()) EXPECT_EQ(x, 0.0);
}

TEST(EmbedInput, SegmentChangeAddsSegmentDelta) {
  Rng rng(2);
  const TextEmbeddings t{vdial::testing::random_tensor(rng, {20, 8}, 1.0, false),
                         vdial::testing::random_tensor(rng, {4, 8}, 1.0, false),
                         vdial::testing::random_tensor(rng, {16, 8}, 1.0, false)};
  TokenSequence a;
  for (int i = 0; i < 5; ++i) a.push(6 + i, 0);
  TokenSequence b = a;
  b.segments[2] = 3;
  const Tensor ea = embed_input(a, t), eb = embed_input(b, t);
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t c = 0; c < 8; ++c) {
      const double delta = r == 2 ? t.segment.at(3, c) - t.segment.at(0, c) : 0.0;
      EXPECT_NEAR(eb.at(r, c) - ea.at(r, c), delta, 1e-12);
    }
}

TEST(EmbedInput, TooLongSequenceThrows) {
  TokenSequence seq;
  for (int i = 0; i < 10; ++i) seq.push(5, 0);
  const TextEmbeddings t{Tensor::zeros({20, 4}), Tensor::zeros({4, 4}), Tensor::zeros({8, 4})};
  try {
    embed_input(seq, t);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::SequenceTooLong);
  }
}
