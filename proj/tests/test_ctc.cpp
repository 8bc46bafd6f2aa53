#include <gtest/gtest.h>

#include <cmath>

#include "aanet/ctc.hpp"
#include "checks.hpp"
#include "oracles.hpp"

using namespace aanet;

namespace {

Matrix log_of(std::initializer_list<std::initializer_list<double>> probs) {
  Matrix m(probs);
  for (double& v : m.values()) v = std::log(v);
  return m;
}

}  // namespace

TEST(CtcLoss, SingleFrameSingleLabel) {
  EXPECT_NEAR(ctc_loss(log_of({{0.4, 0.6}}), {1}).loss, -std::log(0.6), 1e-14);
}

TEST(CtcLoss, EmptyLabelsIsAllBlank) {
  const Matrix lp = log_of({{0.7, 0.3}, {0.2, 0.8}, {0.5, 0.5}});
  EXPECT_NEAR(ctc_loss(lp, {}).loss, -std::log(0.7 * 0.2 * 0.5), 1e-14);
}

TEST(CtcLoss, TwoFramesOneLabelSumsThreePaths) {
  const Matrix lp = log_of({{0.6, 0.4}, {0.6, 0.4}});
  EXPECT_NEAR(ctc_loss(lp, {1}).loss, -std::log(0.4 * 0.4 + 0.4 * 0.6 + 0.6 * 0.4), 1e-14);
}

TEST(CtcLoss, RepeatedLabelsNeedSeparatingBlank) {
  EXPECT_EQ(ctc_min_frames({1, 1}), 3u);
  EXPECT_EQ(ctc_min_frames({1, 2, 2, 2}), 6u);
  const Matrix two = log_of({{0.3, 0.7}, {0.3, 0.7}});
  EXPECT_THROW(ctc_loss(two, {1, 1}), AlignmentError);
  const Matrix three = log_of({{0.3, 0.7}, {0.3, 0.7}, {0.3, 0.7}});
  EXPECT_NEAR(ctc_loss(three, {1, 1}).loss, -std::log(0.7 * 0.3 * 0.7), 1e-14);
}

TEST(CtcLoss, RejectsBadLabels) {
  const Matrix lp = log_of({{0.5, 0.5}});
  EXPECT_THROW(ctc_loss(lp, {0}), Error);
  EXPECT_THROW(ctc_loss(lp, {2}), Error);
  EXPECT_THROW(ctc_loss(Matrix(0, 3), {}), Error);
}

TEST(CtcLoss, MatchesExhaustiveEnumeration) { EXPECT_LE(checks::ctc_vs_bruteforce(200, 2), 1e-10); }

TEST(CtcLoss, StableForTinyProbabilities) {
  // Every path through the label has probability around e^-300 per frame.
  const std::size_t T = 6;
  Matrix logits(T, 3);
  for (std::size_t t = 0; t < T; ++t) logits(t, 0) = 300.0;
  const Matrix lp = log_softmax_rows(logits);
  const CTCResult r = ctc_loss(lp, {1, 2});
  ASSERT_TRUE(std::isfinite(r.loss));
  EXPECT_GT(r.loss, 500.0);
  EXPECT_LE(relative_error(r.loss, ctc_loss_bruteforce(lp, {1, 2})), 1e-12);
  EXPECT_TRUE(r.grad_logits.all_finite());
}

TEST(CtcLoss, InvariantUnderSymbolRenaming) {
  Rng rng(61);
  const Matrix lp = log_softmax_rows(oracle::random_matrix(7, 4, rng, -2, 2));
  const std::vector<int> perm{0, 3, 1, 2};
  Matrix swapped(7, 4);
  for (std::size_t t = 0; t < 7; ++t)
    for (std::size_t v = 0; v < 4; ++v) swapped(t, perm[v]) = lp(t, v);
  const std::vector<int> labels{1, 2, 2, 3};
  std::vector<int> renamed;
  for (int l : labels) renamed.push_back(perm[l]);
  EXPECT_NEAR(ctc_loss(lp, labels).loss, ctc_loss(swapped, renamed).loss, 1e-12);
}

TEST(CtcGradient, MatchesFiniteDifferences) { EXPECT_LE(checks::ctc_gradient(30, 3), 1e-4); }

TEST(CtcGradient, RowsSumToZero) {
  Rng rng(62);
  const Matrix lp = log_softmax_rows(oracle::random_matrix(9, 5, rng, -2, 2));
  const Matrix g = ctc_loss(lp, {4, 1, 3}).grad_logits;
  for (std::size_t t = 0; t < g.rows(); ++t) {
    double s = 0.0;
    for (double v : g.row(t)) s += v;
    EXPECT_NEAR(s, 0.0, 1e-12);
  }
}

TEST(Collapse, MergesRepeatsThenDropsBlanks) {
  EXPECT_EQ(ctc_collapse({1, 1, 0, 1, 2, 2, 0, 0}), (std::vector<int>{1, 1, 2}));
  EXPECT_TRUE(ctc_collapse({0, 0}).empty());
}

TEST(Decode, GreedyTakesFrameArgmax) {
  EXPECT_EQ(greedy_decode(log_of({{0.1, 0.8, 0.1}, {0.1, 0.8, 0.1}, {0.9, 0.05, 0.05}, {0.1, 0.1, 0.8}})),
            (std::vector<int>{1, 2}));
}

TEST(Decode, BeamSumsOverAlignments) {
  const Matrix lp = log_of({{0.6, 0.4}, {0.6, 0.4}});
  EXPECT_TRUE(greedy_decode(lp).empty());
  EXPECT_EQ(beam_search_decode(lp), std::vector<int>{1});
}

TEST(Decode, WideBeamFindsExactMostProbableSequence) {
  Rng rng(63);
  for (int rep = 0; rep < 40; ++rep) {
    const auto T = std::uniform_int_distribution<std::size_t>(1, 6)(rng);
    const Matrix lp = log_softmax_rows(oracle::random_matrix(T, 3, rng, -2, 2));
    EXPECT_EQ(beam_search_decode(lp, 10000), ctc_map_bruteforce(lp)) << rep;
  }
}

TEST(Decode, BeamAgreesWithGreedyOnPeakedPosteriors) {
  Rng rng(64);
  for (int rep = 0; rep < 20; ++rep) {
    Matrix logits = oracle::random_matrix(12, 6, rng, -1, 1);
    for (std::size_t t = 0; t < 12; ++t) logits(t, std::uniform_int_distribution<std::size_t>(0, 5)(rng)) += 30.0;
    const Matrix lp = log_softmax_rows(logits);
    EXPECT_EQ(beam_search_decode(lp), greedy_decode(lp));
  }
}

TEST(Decode, RejectsZeroWidth) { EXPECT_THROW(beam_search_decode(log_of({{0.5, 0.5}}), 0), Error); }
