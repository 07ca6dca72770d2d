#include "bupm/matcher.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "bupm/rng.hpp"
#include "bupm/verifier.hpp"
#include "testutil.hpp"

using bupm::MaskDetector;
using bupm::MatchResult;
using bupm::Reduce;
using bupm::Rng;
using bupm::Tape;
using bupm::Tensor;

namespace {

// Direct transcription of the cosine definition, one pair at a time.
double cosine_oracle(const Tensor& f_r, const Tensor& f_q, int x, int y, int i, int j) {
  const int c = f_r.extent(2);
  const double* a = f_r.data() + (static_cast<std::int64_t>(x) * f_r.extent(1) + y) * c;
  const double* b = f_q.data() + (static_cast<std::int64_t>(i) * f_q.extent(1) + j) * c;
  double dot = 0, na = 0, nb = 0;
  for (int k = 0; k < c; ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  const double denom = std::max(std::sqrt(na), 1e-12) * std::max(std::sqrt(nb), 1e-12);
  return dot / denom;
}

Tensor shift_columns(const Tensor& t, int k) {
  const int h = t.extent(0), w = t.extent(1), c = t.extent(2);
  Tensor out = Tensor::zeros(t.shape());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int sx = ((x - k) % w + w) % w;
      for (int ci = 0; ci < c; ++ci) out.data()[(y * w + x) * c + ci] = t.data()[(y * w + sx) * c + ci];
    }
  }
  return out;
}

}  // namespace

TEST(PairwiseCosine, IdenticalFibersScoreOne) {
  Rng rng(2);
  Tensor f = testutil::random_tensor(rng, {2, 3, 8}, -1, 1);
  Tape tape;
  Tensor s = bupm::pairwise_cosine(tape, f, f);
  // the diagonal pairs (x,y)==(i,j) compare a fiber with itself
  for (int x = 0; x < 2; ++x) {
    for (int y = 0; y < 3; ++y) {
      const std::int64_t idx = ((x * 3 + y) * 2 + x) * 3 + y;
      EXPECT_NEAR(s.data()[idx], 1.0, 1e-12);
    }
  }
}

TEST(PairwiseCosine, OrthogonalAndHandComputedPairs) {
  Tensor f_r = Tensor::from_data({1, 2, 2}, {1.0, 0.0, 3.0, 4.0});
  Tensor f_q = Tensor::from_data({1, 2, 2}, {0.0, 2.0, 4.0, 3.0});
  Tape tape;
  Tensor s = bupm::pairwise_cosine(tape, f_r, f_q);  // 1x2x1x2
  EXPECT_NEAR(s.data()[0], 0.0, 1e-15);              // (1,0) vs (0,2)
  EXPECT_NEAR(s.data()[3], 24.0 / 25.0, 1e-15);      // (3,4) vs (4,3)
}

TEST(PairwiseCosine, MatchesBruteForceOracleOnRandomInstances) {
  Rng rng(17);
  for (int inst = 0; inst < 10; ++inst) {
    const int hr = 1 + rng.uniform_int(8), wr = 1 + rng.uniform_int(8);
    const int hq = 1 + rng.uniform_int(8), wq = 1 + rng.uniform_int(8);
    const int c = 1 + rng.uniform_int(16);
    Tensor f_r = testutil::random_tensor(rng, {hr, wr, c}, -1, 1);
    Tensor f_q = testutil::random_tensor(rng, {hq, wq, c}, -1, 1);
    Tape tape;
    Tensor s = bupm::pairwise_cosine(tape, f_r, f_q);
    for (int x = 0; x < hr; ++x) {
      for (int y = 0; y < wr; ++y) {
        for (int i = 0; i < hq; ++i) {
          for (int j = 0; j < wq; ++j) {
            const double expect = cosine_oracle(f_r, f_q, x, y, i, j);
            const double got = s.data()[((static_cast<std::int64_t>(x) * wr + y) * hq + i) * wq + j];
            EXPECT_NEAR(got, expect, 1e-12 * std::max(1.0, std::fabs(expect)));
          }
        }
      }
    }
  }
}

TEST(PairwiseCosine, InvariantToPositiveFiberScaling) {
  Rng rng(23);
  Tensor f_r = testutil::random_tensor(rng, {3, 3, 6}, -1, 1);
  Tensor f_q = testutil::random_tensor(rng, {2, 2, 6}, -1, 1);
  Tape tape;
  Tensor base = bupm::pairwise_cosine(tape, f_r, f_q);
  Tensor scaled_r = f_r.detached_copy();
  for (int c = 0; c < 6; ++c) scaled_r.data()[(1 * 3 + 2) * 6 + c] *= 37.5;
  Tensor scaled = bupm::pairwise_cosine(tape, scaled_r, f_q);
  EXPECT_LT(testutil::max_abs_diff(base, scaled), 1e-9);
}

TEST(PairwiseCosine, RejectsDepthMismatch) {
  Tape tape;
  EXPECT_THROW(bupm::pairwise_cosine(tape, Tensor::zeros({2, 2, 4}), Tensor::zeros({2, 2, 5})),
               std::invalid_argument);
}

TEST(GlobalMaxPool, SingletonQueryAxesSqueezeToTheSimilarity) {
  Rng rng(31);
  Tensor s = testutil::random_tensor(rng, {3, 4, 1, 1}, -1, 1);
  Tape tape;
  auto best = bupm::global_max_pool(tape, s);
  ASSERT_EQ(best.b_r.shape(), (std::vector<int>{3, 4, 1}));
  for (int i = 0; i < 12; ++i) EXPECT_EQ(best.b_r.data()[i], s.data()[i]);
}

TEST(GlobalMaxPool, MatchesExhaustiveScanBitwise) {
  Rng rng(37);
  for (int inst = 0; inst < 20; ++inst) {
    Tensor s = testutil::random_tensor(rng, {3, 4, 2, 2}, -1, 1);
    Tape tape;
    auto best = bupm::global_max_pool(tape, s);
    for (int x = 0; x < 3; ++x) {
      for (int y = 0; y < 4; ++y) {
        double m = -2;
        for (int i = 0; i < 2; ++i) {
          for (int j = 0; j < 2; ++j) m = std::max(m, s.data()[((x * 4 + y) * 2 + i) * 2 + j]);
        }
        EXPECT_EQ(best.b_r.data()[x * 4 + y], m);
      }
    }
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < 2; ++j) {
        double m = -2;
        for (int x = 0; x < 3; ++x) {
          for (int y = 0; y < 4; ++y) m = std::max(m, s.data()[((x * 4 + y) * 2 + i) * 2 + j]);
        }
        EXPECT_EQ(best.b_q.data()[i * 2 + j], m);
      }
    }
    // both sides top out at the global maximum
    double mr = -2, mq = -2;
    for (int i = 0; i < best.b_r.numel(); ++i) mr = std::max(mr, best.b_r.data()[i]);
    for (int i = 0; i < best.b_q.numel(); ++i) mq = std::max(mq, best.b_q.data()[i]);
    EXPECT_EQ(mr, mq);
  }
}

TEST(MaskDetector, PreservesSpatialExtentsAndStaysInOpenInterval) {
  Rng rng(41);
  MaskDetector det = MaskDetector::init(rng);
  for (auto [h, w] : {std::pair{1, 1}, {2, 7}, {5, 3}, {12, 24}}) {
    Tensor best = testutil::random_tensor(rng, {h, w, 1}, -1, 1);
    Tape tape;
    Tensor mask = det.detect(tape, best, h % 2 == 0);
    ASSERT_EQ(mask.shape(), (std::vector<int>{h, w, 1}));
    for (int i = 0; i < mask.numel(); ++i) {
      EXPECT_GT(mask.data()[i], 0.0);
      EXPECT_LT(mask.data()[i], 1.0);
    }
  }
}

TEST(MaskDetector, CircularPaddingGivesRotationEquivariance) {
  Rng rng(43);
  MaskDetector det = MaskDetector::init(rng);
  Tensor best = testutil::random_tensor(rng, {4, 9, 1}, -1, 1);
  for (int k : {1, 3, 8}) {
    Tape tape;
    Tensor mask_then_rotate = shift_columns(det.detect(tape, best, true), k);
    Tensor rotate_then_mask = det.detect(tape, shift_columns(best, k), true);
    EXPECT_LT(testutil::max_abs_diff(mask_then_rotate, rotate_then_mask), 1e-12) << "shift " << k;
  }
}

TEST(MaskDetector, ZeroPaddingBreaksRotationEquivariance) {
  // sanity check that the equivariance above is really due to circular padding
  Rng rng(47);
  MaskDetector det = MaskDetector::init(rng);
  Tensor best = testutil::random_tensor(rng, {4, 9, 1}, -1, 1);
  Tape tape;
  Tensor a = shift_columns(det.detect(tape, best, false), 3);
  Tensor b = det.detect(tape, shift_columns(best, 3), false);
  EXPECT_GT(testutil::max_abs_diff(a, b), 1e-6);
}

TEST(Match, EmbeddedCropLightsUpItsReferenceCells) {
  Rng rng(53);
  MaskDetector det = MaskDetector::init(rng);
  Tensor f_r = testutil::random_tensor(rng, {6, 10, 8}, -1, 1);
  // the query is a verbatim 2x3 block of reference cells at rows 2..3, cols 4..6
  Tensor f_q = Tensor::zeros({2, 3, 8});
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) {
      for (int c = 0; c < 8; ++c) {
        f_q.data()[(i * 3 + j) * 8 + c] = f_r.data()[((i + 2) * 10 + (j + 4)) * 8 + c];
      }
    }
  }
  Tape tape;
  MatchResult m = bupm::match_features(tape, f_r, f_q, det);
  ASSERT_EQ(m.m_r.shape(), (std::vector<int>{6, 10, 1}));
  ASSERT_EQ(m.m_q.shape(), (std::vector<int>{2, 3, 1}));
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j) {
      EXPECT_NEAR(m.b_r.data()[(i + 2) * 10 + (j + 4)], 1.0, 1e-12);
    }
  }
  // every B_Q entry is a perfect match somewhere in the reference
  for (int i = 0; i < m.b_q.numel(); ++i) EXPECT_NEAR(m.b_q.data()[i], 1.0, 1e-12);
}

TEST(Match, QueryPatchPermutationLeavesReferenceScoresUnchanged) {
  Rng rng(59);
  MaskDetector det = MaskDetector::init(rng);
  Tensor f_r = testutil::random_tensor(rng, {4, 6, 5}, -1, 1);
  Tensor f_q = testutil::random_tensor(rng, {3, 3, 5}, -1, 1);
  Tensor f_q_perm = Tensor::zeros({3, 3, 5});
  // reverse the patch order
  for (int p = 0; p < 9; ++p) {
    for (int c = 0; c < 5; ++c) f_q_perm.data()[p * 5 + c] = f_q.data()[(8 - p) * 5 + c];
  }
  Tape tape;
  MatchResult a = bupm::match_features(tape, f_r, f_q, det);
  MatchResult b = bupm::match_features(tape, f_r, f_q_perm, det);
  EXPECT_EQ(testutil::max_abs_diff(a.b_r, b.b_r), 0.0);
}

TEST(BuildFeature, SoftCountsAreMaskMeans) {
  Tape tape;
  Tensor ones = Tensor::full({4, 4, 1}, 1.0);
  Tensor zeros = Tensor::zeros({4, 4, 1});
  Tensor v = bupm::build_feature(tape, ones, zeros);
  ASSERT_EQ(v.shape(), (std::vector<int>{2}));
  EXPECT_DOUBLE_EQ(v.data()[0], 1.0);
  EXPECT_DOUBLE_EQ(v.data()[1], 0.0);

  Tensor quarter = Tensor::zeros({4, 4, 1});
  for (int i : {0, 5, 10, 15}) quarter.data()[i] = 1.0;
  Tensor v2 = bupm::build_feature(tape, quarter, ones);
  EXPECT_DOUBLE_EQ(v2.data()[0], 0.25);
}

TEST(BuildFeature, MeanEqualsSumOverCountExactly) {
  Rng rng(61);
  Tensor m = testutil::random_tensor(rng, {5, 7, 1}, 0.01, 0.99);
  Tape tape;
  Tensor v = bupm::build_feature(tape, m, m);
  double sum = 0;
  for (int i = 0; i < m.numel(); ++i) sum += m.data()[i];
  EXPECT_DOUBLE_EQ(v.data()[0], sum / 35.0);
}

TEST(Verifier, ZeroWeightsScoreHalf) {
  Rng rng(67);
  bupm::Verifier v = bupm::Verifier::init(rng);
  std::vector<std::pair<std::string, Tensor>> params;
  v.collect_params(params, "v");
  for (auto& [name, t] : params) std::fill(t.data(), t.data() + t.numel(), 0.0);
  Tape tape;
  Tensor score = v.decide(tape, Tensor::from_data({2}, {0.3, 0.8}));
  EXPECT_DOUBLE_EQ(score.value(), 0.5);
}

TEST(Verifier, MatchesHandRolledThreeLayerOracle) {
  Rng rng(71);
  bupm::Verifier v = bupm::Verifier::init(rng);
  std::vector<std::pair<std::string, Tensor>> params;
  v.collect_params(params, "v");
  const Tensor feature = Tensor::from_data({2}, {0.42, 0.17});

  // independent matvec chain over the collected weights
  std::vector<double> x = {0.42, 0.17};
  for (int layer = 0; layer < 3; ++layer) {
    const Tensor w = params[static_cast<std::size_t>(2 * layer)].second;
    const Tensor b = params[static_cast<std::size_t>(2 * layer + 1)].second;
    const int n = w.extent(0), m = w.extent(1);
    std::vector<double> y(static_cast<std::size_t>(m));
    for (int j = 0; j < m; ++j) {
      double acc = b.data()[j];
      for (int i = 0; i < n; ++i) acc += x[static_cast<std::size_t>(i)] * w.data()[i * m + j];
      y[static_cast<std::size_t>(j)] = layer < 2 ? std::max(acc, 0.0) : 1.0 / (1.0 + std::exp(-acc));
    }
    x = std::move(y);
  }

  Tape tape;
  Tensor score = v.decide(tape, feature);
  EXPECT_NEAR(score.value(), x[0], 1e-12);
  EXPECT_GT(score.value(), 0.0);
  EXPECT_LT(score.value(), 1.0);
}

TEST(MaskExport, ScalesToBytesRoundedHalfUp) {
  Tensor mask = Tensor::from_data({1, 3, 1}, {0.0, 0.5, 1.0});
  bupm::Image img = bupm::mask_to_image(mask);
  EXPECT_EQ(bupm::detail::to_byte(img.values[0]), 0);
  EXPECT_EQ(bupm::detail::to_byte(img.values[1]), 128);  // 127.5 rounds half-up
  EXPECT_EQ(bupm::detail::to_byte(img.values[2]), 255);
}
