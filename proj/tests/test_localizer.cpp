#include "bupm/localizer.hpp"

#include <gtest/gtest.h>

#include <set>
#include <vector>

#include "bupm/rng.hpp"
#include "testutil.hpp"

using bupm::BoundingBox;
using bupm::CellGrid;
using bupm::Rng;
using bupm::Tensor;

namespace {

Tensor mask_from(int h, int w, const std::vector<std::pair<int, int>>& cells_yx) {
  Tensor m = Tensor::full({h, w, 1}, 0.1);
  for (auto [y, x] : cells_yx) m.data()[y * w + x] = 0.9;
  return m;
}

// pixel columns covered by a box, modulo panorama width
std::set<int> covered_columns(const BoundingBox& b, int pano_w) {
  std::set<int> cols;
  for (int i = 0; i < b.width; ++i) cols.insert((b.x0 + i) % pano_w);
  return cols;
}

}  // namespace

TEST(ThresholdMask, BoundaryRuleIsGreaterOrEqual) {
  Tensor m = Tensor::from_data({1, 3, 1}, {0.1, 0.5, 0.9});
  CellGrid grid = bupm::threshold_mask(m, 0.5);
  EXPECT_FALSE(grid.at(0, 0));
  EXPECT_TRUE(grid.at(0, 1));
  EXPECT_TRUE(grid.at(0, 2));
  EXPECT_THROW(bupm::threshold_mask(m, 0.0), std::invalid_argument);
  EXPECT_THROW(bupm::threshold_mask(m, 1.0), std::invalid_argument);
}

TEST(ThresholdMask, AllHighAllLow) {
  CellGrid hi = bupm::threshold_mask(Tensor::full({2, 2, 1}, 0.9));
  CellGrid lo = bupm::threshold_mask(Tensor::full({2, 2, 1}, 0.1));
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(hi.on[i], 1);
    EXPECT_EQ(lo.on[i], 0);
  }
}

TEST(BiggestComponent, PicksTheLargerBlob) {
  // 5-cell L-shape vs 3-cell bar, separated
  Tensor m = mask_from(5, 8, {{0, 0}, {0, 1}, {1, 0}, {1, 1}, {2, 0}, {4, 5}, {4, 6}, {4, 7}});
  const auto cells = bupm::biggest_component(bupm::threshold_mask(m), false);
  EXPECT_EQ(cells.size(), 5u);
  EXPECT_EQ(cells.front(), 0);
}

TEST(BiggestComponent, EmptyMaskGivesEmptySet) {
  const auto cells = bupm::biggest_component(bupm::threshold_mask(Tensor::full({3, 3, 1}, 0.2)), true);
  EXPECT_TRUE(cells.empty());
}

TEST(BiggestComponent, DiagonalCellsConnect) {
  Tensor m = mask_from(3, 3, {{0, 0}, {1, 1}, {2, 2}});
  const auto cells = bupm::biggest_component(bupm::threshold_mask(m), false);
  EXPECT_EQ(cells.size(), 3u);
}

TEST(BiggestComponent, SeamSplitBlobMergesWhenWrapIsOn) {
  std::vector<std::pair<int, int>> cells_yx;
  for (int y = 2; y < 5; ++y) {
    for (int x : {0, 1, 14, 15}) cells_yx.push_back({y, x});
  }
  Tensor m = mask_from(8, 16, cells_yx);
  const auto wrapped = bupm::biggest_component(bupm::threshold_mask(m), true);
  EXPECT_EQ(wrapped.size(), 12u);
  const auto flat = bupm::biggest_component(bupm::threshold_mask(m), false);
  EXPECT_EQ(flat.size(), 6u);  // splits into two 6-cell halves without wrap
}

TEST(BiggestComponent, EqualSizesTieBreakToSmallestRowMajorCell) {
  Tensor m = mask_from(4, 8, {{0, 5}, {0, 6}, {2, 1}, {2, 2}});
  const auto cells = bupm::biggest_component(bupm::threshold_mask(m), false);
  ASSERT_EQ(cells.size(), 2u);
  EXPECT_EQ(cells.front(), 5);  // the (0,5) blob was met first
}

TEST(Localize, HandMappedBlobToPixels) {
  // rows 1..2, cols 3..5 at d=8 on a 64x128 panorama
  std::vector<std::pair<int, int>> cells_yx;
  for (int y = 1; y <= 2; ++y) {
    for (int x = 3; x <= 5; ++x) cells_yx.push_back({y, x});
  }
  Tensor m = mask_from(8, 16, cells_yx);
  const auto box = bupm::localize_mask(m, 64, 128);
  ASSERT_TRUE(box.has_value());
  EXPECT_EQ(box->x0, 24);
  EXPECT_EQ(box->y0, 8);
  EXPECT_EQ(box->width, 24);
  EXPECT_EQ(box->height, 16);
  EXPECT_FALSE(box->wrap);
}

TEST(Localize, EmptyMaskGivesNoBox) {
  EXPECT_FALSE(bupm::localize_mask(Tensor::full({8, 16, 1}, 0.2), 64, 128).has_value());
}

TEST(Localize, SeamCrossingBlobGetsAWraparoundBox) {
  std::vector<std::pair<int, int>> cells_yx;
  for (int y = 2; y < 5; ++y) {
    for (int x : {0, 1, 14, 15}) cells_yx.push_back({y, x});
  }
  Tensor m = mask_from(8, 16, cells_yx);
  const auto box = bupm::localize_mask(m, 64, 128);
  ASSERT_TRUE(box.has_value());
  EXPECT_EQ(box->x0, 112);
  EXPECT_EQ(box->width, 32);
  EXPECT_EQ(box->y0, 16);
  EXPECT_EQ(box->height, 24);
  EXPECT_TRUE(box->wrap);
}

TEST(Localize, MismatchedReferenceExtentsAreRejected) {
  Tensor m = Tensor::full({8, 16, 1}, 0.9);
  EXPECT_THROW(bupm::localize_mask(m, 60, 128), std::invalid_argument);
  EXPECT_THROW(bupm::localize_mask(m, 64, 64), std::invalid_argument);  // unequal factors
}

TEST(Localize, HorizontalRotationEquivariance) {
  Rng rng(77);
  Tensor m = Tensor::full({6, 12, 1}, 0.1);
  // one elongated blob near the seam
  for (auto [y, x] : std::vector<std::pair<int, int>>{{1, 10}, {1, 11}, {2, 11}, {2, 0}, {1, 0}}) {
    m.data()[y * 12 + x] = 0.9;
  }
  const auto base = bupm::localize_mask(m, 48, 96);
  ASSERT_TRUE(base.has_value());
  for (int k = 1; k < 12; ++k) {
    Tensor rotated = Tensor::full({6, 12, 1}, 0.1);
    for (int y = 0; y < 6; ++y) {
      for (int x = 0; x < 12; ++x) {
        rotated.data()[y * 12 + (x + k) % 12] = m.data()[y * 12 + x];
      }
    }
    const auto got = bupm::localize_mask(rotated, 48, 96);
    ASSERT_TRUE(got.has_value());
    // rotating the mask by k cells rotates the covered pixel columns by k*8
    std::set<int> expect_cols;
    for (int c : covered_columns(*base, 96)) expect_cols.insert((c + k * 8) % 96);
    EXPECT_EQ(covered_columns(*got, 96), expect_cols) << "shift " << k;
    EXPECT_EQ(got->y0, base->y0);
    EXPECT_EQ(got->height, base->height);
  }
}

TEST(Localize, BoxCoversComponentAndIsMinimal) {
  Rng rng(81);
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 3 + static_cast<int>(rng.uniform_int(4));
    const int w = 4 + static_cast<int>(rng.uniform_int(5));
    Tensor m = Tensor::full({h, w, 1}, 0.1);
    for (int i = 0; i < h * w; ++i) {
      if (rng.coin(0.3)) m.data()[i] = 0.9;
    }
    const auto cells = bupm::biggest_component(bupm::threshold_mask(m), true);
    const auto box = bupm::localize_mask(m, h, w);  // d = 1
    if (cells.empty()) {
      EXPECT_FALSE(box.has_value());
      continue;
    }
    ASSERT_TRUE(box.has_value());
    const auto cols = covered_columns(*box, w);
    std::set<int> comp_rows, comp_cols;
    for (int cell : cells) {
      const int y = cell / w, x = cell % w;
      EXPECT_TRUE(cols.count(x)) << "column " << x << " uncovered";
      EXPECT_GE(y, box->y0);
      EXPECT_LT(y, box->y0 + box->height);
      comp_rows.insert(y);
      comp_cols.insert(x);
    }
    // minimality: each boundary row/column of the box touches the component
    EXPECT_TRUE(comp_rows.count(box->y0));
    EXPECT_TRUE(comp_rows.count(box->y0 + box->height - 1));
    EXPECT_TRUE(comp_cols.count(box->x0 % w));
    EXPECT_TRUE(comp_cols.count((box->x0 + box->width - 1) % w));
  }
}

TEST(BoxIou, HandCases) {
  BoundingBox a{10, 10, 20, 20, false};
  EXPECT_DOUBLE_EQ(bupm::box_iou(a, a, 128), 1.0);
  BoundingBox b{40, 10, 20, 20, false};
  EXPECT_DOUBLE_EQ(bupm::box_iou(a, b, 128), 0.0);
  BoundingBox c{20, 10, 20, 20, false};  // half-column overlap, same rows
  EXPECT_DOUBLE_EQ(bupm::box_iou(a, c, 128), 10.0 * 20 / (2 * 400 - 200));
  // wrapped box ending at column 9 overlaps a's columns 10..19 not at all,
  // but shifting by 10 makes its tail land on a's head
  BoundingBox w1{118, 10, 20, 20, true};  // covers 118..127 and 0..9
  EXPECT_DOUBLE_EQ(bupm::box_iou(a, w1, 128), 0.0);
  BoundingBox w2{120, 10, 20, 20, true};  // covers 120..127 and 0..11
  const double inter = 2.0 * 20;          // columns 10,11
  EXPECT_DOUBLE_EQ(bupm::box_iou(a, w2, 128), inter / (800 - inter));
}
