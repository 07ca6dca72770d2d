#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bupm/tensor.hpp"

namespace bupm {

// Axis-aligned box in panorama pixels. When wrap is set, x0 + width runs past
// the right edge and coverage continues from column 0.
struct BoundingBox {
  int x0 = 0;
  int y0 = 0;
  int width = 0;
  int height = 0;
  bool wrap = false;
};

struct CellGrid {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> on;  // row-major

  bool at(int y, int x) const { return on[static_cast<std::size_t>(y) * w + x] != 0; }
};

inline CellGrid threshold_mask(const Tensor& mask, double t = 0.5) {
  if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("threshold must be inside (0,1)");
  if (mask.rank() != 3 || mask.extent(2) != 1) {
    throw std::invalid_argument("threshold_mask: expected an HxWx1 mask");
  }
  CellGrid grid;
  grid.h = mask.extent(0);
  grid.w = mask.extent(1);
  grid.on.resize(static_cast<std::size_t>(grid.h) * grid.w);
  for (std::size_t i = 0; i < grid.on.size(); ++i) {
    grid.on[i] = mask.data()[i] >= t ? 1 : 0;
  }
  return grid;
}

// Largest 8-connected set of on-cells, as flat row-major indices. With
// wrap_horizontal, column 0 neighbors column w-1. Equal sizes tie-break to
// the component containing the smallest row-major cell (the scan finds that
// one first).
inline std::vector<int> biggest_component(const CellGrid& grid, bool wrap_horizontal) {
  const int h = grid.h, w = grid.w;
  std::vector<std::uint8_t> seen(static_cast<std::size_t>(h) * w, 0);
  std::vector<int> best, current, stack;
  for (int start = 0; start < h * w; ++start) {
    if (!grid.on[static_cast<std::size_t>(start)] || seen[static_cast<std::size_t>(start)]) continue;
    current.clear();
    stack.assign(1, start);
    seen[static_cast<std::size_t>(start)] = 1;
    while (!stack.empty()) {
      const int cell = stack.back();
      stack.pop_back();
      current.push_back(cell);
      const int y = cell / w, x = cell % w;
      for (int dy = -1; dy <= 1; ++dy) {
        const int ny = y + dy;
        if (ny < 0 || ny >= h) continue;
        for (int dx = -1; dx <= 1; ++dx) {
          if (dy == 0 && dx == 0) continue;
          int nx = x + dx;
          if (wrap_horizontal) {
            nx = (nx + w) % w;
          } else if (nx < 0 || nx >= w) {
            continue;
          }
          const int n = ny * w + nx;
          if (grid.on[static_cast<std::size_t>(n)] && !seen[static_cast<std::size_t>(n)]) {
            seen[static_cast<std::size_t>(n)] = 1;
            stack.push_back(n);
          }
        }
      }
    }
    if (current.size() > best.size()) best = current;
  }
  std::sort(best.begin(), best.end());
  return best;
}

namespace detail {

// Minimal covering arc of a set of distinct columns on a circle of size w:
// the complement of the largest circular gap.
struct ColumnArc {
  int start = 0;
  int length = 0;
  bool wraps = false;
};

inline ColumnArc minimal_column_arc(std::vector<int> cols, int w, bool wrap_horizontal) {
  std::sort(cols.begin(), cols.end());
  cols.erase(std::unique(cols.begin(), cols.end()), cols.end());
  const int n = static_cast<int>(cols.size());
  if (!wrap_horizontal || n == 0) {
    ColumnArc arc;
    arc.start = cols.empty() ? 0 : cols.front();
    arc.length = cols.empty() ? 0 : cols.back() - cols.front() + 1;
    return arc;
  }
  if (n == w) return {0, w, false};
  int best_gap = -1, gap_end = 0;  // gap_end: first column after the gap
  for (int i = 0; i < n; ++i) {
    const int next = cols[(i + 1) % n];
    const int gap = (i + 1 < n ? next : next + w) - cols[static_cast<std::size_t>(i)] - 1;
    if (gap > best_gap) {
      best_gap = gap;
      gap_end = i + 1 < n ? next : next % w;
    }
  }
  ColumnArc arc;
  arc.start = gap_end;
  arc.length = w - best_gap;
  arc.wraps = arc.start + arc.length > w;
  return arc;
}

}  // namespace detail

// Minimum pixel box around the biggest component of the thresholded mask.
// Feature cell (x,y) covers the pixel block [x*d,(x+1)*d) x [y*d,(y+1)*d)
// where d = ref_w / mask width. Empty mask -> nullopt.
inline std::optional<BoundingBox> localize_mask(const Tensor& mask, int ref_h, int ref_w,
                                                double t = 0.5, bool wrap_horizontal = true) {
  CellGrid grid = threshold_mask(mask, t);
  if (ref_h % grid.h != 0 || ref_w % grid.w != 0 || ref_h / grid.h != ref_w / grid.w) {
    throw std::invalid_argument("localize: reference extents " + std::to_string(ref_h) + "x" +
                                std::to_string(ref_w) + " are not a uniform multiple of the " +
                                std::to_string(grid.h) + "x" + std::to_string(grid.w) + " mask");
  }
  const int d = ref_w / grid.w;
  const std::vector<int> cells = biggest_component(grid, wrap_horizontal);
  if (cells.empty()) return std::nullopt;

  int y_min = grid.h, y_max = -1;
  std::vector<int> cols;
  cols.reserve(cells.size());
  for (int cell : cells) {
    const int y = cell / grid.w, x = cell % grid.w;
    y_min = std::min(y_min, y);
    y_max = std::max(y_max, y);
    cols.push_back(x);
  }
  const detail::ColumnArc arc = detail::minimal_column_arc(std::move(cols), grid.w, wrap_horizontal);

  BoundingBox box;
  box.x0 = arc.start * d;
  box.y0 = y_min * d;
  box.width = arc.length * d;
  box.height = (y_max - y_min + 1) * d;
  box.wrap = arc.wraps;
  return box;
}

// Intersection-over-union of two boxes on a panorama of width pano_w, with
// horizontal wraparound honored for both.
inline double box_iou(const BoundingBox& a, const BoundingBox& b, int pano_w) {
  const int row_overlap =
      std::max(0, std::min(a.y0 + a.height, b.y0 + b.height) - std::max(a.y0, b.y0));
  std::vector<std::uint8_t> cover_a(static_cast<std::size_t>(pano_w), 0);
  std::vector<std::uint8_t> cover_b(static_cast<std::size_t>(pano_w), 0);
  for (int i = 0; i < a.width && i < pano_w; ++i) cover_a[static_cast<std::size_t>((a.x0 + i) % pano_w)] = 1;
  for (int i = 0; i < b.width && i < pano_w; ++i) cover_b[static_cast<std::size_t>((b.x0 + i) % pano_w)] = 1;
  int col_common = 0;
  for (int i = 0; i < pano_w; ++i) col_common += cover_a[static_cast<std::size_t>(i)] & cover_b[static_cast<std::size_t>(i)];
  const double inter = static_cast<double>(row_overlap) * col_common;
  const double area_a = static_cast<double>(a.width) * a.height;
  const double area_b = static_cast<double>(b.width) * b.height;
  const double uni = area_a + area_b - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace bupm
