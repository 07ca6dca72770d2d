#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bupm/image.hpp"
#include "bupm/localizer.hpp"
#include "bupm/manifest.hpp"
#include "bupm/rng.hpp"

namespace bupm {

namespace detail {

struct Rgb {
  double r, g, b;
};

inline Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

inline std::uint64_t pix_hash(std::uint64_t a, std::uint64_t b, std::uint64_t c,
                              std::uint64_t d = 0) {
  std::uint64_t x = a;
  x = splitmix64(x ^ (b * 0x9e3779b97f4a7c15ULL));
  x = splitmix64(x ^ (c * 0xbf58476d1ce4e5b9ULL));
  x = splitmix64(x ^ (d * 0x94d049bb133111ebULL));
  return x;
}

inline void put_px(Image& img, int y, int x, const Rgb& c) {
  const int w = img.width;
  x %= w;
  if (x < 0) x += w;
  double* p = img.values.data() + (static_cast<std::size_t>(y) * w + x) * 3;
  p[0] = std::min(std::max(c.r, 0.0), 1.0);
  p[1] = std::min(std::max(c.g, 0.0), 1.0);
  p[2] = std::min(std::max(c.b, 0.0), 1.0);
}

}  // namespace detail

struct Panorama {
  Image image;
  std::vector<BoundingBox> candidates;  // facade boxes usable as query sources
  std::uint64_t seed = 0;
};

// Deterministic street-scene stand-in: gradient sky with periodic cloud
// bands, a textured ground strip, and a ring of non-overlapping textured
// facades. Everything is drawn modulo the width or from local coordinates,
// so the left and right edges continue into each other.
inline Panorama procedural_panorama(std::uint64_t seed, int h, int w) {
  if (h < 32 || w < 64) throw std::invalid_argument("panorama extents too small");
  Panorama pano;
  pano.seed = seed;
  pano.image = Image::create(h, w, 3);
  Rng rng = derive_rng(seed, "pano/layout");

  const int ground_y = (h * 18) / 25;
  const double hue_sky = rng.uniform();
  const double hue_ground = rng.uniform();
  // Each scene gets its own palette anchor; buildings only drift around it.
  // Scenes from different seeds end up with visibly different color schemes,
  // which is what makes one street tell apart from another here.
  const double hue_base = rng.uniform();
  const double hue_window = rng.uniform();
  const double sat_anchor = rng.uniform(0.30, 0.55);
  const double val_anchor = rng.uniform(0.40, 0.68);
  const int cloud_cycles = 1 + static_cast<int>(rng.uniform_int(4));
  const double cloud_phase = rng.uniform();
  const double cloud_row = rng.uniform(0.15, 0.5);

  for (int y = 0; y < ground_y; ++y) {
    const double t = static_cast<double>(y) / ground_y;
    const double band = std::exp(-std::pow((t - cloud_row) * 6.0, 2.0));
    for (int x = 0; x < w; ++x) {
      const double wave =
          0.10 * band * std::sin(2.0 * 3.14159265358979323846 *
                                 (cloud_cycles * static_cast<double>(x) / w + cloud_phase));
      detail::Rgb c = detail::hsv_to_rgb(hue_sky + 0.02 * t, 0.45 - 0.25 * t,
                                         0.55 + 0.30 * t + wave);
      detail::put_px(pano.image, y, x, c);
    }
  }
  for (int y = ground_y; y < h; ++y) {
    const double t = static_cast<double>(y - ground_y) / std::max(1, h - ground_y);
    for (int x = 0; x < w; ++x) {
      const double speckle =
          (static_cast<double>(detail::pix_hash(seed, 0x67, static_cast<std::uint64_t>(x),
                                                static_cast<std::uint64_t>(y)) &
                               0xff) /
               255.0 -
           0.5) *
          0.06;
      detail::Rgb c = detail::hsv_to_rgb(hue_ground, 0.25, 0.30 + 0.10 * t + speckle);
      detail::put_px(pano.image, y, x, c);
    }
  }

  // Facades stay inside their slots with at least one free column at each
  // slot boundary, so the seam always falls in a gap and stays smooth.
  const int buildings = 4 + static_cast<int>(rng.uniform_int(3));
  const int slot = w / buildings;
  struct PlacedRect {
    int x0, y0, w, h;
  };
  std::vector<PlacedRect> placed;
  for (int k = 0; k < buildings; ++k) {
    const int bw = std::max(8, std::min(slot - 2, static_cast<int>(slot * rng.uniform(0.55, 0.85))));
    const int bh = static_cast<int>(h * rng.uniform(0.38, 0.60));
    const int slack = slot - bw;
    const int offset =
        slack >= 3 ? 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(slack - 2)))
                   : std::max(0, slack / 2);
    const int x0 = k * slot + offset;
    const int top_y = ground_y - bh;

    const double hue_b = hue_base + rng.uniform(-0.07, 0.07);
    const double sat = sat_anchor + rng.uniform(-0.06, 0.06);
    const double val = val_anchor + rng.uniform(-0.06, 0.06);
    const int style = static_cast<int>(detail::pix_hash(seed, 0xb1, static_cast<std::uint64_t>(k)) % 3);
    const int pitch_x = 4 + static_cast<int>(rng.uniform_int(4));
    const int pitch_y = 4 + static_cast<int>(rng.uniform_int(4));

    for (int j = 0; j < bh; ++j) {
      for (int i = 0; i < bw; ++i) {
        double v = val;
        double s = sat;
        double hshift = 0.0;
        if (j < 2 || i == 0 || i == bw - 1) {
          v *= 0.55;  // roofline and corner outlines
        } else if (style == 0) {
          // window grid
          const int wx = i / pitch_x, wy = j / pitch_y;
          const bool frame = i % pitch_x == 0 || j % pitch_y == 0;
          if (frame) {
            v *= 0.75;
          } else if (detail::pix_hash(seed, static_cast<std::uint64_t>(k) + 1,
                                      static_cast<std::uint64_t>(wx),
                                      static_cast<std::uint64_t>(wy)) &
                     1) {
            hshift = hue_window - hue_b;  // lit window, scene-wide color
            s = 0.55;
            v = 0.85;
          } else {
            v *= 0.40;
          }
        } else if (style == 1) {
          // horizontal floor bands with pilasters
          if (j % pitch_y < 2) v *= 0.6;
          if (i % (pitch_x * 2) < 2) v *= 0.8;
          if (((i + 2 * j) / 3) % 4 == 0) s *= 0.7;
        } else {
          // diagonal cladding in local coordinates
          if (((i + j) / 2) % 3 == 0) v *= 0.72;
          if (((i - j + 4 * bh) / 5) % 4 == 1) s *= 0.6;
        }
        detail::put_px(pano.image, top_y + j, x0 + i,
                       detail::hsv_to_rgb(hue_b + hshift, s, v));
      }
    }

    placed.push_back(PlacedRect{x0, top_y, bw, bh});

    BoundingBox box;
    box.x0 = x0;
    box.y0 = top_y;
    box.width = bw;
    box.height = bh;
    box.wrap = x0 + bw > w;
    const double area = static_cast<double>(bw) * bh / (static_cast<double>(h) * w);
    const double aspect = static_cast<double>(bw) / bh;
    if (area >= 0.04 && area <= 0.25 && aspect >= 0.5 && aspect <= 2.0) {
      pano.candidates.push_back(box);
    }
  }

  // Street clutter: small textured blocks (signs, kiosks, banners) scattered
  // around the facades. Their colors roam the whole hue circle while the
  // buildings keep the scene palette, so every panorama contains patches that
  // could have come from somewhere else and matching cannot lean on layout
  // alone. They stay clear of the facades and are far too small to become
  // region candidates.
  const int clutter = 8 + static_cast<int>(rng.uniform_int(5));
  for (int k = 0; k < clutter; ++k) {
    const int cw = 5 + static_cast<int>(rng.uniform_int(9));
    const int ch = 4 + static_cast<int>(rng.uniform_int(8));
    const double hue_c = rng.uniform();
    const double sat_c = rng.uniform(0.45, 0.75);
    const double val_c = rng.uniform(0.45, 0.75);
    const int pitch = 2 + static_cast<int>(rng.uniform_int(2));
    int cx = 0, cy = 0;
    bool found = false;
    for (int attempt = 0; attempt < 20 && !found; ++attempt) {
      cx = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(w)));
      cy = 2 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(h - ch - 4)));
      found = true;
      for (const PlacedRect& b : placed) {
        const bool rows = cy < b.y0 + b.h + 1 && b.y0 - 1 < cy + ch;
        // the block may wrap; test both unwrapped copies of its column span
        const bool cols = (cx < b.x0 + b.w + 1 && b.x0 - 1 < cx + cw) ||
                          (cx + cw > w && b.x0 - 1 < cx + cw - w);
        if (rows && cols) {
          found = false;
          break;
        }
      }
    }
    if (!found) continue;
    for (int j = 0; j < ch; ++j) {
      for (int i = 0; i < cw; ++i) {
        double v = val_c;
        double s = sat_c;
        if (j == 0 || j == ch - 1 || i == 0 || i == cw - 1) {
          v *= 0.55;
        } else if ((i / pitch + j / pitch) & 1) {
          v *= 0.65;
        } else {
          s *= 0.80;
          v = std::min(1.0, v * 1.25);
        }
        detail::put_px(pano.image, cy + j, (cx + i) % w, detail::hsv_to_rgb(hue_c, s, v));
      }
    }
    placed.push_back(PlacedRect{cx, cy, cw, ch});
  }
  return pano;
}

// One box from the candidate list, or a uniform random box with aspect in
// [0.5, 2] and area in [4%, 25%] of the panorama when no candidates exist.
// Boxes may cross the horizontal seam.
inline BoundingBox select_region(const Image& pano, const std::vector<BoundingBox>& candidates,
                                 Rng& rng) {
  if (pano.height < 64 || pano.width < 64) {
    throw std::invalid_argument("select_region: panorama must be at least 64x64");
  }
  if (!candidates.empty()) {
    return candidates[static_cast<std::size_t>(rng.uniform_int(candidates.size()))];
  }
  const double total = static_cast<double>(pano.height) * pano.width;
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const double area_frac = rng.uniform(0.045, 0.245);
    const double aspect = rng.uniform(0.5, 2.0);
    const double area = area_frac * total;
    int bw = static_cast<int>(std::lround(std::sqrt(area * aspect)));
    int bh = static_cast<int>(std::lround(std::sqrt(area / aspect)));
    bw = std::min(bw, pano.width);
    bh = std::min(bh, pano.height);
    if (bw < 8 || bh < 8) continue;
    const double got_area = static_cast<double>(bw) * bh / total;
    const double got_aspect = static_cast<double>(bw) / bh;
    if (got_area < 0.04 || got_area > 0.25 || got_aspect < 0.5 || got_aspect > 2.0) continue;
    BoundingBox box;
    box.x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(pano.width)));
    box.y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(pano.height - bh + 1)));
    box.width = bw;
    box.height = bh;
    box.wrap = box.x0 + bw > pano.width;
    return box;
  }
  throw std::invalid_argument("select_region: could not sample a conforming box");
}

struct AugmentParams {
  double scale = 1.0;
  double shift_x = 0.0;
  double shift_y = 0.0;
  double gamma = 1.0;
  // corner displacement fractions of the window extents, order:
  // top-left, top-right, bottom-right, bottom-left; (dx, dy) pairs
  double corners[4][2] = {{0, 0}, {0, 0}, {0, 0}, {0, 0}};

  void validate() const {
    if (!(scale >= 0.5 && scale <= 2.0)) {
      throw std::invalid_argument("augment: scale must lie in [0.5, 2]");
    }
    if (!(shift_x > -0.2 && shift_x < 0.2 && shift_y > -0.2 && shift_y < 0.2)) {
      throw std::invalid_argument("augment: shifts must lie inside (-0.2, 0.2)");
    }
    if (!(gamma >= 0.5 && gamma <= 1.5)) {
      throw std::invalid_argument("augment: gamma must lie in [0.5, 1.5]");
    }
    for (const auto& c : corners) {
      if (!(c[0] >= -0.1 && c[0] <= 0.1 && c[1] >= -0.1 && c[1] <= 0.1)) {
        throw std::invalid_argument("augment: corner offsets must lie in [-0.1, 0.1]");
      }
    }
  }

  bool is_identity() const {
    if (scale != 1.0 || shift_x != 0.0 || shift_y != 0.0 || gamma != 1.0) return false;
    for (const auto& c : corners) {
      if (c[0] != 0.0 || c[1] != 0.0) return false;
    }
    return true;
  }
};

inline AugmentParams sample_augment_params(Rng& rng) {
  AugmentParams p;
  p.scale = rng.uniform(0.5, 2.0);
  do {
    p.shift_x = rng.uniform(-0.2, 0.2);
  } while (p.shift_x == -0.2);
  do {
    p.shift_y = rng.uniform(-0.2, 0.2);
  } while (p.shift_y == -0.2);
  p.gamma = rng.uniform(0.5, 1.5);
  for (auto& c : p.corners) {
    c[0] = rng.uniform(-0.1, 0.1);
    c[1] = rng.uniform(-0.1, 0.1);
  }
  return p;
}

namespace detail {

// unit square -> arbitrary quad projective map (closed form)
struct ProjectiveMap {
  double a, b, c, d, e, f, g, h;

  static ProjectiveMap to_quad(const double q[4][2]) {
    // corners at (0,0),(1,0),(1,1),(0,1)
    const double x0 = q[0][0], y0 = q[0][1];
    const double x1 = q[1][0], y1 = q[1][1];
    const double x2 = q[2][0], y2 = q[2][1];
    const double x3 = q[3][0], y3 = q[3][1];
    const double sx = x0 - x1 + x2 - x3;
    const double sy = y0 - y1 + y2 - y3;
    ProjectiveMap m{};
    if (sx == 0.0 && sy == 0.0) {
      m.a = x1 - x0;
      m.b = x3 - x0;
      m.c = x0;
      m.d = y1 - y0;
      m.e = y3 - y0;
      m.f = y0;
      m.g = m.h = 0.0;
      return m;
    }
    const double dx1 = x1 - x2, dx2 = x3 - x2;
    const double dy1 = y1 - y2, dy2 = y3 - y2;
    const double den = dx1 * dy2 - dx2 * dy1;
    m.g = (sx * dy2 - sy * dx2) / den;
    m.h = (dx1 * sy - dy1 * sx) / den;
    m.a = x1 - x0 + m.g * x1;
    m.b = x3 - x0 + m.h * x3;
    m.c = x0;
    m.d = y1 - y0 + m.g * y1;
    m.e = y3 - y0 + m.h * y3;
    m.f = y0;
    return m;
  }

  void apply(double u, double v, double& x, double& y) const {
    const double w = g * u + h * v + 1.0;
    x = (a * u + b * v + c) / w;
    y = (d * u + e * v + f) / w;
  }
};

inline double sample_clamped(const Image& img, double fy, double fx, int c) {
  fy = std::min(std::max(fy, 0.0), static_cast<double>(img.height - 1));
  fx = std::min(std::max(fx, 0.0), static_cast<double>(img.width - 1));
  const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
  const int y1 = std::min(y0 + 1, img.height - 1), x1 = std::min(x0 + 1, img.width - 1);
  const double wy = fy - y0, wx = fx - x0;
  const double top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
  const double bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
  return top * (1 - wy) + bot * wy;
}

}  // namespace detail

// Synthesizes a query from a source region: a window of scale x the region
// extents, displaced by the shift fractions, corners perturbed into a quad,
// resampled to the region's resolution (clamped at the region edges), then
// gamma-mapped. Identity parameters reproduce the input exactly.
inline Image augment(const Image& region, const AugmentParams& params) {
  params.validate();
  const int h = region.height, w = region.width;
  Image out = region;

  if (!(params.scale == 1.0 && params.shift_x == 0.0 && params.shift_y == 0.0 &&
        std::all_of(&params.corners[0][0], &params.corners[0][0] + 8,
                    [](double v) { return v == 0.0; }))) {
    // Window corners in region pixel coordinates. Extents are measured
    // between pixel centres so that scale 1 with zero shift lands exactly on
    // the input grid, making the warp continuous with the identity case.
    const double cx = (w - 1) / 2.0 + params.shift_x * w;
    const double cy = (h - 1) / 2.0 + params.shift_y * h;
    const double half_w = params.scale * (w - 1) / 2.0;
    const double half_h = params.scale * (h - 1) / 2.0;
    double quad[4][2] = {{cx - half_w, cy - half_h},
                         {cx + half_w, cy - half_h},
                         {cx + half_w, cy + half_h},
                         {cx - half_w, cy + half_h}};
    for (int k = 0; k < 4; ++k) {
      quad[k][0] += params.corners[k][0] * 2.0 * half_w;
      quad[k][1] += params.corners[k][1] * 2.0 * half_h;
    }
    const auto map = detail::ProjectiveMap::to_quad(quad);
    out = Image::create(h, w, region.channels);
    for (int y = 0; y < h; ++y) {
      const double v = h > 1 ? static_cast<double>(y) / (h - 1) : 0.0;
      for (int x = 0; x < w; ++x) {
        const double u = w > 1 ? static_cast<double>(x) / (w - 1) : 0.0;
        double sx, sy;
        map.apply(u, v, sx, sy);
        for (int c = 0; c < region.channels; ++c) {
          out.at(y, x, c) = detail::sample_clamped(region, sy, sx, c);
        }
      }
    }
  }

  if (params.gamma != 1.0) {
    for (double& v : out.values) v = std::pow(v, params.gamma);
  }
  return out;
}

// Crop with horizontal wraparound; vertical extent must fit.
inline Image crop_wrapped(const Image& pano, const BoundingBox& box) {
  if (box.y0 < 0 || box.y0 + box.height > pano.height || box.width < 1 ||
      box.width > pano.width) {
    throw std::invalid_argument("crop: box does not fit the panorama vertically");
  }
  Image out = Image::create(box.height, box.width, pano.channels);
  for (int y = 0; y < box.height; ++y) {
    for (int x = 0; x < box.width; ++x) {
      const int sx = (box.x0 + x) % pano.width;
      for (int c = 0; c < pano.channels; ++c) {
        out.at(y, x, c) = pano.at(box.y0 + y, sx, c);
      }
    }
  }
  return out;
}

// Feature-resolution target: cell on iff the source box covers at least half
// of the cell's d x d pixel block (column overlap computed modulo the width).
inline CellGrid box_to_target(const BoundingBox& box, int pano_h, int pano_w, int d) {
  if (pano_h % d != 0 || pano_w % d != 0) {
    throw std::invalid_argument("target: panorama extents must be multiples of " +
                                std::to_string(d));
  }
  CellGrid grid;
  grid.h = pano_h / d;
  grid.w = pano_w / d;
  grid.on.assign(static_cast<std::size_t>(grid.h) * grid.w, 0);

  // box column coverage as up to two plain intervals
  const int bx0 = ((box.x0 % pano_w) + pano_w) % pano_w;
  const int over = bx0 + box.width - pano_w;
  const int seg0_lo = bx0, seg0_hi = std::min(bx0 + box.width, pano_w);
  const int seg1_lo = 0, seg1_hi = std::max(0, over);

  for (int cy = 0; cy < grid.h; ++cy) {
    const int block_y0 = cy * d, block_y1 = block_y0 + d;
    const int oy = std::max(0, std::min(block_y1, box.y0 + box.height) - std::max(block_y0, box.y0));
    if (oy == 0) continue;
    for (int cx = 0; cx < grid.w; ++cx) {
      const int block_x0 = cx * d, block_x1 = block_x0 + d;
      int ox = std::max(0, std::min(block_x1, seg0_hi) - std::max(block_x0, seg0_lo));
      ox += std::max(0, std::min(block_x1, seg1_hi) - std::max(block_x0, seg1_lo));
      if (2 * ox * oy >= d * d) {
        grid.on[static_cast<std::size_t>(cy) * grid.w + cx] = 1;
      }
    }
  }
  return grid;
}

struct SynthRecord {
  Image query;
  std::uint64_t pano_seed = 0;
  BoundingBox source_box;
  CellGrid target;
  AugmentParams params;
  std::uint64_t seed = 0;
};

inline SynthRecord make_positive(const Panorama& pano, int feature_factor, Rng& rng,
                                 std::uint64_t record_seed = 0) {
  SynthRecord rec;
  rec.pano_seed = pano.seed;
  rec.seed = record_seed;
  rec.source_box = select_region(pano.image, pano.candidates, rng);
  rec.params = sample_augment_params(rng);
  rec.query = augment(crop_wrapped(pano.image, rec.source_box), rec.params);
  rec.target = box_to_target(rec.source_box, pano.image.height, pano.image.width, feature_factor);
  return rec;
}

// Reference reassignment with no fixed points, uniformly over permutations
// filtered to derangements.
inline std::vector<std::size_t> derangement(std::size_t n, Rng& rng) {
  if (n < 2) throw std::invalid_argument("derangement needs at least 2 elements");
  std::vector<std::size_t> perm(n);
  while (true) {
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    rng.shuffle(perm);
    bool ok = true;
    for (std::size_t i = 0; i < n; ++i) ok = ok && perm[i] != i;
    if (ok) return perm;
  }
}

struct SynthDatasetConfig {
  int panoramas = 50;
  int samples = 500;
  int pano_h = 96;
  int pano_w = 192;
  int feature_factor = 8;
  double train_frac = 0.8;  // remainder becomes the test split
  std::uint64_t seed = 1;
};

struct SynthSampleMeta {
  std::string query_path;  // relative to the dataset root
  std::string ref_path;
  int pano_index = 0;
  std::uint64_t pano_seed = 0;
  std::uint64_t sample_seed = 0;
  BoundingBox box;
  AugmentParams params;
  std::string split;
};

struct SynthMetaFile {
  int pano_h = 0;
  int pano_w = 0;
  int feature_factor = 0;
  std::vector<SynthSampleMeta> rows;
};

namespace detail {

constexpr const char* kSynthFormat = "bupm-synth";
constexpr int kSynthVersion = 1;

// Panoramas live on a synthetic half-degree grid, so every distinct pair is
// dozens of kilometres apart and eligible for negative pairing.
inline GpsPoint synth_gps(int pano_index) {
  GpsPoint p;
  p.lat = -60.0 + 0.5 * (pano_index / 600);
  p.lon = -150.0 + 0.5 * (pano_index % 600);
  return p;
}

inline nlohmann::json params_to_json(const AugmentParams& p) {
  nlohmann::json j;
  j["scale"] = p.scale;
  j["shift_x"] = p.shift_x;
  j["shift_y"] = p.shift_y;
  j["gamma"] = p.gamma;
  nlohmann::json corners = nlohmann::json::array();
  for (const auto& c : p.corners) {
    corners.push_back(c[0]);
    corners.push_back(c[1]);
  }
  j["corners"] = corners;
  return j;
}

inline AugmentParams params_from_json(const nlohmann::json& j) {
  AugmentParams p;
  p.scale = j.at("scale").get<double>();
  p.shift_x = j.at("shift_x").get<double>();
  p.shift_y = j.at("shift_y").get<double>();
  p.gamma = j.at("gamma").get<double>();
  const auto& corners = j.at("corners");
  if (!corners.is_array() || corners.size() != 8) {
    throw std::runtime_error("synth meta: corners must hold 8 numbers");
  }
  for (int k = 0; k < 4; ++k) {
    p.corners[k][0] = corners[2 * k].get<double>();
    p.corners[k][1] = corners[2 * k + 1].get<double>();
  }
  return p;
}

inline nlohmann::json box_to_json(const BoundingBox& b) {
  nlohmann::json j;
  j["x0"] = b.x0;
  j["y0"] = b.y0;
  j["width"] = b.width;
  j["height"] = b.height;
  j["wrap"] = b.wrap;
  return j;
}

inline BoundingBox box_from_json(const nlohmann::json& j) {
  BoundingBox b;
  b.x0 = j.at("x0").get<int>();
  b.y0 = j.at("y0").get<int>();
  b.width = j.at("width").get<int>();
  b.height = j.at("height").get<int>();
  b.wrap = j.at("wrap").get<bool>();
  return b;
}

inline std::string zero_pad(int value, int digits) {
  std::string s = std::to_string(value);
  while (static_cast<int>(s.size()) < digits) s.insert(s.begin(), '0');
  return s;
}

}  // namespace detail

inline void save_synth_meta(const SynthMetaFile& meta, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DecodeError(path, "cannot open for writing");
  nlohmann::json header;
  header["format"] = detail::kSynthFormat;
  header["version"] = detail::kSynthVersion;
  header["pano_h"] = meta.pano_h;
  header["pano_w"] = meta.pano_w;
  header["feature_factor"] = meta.feature_factor;
  out << header.dump() << '\n';
  for (const auto& row : meta.rows) {
    nlohmann::json j;
    j["query_path"] = row.query_path;
    j["ref_path"] = row.ref_path;
    j["pano_index"] = row.pano_index;
    j["pano_seed"] = row.pano_seed;
    j["sample_seed"] = row.sample_seed;
    j["box"] = detail::box_to_json(row.box);
    j["params"] = detail::params_to_json(row.params);
    j["split"] = row.split;
    out << j.dump() << '\n';
  }
  if (!out) throw DecodeError(path, "write failed");
}

inline SynthMetaFile load_synth_meta(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DecodeError(path, "cannot open");
  SynthMetaFile meta;
  std::string line;
  int line_no = 0;
  bool saw_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!saw_header) {
      if (j.value("format", "") != detail::kSynthFormat ||
          j.value("version", 0) != detail::kSynthVersion) {
        throw std::runtime_error(path + ": not a synth metadata file");
      }
      meta.pano_h = j.at("pano_h").get<int>();
      meta.pano_w = j.at("pano_w").get<int>();
      meta.feature_factor = j.at("feature_factor").get<int>();
      saw_header = true;
      continue;
    }
    SynthSampleMeta row;
    row.query_path = j.at("query_path").get<std::string>();
    row.ref_path = j.at("ref_path").get<std::string>();
    row.pano_index = j.at("pano_index").get<int>();
    row.pano_seed = j.at("pano_seed").get<std::uint64_t>();
    row.sample_seed = j.at("sample_seed").get<std::uint64_t>();
    row.box = detail::box_from_json(j.at("box"));
    row.params = detail::params_from_json(j.at("params"));
    row.split = j.at("split").get<std::string>();
    meta.rows.push_back(std::move(row));
  }
  if (!saw_header) throw std::runtime_error(path + ": empty synth metadata file");
  return meta;
}

struct SynthDataset {
  std::string root;
  Manifest manifest;    // positive pairs only; negatives are paired downstream
  SynthMetaFile meta;
};

// Renders the panoramas, synthesizes queries, and writes the whole dataset:
//   <out>/panos/pano_NNN.png, <out>/queries/q_NNNNNN.png,
//   <out>/manifest.jsonl, <out>/synth.jsonl
inline SynthDataset write_synth_dataset(const SynthDatasetConfig& cfg,
                                        const std::string& out_dir) {
  if (cfg.panoramas < 1) throw std::invalid_argument("dataset needs at least one panorama");
  if (cfg.samples < 0) throw std::invalid_argument("sample count must be non-negative");
  if (cfg.train_frac < 0.0 || cfg.train_frac > 1.0) {
    throw std::invalid_argument("train fraction must lie in [0, 1]");
  }
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "panos");
  fs::create_directories(fs::path(out_dir) / "queries");

  SynthDataset ds;
  ds.root = out_dir;
  ds.meta.pano_h = cfg.pano_h;
  ds.meta.pano_w = cfg.pano_w;
  ds.meta.feature_factor = cfg.feature_factor;

  std::vector<Panorama> panos;
  std::vector<std::string> pano_paths;
  panos.reserve(cfg.panoramas);
  for (int i = 0; i < cfg.panoramas; ++i) {
    const std::uint64_t pano_seed = derive_seed(cfg.seed, "pano/" + std::to_string(i));
    panos.push_back(procedural_panorama(pano_seed, cfg.pano_h, cfg.pano_w));
    const std::string rel = "panos/pano_" + detail::zero_pad(i, 3) + ".png";
    save_image(panos.back().image, (fs::path(out_dir) / rel).string());
    pano_paths.push_back(rel);
  }

  const int n_train = static_cast<int>(std::lround(cfg.train_frac * cfg.samples));
  for (int i = 0; i < cfg.samples; ++i) {
    const int pano_index = i % cfg.panoramas;
    const std::uint64_t sample_seed = derive_seed(cfg.seed, "sample/" + std::to_string(i));
    Rng rng(sample_seed);
    SynthRecord rec = make_positive(panos[pano_index], cfg.feature_factor, rng, sample_seed);

    const std::string rel = "queries/q_" + detail::zero_pad(i, 6) + ".png";
    save_image(rec.query, (fs::path(out_dir) / rel).string());

    const GpsPoint gps = detail::synth_gps(pano_index);
    ManifestRecord mrec;
    mrec.query_path = rel;
    mrec.ref_path = pano_paths[pano_index];
    mrec.lat = gps.lat;
    mrec.lon = gps.lon;
    mrec.label = 1;
    mrec.split = i < n_train ? "train" : "test";
    ds.manifest.records.push_back(mrec);

    SynthSampleMeta meta;
    meta.query_path = rel;
    meta.ref_path = pano_paths[pano_index];
    meta.pano_index = pano_index;
    meta.pano_seed = panos[pano_index].seed;
    meta.sample_seed = sample_seed;
    meta.box = rec.source_box;
    meta.params = rec.params;
    meta.split = mrec.split;
    ds.meta.rows.push_back(std::move(meta));
  }

  save_manifest(ds.manifest, (fs::path(out_dir) / "manifest.jsonl").string());
  save_synth_meta(ds.meta, (fs::path(out_dir) / "synth.jsonl").string());
  return ds;
}

}  // namespace bupm
