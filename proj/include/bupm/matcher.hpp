#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bupm/backbone.hpp"
#include "bupm/image.hpp"
#include "bupm/rng.hpp"
#include "bupm/tensor.hpp"

namespace bupm {

// S[x,y,i,j] = <nr[x,y], nq[i,j]> for unit-normalized feature maps.
// Kept internal: pairwise_cosine below is the public entry point.
namespace detail {

inline Tensor pairwise_dot(Tape& tape, const Tensor& nr, const Tensor& nq) {
  const int hr = nr.extent(0), wr = nr.extent(1), c = nr.extent(2);
  const int hq = nq.extent(0), wq = nq.extent(1);
  const std::int64_t p_count = static_cast<std::int64_t>(hr) * wr;
  const std::int64_t q_count = static_cast<std::int64_t>(hq) * wq;

  Tensor out = Tensor::zeros({hr, wr, hq, wq});
  {
    // transpose nq to (C, Q) once so the inner accumulation is contiguous
    std::vector<double> nqt(static_cast<std::size_t>(c) * q_count);
    const double* q = nq.data();
    for (std::int64_t qi = 0; qi < q_count; ++qi) {
      for (int ci = 0; ci < c; ++ci) nqt[static_cast<std::size_t>(ci) * q_count + qi] = q[qi * c + ci];
    }
    const double* r = nr.data();
    double* o = out.data();
    for (std::int64_t pi = 0; pi < p_count; ++pi) {
      double* row = o + pi * q_count;
      const double* rrow = r + pi * c;
      for (int ci = 0; ci < c; ++ci) {
        const double a = rrow[ci];
        const double* qrow = nqt.data() + static_cast<std::size_t>(ci) * q_count;
        for (std::int64_t qi = 0; qi < q_count; ++qi) row[qi] += a * qrow[qi];
      }
    }
  }
  if (!Tape::any_requires_grad({&nr, &nq})) return out;
  return tape.record("pairwise_dot", {nr, nq}, out, [nr, nq, out, p_count, q_count, c]() {
    const double* g = out.grad();
    const double* r = nr.data();
    const double* q = nq.data();
    double* gr = nr.grad();
    double* gq = nq.grad();
    for (std::int64_t pi = 0; pi < p_count; ++pi) {
      const double* grow = g + pi * q_count;
      const double* rrow = r + pi * c;
      double* grrow = gr ? gr + pi * c : nullptr;
      for (std::int64_t qi = 0; qi < q_count; ++qi) {
        const double a = grow[qi];
        if (a == 0.0) continue;
        if (grrow) {
          const double* qrow = q + qi * c;
          for (int ci = 0; ci < c; ++ci) grrow[ci] += a * qrow[ci];
        }
        if (gq) {
          double* gqrow = gq + qi * c;
          for (int ci = 0; ci < c; ++ci) gqrow[ci] += a * rrow[ci];
        }
      }
    }
  });
}

}  // namespace detail

// Cosine similarity between every reference patch and every query patch.
inline Tensor pairwise_cosine(Tape& tape, const Tensor& f_r, const Tensor& f_q,
                              double epsilon = 1e-12) {
  if (f_r.rank() != 3 || f_q.rank() != 3) {
    throw std::invalid_argument("pairwise_cosine: feature maps must be HxWxC");
  }
  if (f_r.extent(2) != f_q.extent(2)) {
    throw std::invalid_argument("pairwise_cosine: feature depth mismatch (" +
                                std::to_string(f_r.extent(2)) + " vs " +
                                std::to_string(f_q.extent(2)) + ")");
  }
  Tensor nr = l2_normalize(tape, f_r, epsilon);
  Tensor nq = l2_normalize(tape, f_q, epsilon);
  return detail::pairwise_dot(tape, nr, nq);
}

struct BestScores {
  Tensor b_r;  // Hr x Wr x 1
  Tensor b_q;  // Hq x Wq x 1
};

// Per-patch best score against the entire opposite image.
inline BestScores global_max_pool(Tape& tape, const Tensor& s) {
  if (s.rank() != 4) throw std::invalid_argument("global_max_pool: expected a rank-4 tensor");
  Tensor b_r = reduce(tape, s, {2, 3}, Reduce::kMax);
  Tensor b_q = reduce(tape, s, {0, 1}, Reduce::kMax);
  b_r = reshape(tape, b_r, {s.extent(0), s.extent(1), 1});
  b_q = reshape(tape, b_q, {s.extent(2), s.extent(3), 1});
  return {b_r, b_q};
}

namespace detail {

// channel concatenation of same-spatial-size maps
inline Tensor concat_channels(Tape& tape, const std::vector<Tensor>& parts) {
  const int h = parts[0].extent(0), w = parts[0].extent(1);
  int total_c = 0;
  for (const Tensor& t : parts) {
    if (t.extent(0) != h || t.extent(1) != w) {
      throw std::invalid_argument("concat: spatial extents differ");
    }
    total_c += t.extent(2);
  }
  Tensor out = Tensor::zeros({h, w, total_c});
  {
    double* o = out.data();
    const std::int64_t pixels = static_cast<std::int64_t>(h) * w;
    int offset = 0;
    for (const Tensor& t : parts) {
      const int c = t.extent(2);
      const double* src = t.data();
      for (std::int64_t p = 0; p < pixels; ++p) {
        for (int ci = 0; ci < c; ++ci) o[p * total_c + offset + ci] = src[p * c + ci];
      }
      offset += c;
    }
  }
  bool any = false;
  for (const Tensor& t : parts) any = any || t.requires_grad();
  if (!any) return out;
  return tape.record("concat_channels", parts, out, [parts, out, h, w, total_c]() {
    const double* g = out.grad();
    const std::int64_t pixels = static_cast<std::int64_t>(h) * w;
    int offset = 0;
    for (const Tensor& t : parts) {
      const int c = t.extent(2);
      if (double* gt = t.grad()) {
        for (std::int64_t p = 0; p < pixels; ++p) {
          for (int ci = 0; ci < c; ++ci) gt[p * c + ci] += g[p * total_c + offset + ci];
        }
      }
      offset += c;
    }
  });
}

}  // namespace detail

// Three parallel convolution branches (1x1, 3x3, 5x5; 4 filters each) over a
// best-score map, fused by a 1x1 convolution into a sigmoid mask of the same
// spatial size. The reference side pads circularly in x.
class MaskDetector {
 public:
  static MaskDetector init(Rng& rng) {
    MaskDetector md;
    md.branch1_ = detail::init_conv(rng, 1, 1, 1, 4);
    md.branch3_ = detail::init_conv(rng, 3, 3, 1, 4);
    md.branch5_ = detail::init_conv(rng, 5, 5, 1, 4);
    md.fusion_ = detail::init_conv(rng, 1, 1, 12, 1);
    return md;
  }

  Tensor detect(Tape& tape, const Tensor& best, bool pano_wrap) const {
    if (best.rank() != 3 || best.extent(2) != 1) {
      throw std::invalid_argument("mask detector: expected an HxWx1 score map");
    }
    const Padding pad = pano_wrap ? Padding::kSameCircularHorizontal : Padding::kSameZero;
    Tensor a = conv2d(tape, best, branch1_.kernel, branch1_.bias, pad, 1);
    Tensor b = conv2d(tape, best, branch3_.kernel, branch3_.bias, pad, 1);
    Tensor c = conv2d(tape, best, branch5_.kernel, branch5_.bias, pad, 1);
    Tensor fused = conv2d(tape, detail::concat_channels(tape, {a, b, c}), fusion_.kernel,
                          fusion_.bias, pad, 1);
    return sigmoid(tape, fused);
  }

  void collect_params(std::vector<std::pair<std::string, Tensor>>& out,
                      const std::string& prefix) const {
    const std::pair<const char*, const ConvLayer*> parts[] = {{"branch1", &branch1_},
                                                              {"branch3", &branch3_},
                                                              {"branch5", &branch5_},
                                                              {"fusion", &fusion_}};
    for (const auto& [name, layer] : parts) {
      out.emplace_back(prefix + "/" + name + "/kernel", layer->kernel);
      out.emplace_back(prefix + "/" + name + "/bias", layer->bias);
    }
  }

 private:
  ConvLayer branch1_, branch3_, branch5_, fusion_;
};

struct MatchResult {
  Tensor s;    // Hr x Wr x Hq x Wq
  Tensor b_r;  // Hr x Wr x 1
  Tensor b_q;  // Hq x Wq x 1
  Tensor m_r;  // Hr x Wr x 1
  Tensor m_q;  // Hq x Wq x 1
};

inline MatchResult match_features(Tape& tape, const Tensor& f_r, const Tensor& f_q,
                                  const MaskDetector& detector) {
  MatchResult r;
  r.s = pairwise_cosine(tape, f_r, f_q);
  BestScores best = global_max_pool(tape, r.s);
  r.b_r = best.b_r;
  r.b_q = best.b_q;
  r.m_r = detector.detect(tape, r.b_r, /*pano_wrap=*/true);
  r.m_q = detector.detect(tape, r.b_q, /*pano_wrap=*/false);
  return r;
}

// Mask (HxWx1, values in (0,1)) rendered as an 8-bit grayscale image.
inline Image mask_to_image(const Tensor& mask) {
  if (mask.rank() != 3 || mask.extent(2) != 1) {
    throw std::invalid_argument("mask_to_image: expected an HxWx1 mask");
  }
  Image img = Image::create(mask.extent(0), mask.extent(1), 1);
  for (std::int64_t i = 0; i < mask.numel(); ++i) img.values[static_cast<std::size_t>(i)] = mask.data()[i];
  return img;
}

}  // namespace bupm
