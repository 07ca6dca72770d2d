#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "bupm/backbone.hpp"
#include "bupm/matcher.hpp"
#include "bupm/model.hpp"
#include "bupm/rng.hpp"
#include "bupm/tensor.hpp"
#include "bupm/verifier.hpp"

namespace bupm {

struct GradCheckOptions {
  int seeds = 20;
  std::uint64_t first_seed = 1;
  double step = 1e-5;
  double tolerance = 1e-4;
  // adds a case whose analytic gradient is deliberately corrupted; it must
  // come out FAIL, proving the checker can actually catch a broken backward
  bool include_negative_control = false;
};

struct GradCheckResult {
  std::string op;
  double max_rel_err = 0.0;
  bool pass = false;

  std::string to_line() const {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-24s max_rel_err %.3e  %s", op.c_str(), max_rel_err,
                  pass ? "PASS" : "FAIL");
    return buf;
  }
};

namespace detail {

struct CheckCase {
  std::vector<Tensor> params;
  std::function<Tensor(Tape&)> forward;  // rebuilds the graph, returns a scalar
  double grad_corruption = 1.0;          // factor applied to one analytic entry
};

// Central finite differences vs the tape's reverse-mode gradients. Relative
// error carries a 1e-3 floor so near-zero gradients compare absolutely.
inline double fd_max_rel_err(CheckCase& check, double step) {
  for (Tensor& p : check.params) p.zero_grad();
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor loss = check.forward(tape);
    tape.backward(loss);
    for (Tensor& p : check.params) {
      analytic.emplace_back(p.grad(), p.grad() + p.numel());
    }
  }
  if (check.grad_corruption != 1.0 && !analytic.empty() && !analytic[0].empty()) {
    analytic[0][0] *= check.grad_corruption;
  }
  double max_rel = 0.0;
  for (std::size_t pi = 0; pi < check.params.size(); ++pi) {
    Tensor& p = check.params[pi];
    for (std::int64_t i = 0; i < p.numel(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + step;
      double up, down;
      {
        Tape tape;
        up = check.forward(tape).value();
      }
      p.data()[i] = saved - step;
      {
        Tape tape;
        down = check.forward(tape).value();
      }
      p.data()[i] = saved;
      const double fd = (up - down) / (2.0 * step);
      const double a = analytic[pi][static_cast<std::size_t>(i)];
      const double rel = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1e-3});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

inline Tensor random_leaf(Rng& rng, std::vector<int> shape, double lo, double hi) {
  std::int64_t n = 1;
  for (int e : shape) n *= e;
  std::vector<double> data(static_cast<std::size_t>(n));
  for (double& v : data) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(data), /*requires_grad=*/true);
}

// projects any tensor to a scalar through fixed random weights, so gradients
// reach every output element with distinct sensitivities
struct Projector {
  Tensor weights;
  Tensor bias = Tensor::zeros({1});

  static Projector make(Rng& rng, std::int64_t n) {
    Projector p;
    std::vector<double> w(static_cast<std::size_t>(n));
    for (double& v : w) v = rng.uniform(-1.0, 1.0);
    p.weights = Tensor::from_data({static_cast<int>(n), 1}, std::move(w));
    return p;
  }

  Tensor apply(Tape& tape, const Tensor& y) const {
    Tensor flat = reshape(tape, y, {static_cast<int>(y.numel())});
    return dense(tape, flat, weights, bias);
  }
};

using CaseBuilder = std::function<CheckCase(Rng&)>;

inline std::vector<std::pair<std::string, CaseBuilder>> gradcheck_cases() {
  std::vector<std::pair<std::string, CaseBuilder>> cases;

  const auto conv_case = [](Padding pad, int stride) {
    return [pad, stride](Rng& rng) {
      CheckCase c;
      Tensor input = random_leaf(rng, {5, 6, 2}, -1.0, 1.0);
      Tensor kernel = random_leaf(rng, {3, 3, 2, 3}, -0.7, 0.7);
      Tensor bias = random_leaf(rng, {3}, -0.3, 0.3);
      const int out_h = (5 + stride - 1) / stride, out_w = (6 + stride - 1) / stride;
      Projector proj = Projector::make(rng, static_cast<std::int64_t>(out_h) * out_w * 3);
      c.params = {input, kernel, bias};
      c.forward = [=](Tape& tape) {
        return proj.apply(tape, conv2d(tape, input, kernel, bias, pad, stride));
      };
      return c;
    };
  };
  cases.emplace_back("conv2d/zero/s1", conv_case(Padding::kSameZero, 1));
  cases.emplace_back("conv2d/zero/s2", conv_case(Padding::kSameZero, 2));
  cases.emplace_back("conv2d/circular/s1", conv_case(Padding::kSameCircularHorizontal, 1));

  cases.emplace_back("dense", [](Rng& rng) {
    CheckCase c;
    Tensor input = random_leaf(rng, {5}, -1.0, 1.0);
    Tensor weights = random_leaf(rng, {5, 4}, -0.8, 0.8);
    Tensor bias = random_leaf(rng, {4}, -0.3, 0.3);
    Projector proj = Projector::make(rng, 4);
    c.params = {input, weights, bias};
    c.forward = [=](Tape& tape) { return proj.apply(tape, dense(tape, input, weights, bias)); };
    return c;
  });

  cases.emplace_back("relu", [](Rng& rng) {
    CheckCase c;
    // keep every element away from the kink at 0
    Tensor input = random_leaf(rng, {4, 5, 2}, 0.1, 1.0);
    for (std::int64_t i = 0; i < input.numel(); ++i) {
      if (rng.coin(0.5)) input.data()[i] = -input.data()[i];
    }
    Projector proj = Projector::make(rng, input.numel());
    c.params = {input};
    c.forward = [=](Tape& tape) { return proj.apply(tape, relu(tape, input)); };
    return c;
  });

  cases.emplace_back("sigmoid", [](Rng& rng) {
    CheckCase c;
    Tensor input = random_leaf(rng, {3, 4, 1}, -2.0, 2.0);
    Projector proj = Projector::make(rng, input.numel());
    c.params = {input};
    c.forward = [=](Tape& tape) { return proj.apply(tape, sigmoid(tape, input)); };
    return c;
  });

  cases.emplace_back("reduce/mean", [](Rng& rng) {
    CheckCase c;
    Tensor input = random_leaf(rng, {3, 4, 2}, -1.0, 1.0);
    Projector proj = Projector::make(rng, 2);
    c.params = {input};
    c.forward = [=](Tape& tape) {
      return proj.apply(tape, reduce(tape, input, {0, 1}, Reduce::kMean));
    };
    return c;
  });

  cases.emplace_back("reduce/max", [](Rng& rng) {
    CheckCase c;
    Tensor input = random_leaf(rng, {3, 4, 2}, -1.0, 1.0);
    Projector proj = Projector::make(rng, 2);
    c.params = {input};
    c.forward = [=](Tape& tape) {
      return proj.apply(tape, reduce(tape, input, {0, 1}, Reduce::kMax));
    };
    return c;
  });

  cases.emplace_back("l2_normalize", [](Rng& rng) {
    CheckCase c;
    Tensor input = random_leaf(rng, {3, 3, 4}, 0.2, 1.2);
    Projector proj = Projector::make(rng, input.numel());
    c.params = {input};
    c.forward = [=](Tape& tape) { return proj.apply(tape, l2_normalize(tape, input)); };
    return c;
  });

  cases.emplace_back("reshape", [](Rng& rng) {
    CheckCase c;
    Tensor input = random_leaf(rng, {2, 3, 4}, -1.0, 1.0);
    Projector proj = Projector::make(rng, input.numel());
    c.params = {input};
    c.forward = [=](Tape& tape) { return proj.apply(tape, reshape(tape, input, {4, 6})); };
    return c;
  });

  cases.emplace_back("pairwise_cosine", [](Rng& rng) {
    CheckCase c;
    Tensor f_r = random_leaf(rng, {3, 4, 5}, -1.0, 1.0);
    Tensor f_q = random_leaf(rng, {2, 3, 5}, -1.0, 1.0);
    Projector proj = Projector::make(rng, 3 * 4 * 2 * 3);
    c.params = {f_r, f_q};
    c.forward = [=](Tape& tape) { return proj.apply(tape, pairwise_cosine(tape, f_r, f_q)); };
    return c;
  });

  cases.emplace_back("global_max_pool", [](Rng& rng) {
    CheckCase c;
    Tensor f_r = random_leaf(rng, {3, 4, 5}, -1.0, 1.0);
    Tensor f_q = random_leaf(rng, {2, 3, 5}, -1.0, 1.0);
    Projector proj_r = Projector::make(rng, 3 * 4);
    Projector proj_q = Projector::make(rng, 2 * 3);
    Projector mix = Projector::make(rng, 2);
    c.params = {f_r, f_q};
    c.forward = [=](Tape& tape) {
      BestScores best = global_max_pool(tape, pairwise_cosine(tape, f_r, f_q));
      Tensor pooled = detail::stack_pair(tape, proj_r.apply(tape, best.b_r),
                                         proj_q.apply(tape, best.b_q));
      return mix.apply(tape, pooled);
    };
    return c;
  });

  cases.emplace_back("concat_channels", [](Rng& rng) {
    CheckCase c;
    Tensor a = random_leaf(rng, {3, 4, 2}, -1.0, 1.0);
    Tensor b = random_leaf(rng, {3, 4, 1}, -1.0, 1.0);
    Tensor d = random_leaf(rng, {3, 4, 3}, -1.0, 1.0);
    Projector proj = Projector::make(rng, 3 * 4 * 6);
    c.params = {a, b, d};
    c.forward = [=](Tape& tape) {
      return proj.apply(tape, detail::concat_channels(tape, {a, b, d}));
    };
    return c;
  });

  cases.emplace_back("mask_detector", [](Rng& rng) {
    CheckCase c;
    Tensor best = random_leaf(rng, {4, 6, 1}, -1.0, 1.0);
    MaskDetector detector = MaskDetector::init(rng);
    Projector proj = Projector::make(rng, 4 * 6);
    c.params = {best};
    std::vector<std::pair<std::string, Tensor>> named;
    detector.collect_params(named, "detector");
    for (auto& [name, t] : named) {
      t.set_requires_grad(true);
      c.params.push_back(t);
    }
    c.forward = [=](Tape& tape) {
      return proj.apply(tape, detector.detect(tape, best, /*pano_wrap=*/true));
    };
    return c;
  });

  cases.emplace_back("verifier_mlp", [](Rng& rng) {
    CheckCase c;
    Tensor feature = random_leaf(rng, {2}, 0.05, 0.95);
    Verifier verifier = Verifier::init(rng);
    c.params = {feature};
    std::vector<std::pair<std::string, Tensor>> named;
    verifier.collect_params(named, "verifier");
    for (auto& [name, t] : named) {
      t.set_requires_grad(true);
      c.params.push_back(t);
    }
    c.forward = [=](Tape& tape) { return verifier.decide(tape, feature); };
    return c;
  });

  cases.emplace_back("end_to_end_score", [](Rng& rng) {
    CheckCase c;
    ModelConfig cfg;
    cfg.backbone.num_stages = 1;
    cfg.backbone.channels = {4};
    Model model = Model::init(cfg, rng.next_u64());
    model.set_trainable(true, true);
    Tensor ref = random_leaf(rng, {6, 8, 3}, 0.0, 1.0);
    Tensor query = random_leaf(rng, {4, 4, 3}, 0.0, 1.0);
    c.params = {ref, query};
    for (Tensor& t : model.all_params()) c.params.push_back(t);
    c.forward = [=](Tape& tape) { return score_images(tape, model, ref, query); };
    return c;
  });

  return cases;
}

}  // namespace detail

// Runs every differentiable op (and the whole score pipeline) against central
// finite differences across `opt.seeds` independent draws.
inline std::vector<GradCheckResult> run_gradient_checks(const GradCheckOptions& opt = {}) {
  std::vector<GradCheckResult> results;
  for (auto& [name, builder] : detail::gradcheck_cases()) {
    GradCheckResult r;
    r.op = name;
    for (int s = 0; s < opt.seeds; ++s) {
      Rng rng(opt.first_seed + static_cast<std::uint64_t>(s));
      detail::CheckCase check = builder(rng);
      r.max_rel_err = std::max(r.max_rel_err, detail::fd_max_rel_err(check, opt.step));
    }
    r.pass = r.max_rel_err <= opt.tolerance;
    results.push_back(std::move(r));
  }
  if (opt.include_negative_control) {
    GradCheckResult r;
    r.op = "negative_control";
    for (int s = 0; s < opt.seeds; ++s) {
      Rng rng(opt.first_seed + static_cast<std::uint64_t>(s));
      detail::CheckCase check;
      Tensor input = detail::random_leaf(rng, {5}, -1.0, 1.0);
      Tensor weights = detail::random_leaf(rng, {5, 4}, -0.8, 0.8);
      Tensor bias = detail::random_leaf(rng, {4}, -0.3, 0.3);
      detail::Projector proj = detail::Projector::make(rng, 4);
      check.params = {input, weights, bias};
      check.forward = [=](Tape& tape) {
        return proj.apply(tape, dense(tape, input, weights, bias));
      };
      check.grad_corruption = 2.0;  // wrong backward on one entry
      r.max_rel_err = std::max(r.max_rel_err, detail::fd_max_rel_err(check, opt.step));
    }
    r.pass = r.max_rel_err <= opt.tolerance;
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace bupm
