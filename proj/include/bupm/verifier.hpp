#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bupm/backbone.hpp"
#include "bupm/rng.hpp"
#include "bupm/tensor.hpp"

namespace bupm {

namespace detail {

inline Tensor stack_pair(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.numel() != 1 || b.numel() != 1) {
    throw std::invalid_argument("stack_pair: inputs must be single-element tensors");
  }
  Tensor out = Tensor::from_data({2}, {a.data()[0], b.data()[0]});
  if (!Tape::any_requires_grad({&a, &b})) return out;
  return tape.record("stack_pair", {a, b}, out, [a, b, out]() {
    const double* g = out.grad();
    if (double* ga = a.grad()) ga[0] += g[0];
    if (double* gb = b.grad()) gb[0] += g[1];
  });
}

inline Tensor init_dense_weights(Rng& rng, int n, int m) {
  const double limit = std::sqrt(6.0 / n);
  std::vector<double> w(static_cast<std::size_t>(n) * m);
  for (double& v : w) v = rng.uniform(-limit, limit);
  return Tensor::from_data({n, m}, std::move(w));
}

}  // namespace detail

// Soft patch counts: the fraction of each mask that is "on".
inline Tensor build_feature(Tape& tape, const Tensor& m_r, const Tensor& m_q) {
  Tensor mean_r = reduce(tape, m_r, {0, 1, 2}, Reduce::kMean);
  Tensor mean_q = reduce(tape, m_q, {0, 1, 2}, Reduce::kMean);
  return detail::stack_pair(tape, mean_r, mean_q);
}

// 2 -> 16 -> 4 -> 1 perceptron with relu hidden activations and a sigmoid
// output score.
class Verifier {
 public:
  static Verifier init(Rng& rng) {
    Verifier v;
    v.w1_ = detail::init_dense_weights(rng, 2, 16);
    v.b1_ = Tensor::zeros({16});
    v.w2_ = detail::init_dense_weights(rng, 16, 4);
    v.b2_ = Tensor::zeros({4});
    v.w3_ = detail::init_dense_weights(rng, 4, 1);
    v.b3_ = Tensor::zeros({1});
    return v;
  }

  // feature {2} -> score {1} in (0,1)
  Tensor decide(Tape& tape, const Tensor& feature) const {
    if (feature.rank() != 1 || feature.extent(0) != 2) {
      throw std::invalid_argument("verifier: expected a 2-element feature");
    }
    Tensor h1 = relu(tape, dense(tape, feature, w1_, b1_));
    Tensor h2 = relu(tape, dense(tape, h1, w2_, b2_));
    return sigmoid(tape, dense(tape, h2, w3_, b3_));
  }

  void collect_params(std::vector<std::pair<std::string, Tensor>>& out,
                      const std::string& prefix) const {
    out.emplace_back(prefix + "/dense0/weights", w1_);
    out.emplace_back(prefix + "/dense0/bias", b1_);
    out.emplace_back(prefix + "/dense1/weights", w2_);
    out.emplace_back(prefix + "/dense1/bias", b2_);
    out.emplace_back(prefix + "/dense2/weights", w3_);
    out.emplace_back(prefix + "/dense2/bias", b3_);
  }

 private:
  Tensor w1_, b1_, w2_, b2_, w3_, b3_;
};

}  // namespace bupm
