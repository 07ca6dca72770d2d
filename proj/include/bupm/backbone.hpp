#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bupm/rng.hpp"
#include "bupm/tensor.hpp"

namespace bupm {

struct BackboneConfig {
  int num_stages = 3;
  std::vector<int> channels = {16, 32, 32};

  int downsample_factor() const { return 1 << num_stages; }
  int feature_depth() const { return channels.back(); }

  void validate() const {
    if (num_stages < 1 || static_cast<int>(channels.size()) != num_stages) {
      throw std::invalid_argument("backbone: channels must list one entry per stage");
    }
    for (int c : channels) {
      if (c < 1) throw std::invalid_argument("backbone: channel counts must be >= 1");
    }
  }
};

struct ConvLayer {
  Tensor kernel;
  Tensor bias;
};

namespace detail {

// fan-in-scaled uniform in [-sqrt(6/fan_in), +sqrt(6/fan_in)], zero bias
inline ConvLayer init_conv(Rng& rng, int kh, int kw, int cin, int cout) {
  const double limit = std::sqrt(6.0 / (kh * kw * cin));
  std::vector<double> k(static_cast<std::size_t>(kh) * kw * cin * cout);
  for (double& v : k) v = rng.uniform(-limit, limit);
  ConvLayer layer;
  layer.kernel = Tensor::from_data({kh, kw, cin, cout}, std::move(k));
  layer.bias = Tensor::zeros({cout});
  return layer;
}

}  // namespace detail

// Strided convolutional trunk. Each stage: 3x3 same conv + relu, then a 3x3
// stride-2 conv; the last stage's stride-2 output is the (signed) feature map.
class Backbone {
 public:
  static Backbone init(const BackboneConfig& config, Rng& rng) {
    config.validate();
    Backbone bb;
    bb.config_ = config;
    int cin = 3;
    for (int s = 0; s < config.num_stages; ++s) {
      const int c = config.channels[static_cast<std::size_t>(s)];
      bb.layers_.push_back(detail::init_conv(rng, 3, 3, cin, c));
      bb.layers_.push_back(detail::init_conv(rng, 3, 3, c, c));
      cin = c;
    }
    return bb;
  }

  const BackboneConfig& config() const { return config_; }

  Tensor extract_features(Tape& tape, const Tensor& image) const {
    if (image.rank() != 3 || image.extent(2) != 3) {
      throw std::invalid_argument("backbone: expected an HxWx3 input");
    }
    const int d = config_.downsample_factor();
    if (image.extent(0) % d != 0 || image.extent(1) % d != 0) {
      throw std::invalid_argument("backbone: input extents must be multiples of " +
                                  std::to_string(d) + ", got " + std::to_string(image.extent(0)) +
                                  "x" + std::to_string(image.extent(1)));
    }
    Tensor x = image;
    for (int s = 0; s < config_.num_stages; ++s) {
      const ConvLayer& a = layers_[static_cast<std::size_t>(2 * s)];
      const ConvLayer& b = layers_[static_cast<std::size_t>(2 * s + 1)];
      x = relu(tape, conv2d(tape, x, a.kernel, a.bias, Padding::kSameZero, 1));
      x = conv2d(tape, x, b.kernel, b.bias, Padding::kSameZero, 2);
    }
    return x;
  }

  void collect_params(std::vector<std::pair<std::string, Tensor>>& out,
                      const std::string& prefix) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const std::string stem =
          prefix + "/stage" + std::to_string(i / 2) + "/conv" + std::to_string(i % 2);
      out.emplace_back(stem + "/kernel", layers_[i].kernel);
      out.emplace_back(stem + "/bias", layers_[i].bias);
    }
  }

 private:
  BackboneConfig config_;
  std::vector<ConvLayer> layers_;
};

}  // namespace bupm
