#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bupm/backbone.hpp"
#include "bupm/image.hpp"
#include "bupm/matcher.hpp"
#include "bupm/rng.hpp"
#include "bupm/tensor.hpp"
#include "bupm/verifier.hpp"

namespace bupm {

struct ModelConfig {
  BackboneConfig backbone;

  std::string canonical() const {
    std::string s = "bb:" + std::to_string(backbone.num_stages) + ":";
    for (std::size_t i = 0; i < backbone.channels.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(backbone.channels[i]);
    }
    s += "|det:1,3,5x4->1|mlp:2,16,4,1";
    return s;
  }

  std::uint64_t digest() const { return detail::fnv1a64(canonical()); }
};

// The full verification network: shared trunk for both images, mask detector,
// and the decision perceptron.
struct Model {
  ModelConfig config;
  Backbone backbone;
  MaskDetector detector;
  Verifier verifier;

  static Model init(const ModelConfig& config, std::uint64_t seed) {
    config.backbone.validate();
    Model m;
    m.config = config;
    Rng bb_rng = derive_rng(seed, "init/backbone");
    Rng det_rng = derive_rng(seed, "init/detector");
    Rng ver_rng = derive_rng(seed, "init/verifier");
    m.backbone = Backbone::init(config.backbone, bb_rng);
    m.detector = MaskDetector::init(det_rng);
    m.verifier = Verifier::init(ver_rng);
    return m;
  }

  std::vector<std::pair<std::string, Tensor>> named_params() const {
    std::vector<std::pair<std::string, Tensor>> out;
    backbone.collect_params(out, "backbone");
    detector.collect_params(out, "detector");
    verifier.collect_params(out, "verifier");
    return out;
  }

  std::vector<Tensor> trunk_params() const {  // everything but the perceptron
    std::vector<std::pair<std::string, Tensor>> named;
    backbone.collect_params(named, "backbone");
    detector.collect_params(named, "detector");
    std::vector<Tensor> out;
    for (auto& [name, t] : named) out.push_back(t);
    return out;
  }

  std::vector<Tensor> verifier_params() const {
    std::vector<std::pair<std::string, Tensor>> named;
    verifier.collect_params(named, "verifier");
    std::vector<Tensor> out;
    for (auto& [name, t] : named) out.push_back(t);
    return out;
  }

  std::vector<Tensor> all_params() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_params()) out.push_back(t);
    return out;
  }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : named_params()) n += t.numel();
    return n;
  }

  // Freezing removes the grad buffer, so frozen weights cost nothing in
  // backward and provably cannot move.
  void set_trainable(bool trunk, bool head) const {
    for (Tensor t : trunk_params()) t.set_requires_grad(trunk);
    for (Tensor t : verifier_params()) t.set_requires_grad(head);
  }
};

struct VerifyResult {
  double score = 0.0;
  bool label = false;
  Tensor m_r;
  Tensor m_q;
};

// Full pipeline on feature maps (used by training with cached features).
inline Tensor score_from_features(Tape& tape, const Model& model, const Tensor& f_r,
                                  const Tensor& f_q, MatchResult* capture = nullptr) {
  MatchResult match = match_features(tape, f_r, f_q, model.detector);
  if (capture) *capture = match;
  Tensor v = build_feature(tape, match.m_r, match.m_q);
  return model.verifier.decide(tape, v);
}

inline Tensor score_images(Tape& tape, const Model& model, const Tensor& ref_image,
                           const Tensor& query_image, MatchResult* capture = nullptr) {
  Tensor f_r = model.backbone.extract_features(tape, ref_image);
  Tensor f_q = model.backbone.extract_features(tape, query_image);
  return score_from_features(tape, model, f_r, f_q, capture);
}

inline VerifyResult verify(const Model& model, const Tensor& query_image,
                           const Tensor& ref_image, double threshold = 0.5) {
  Tape tape;
  MatchResult match;
  Tensor score = score_images(tape, model, ref_image, query_image, &match);
  VerifyResult r;
  r.score = score.value();
  r.label = r.score >= threshold;
  r.m_r = match.m_r;
  r.m_q = match.m_q;
  return r;
}

// ---- checkpoint container ----
// Layout: magic "BUPMCKPT", u32 version, u64 config digest, u32 block count,
// then blocks sorted by name: u32 name length, name bytes, u32 rank,
// u64 extents, payload doubles (little-endian). Weight blocks use parameter
// names; "meta/..." and "opt/..." blocks carry bookkeeping and optimizer
// state through the same encoding.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;
  std::uint64_t digest = 0;
  std::map<std::string, std::pair<std::vector<int>, std::vector<double>>> blocks;

  void put(const std::string& name, std::vector<int> shape, std::vector<double> data) {
    blocks[name] = {std::move(shape), std::move(data)};
  }

  void put_scalar(const std::string& name, double v) { put(name, {}, {v}); }

  bool has(const std::string& name) const { return blocks.count(name) != 0; }

  double scalar(const std::string& name) const {
    const auto& [shape, data] = at(name);
    if (data.size() != 1) throw std::invalid_argument("checkpoint: " + name + " is not a scalar");
    return data[0];
  }

  const std::pair<std::vector<int>, std::vector<double>>& at(const std::string& name) const {
    auto it = blocks.find(name);
    if (it == blocks.end()) {
      throw std::invalid_argument("checkpoint: missing block " + name);
    }
    return it->second;
  }
};

namespace detail {

template <typename T>
void write_raw(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& in, const std::string& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw DecodeError(path, "truncated checkpoint");
  return v;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DecodeError(path, "cannot open for writing");
  out.write("BUPMCKPT", 8);
  detail::write_raw<std::uint32_t>(out, Checkpoint::kVersion);
  detail::write_raw<std::uint64_t>(out, ckpt.digest);
  detail::write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.blocks.size()));
  for (const auto& [name, block] : ckpt.blocks) {
    const auto& [shape, data] = block;
    detail::write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    std::size_t numel = 1;
    for (int e : shape) {
      detail::write_raw<std::uint64_t>(out, static_cast<std::uint64_t>(e));
      numel *= static_cast<std::size_t>(e);
    }
    if (numel != data.size()) {
      throw std::invalid_argument("checkpoint: block " + name + " shape/data mismatch");
    }
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size() * sizeof(double)));
  }
  if (!out) throw DecodeError(path, "write failed");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DecodeError(path, "cannot open for reading");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "BUPMCKPT", 8) != 0) throw DecodeError(path, "not a checkpoint");
  const auto version = detail::read_raw<std::uint32_t>(in, path);
  if (version != Checkpoint::kVersion) {
    throw DecodeError(path, "unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.digest = detail::read_raw<std::uint64_t>(in, path);
  const auto count = detail::read_raw<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_raw<std::uint32_t>(in, path);
    if (name_len > 4096) throw DecodeError(path, "implausible block name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw DecodeError(path, "truncated checkpoint");
    const auto rank = detail::read_raw<std::uint32_t>(in, path);
    if (rank > 8) throw DecodeError(path, "implausible block rank");
    std::vector<int> shape;
    std::size_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto e = detail::read_raw<std::uint64_t>(in, path);
      if (e == 0 || e > (1u << 28)) throw DecodeError(path, "implausible extent");
      shape.push_back(static_cast<int>(e));
      numel *= static_cast<std::size_t>(e);
    }
    std::vector<double> data(numel);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(numel * sizeof(double)));
    if (!in) throw DecodeError(path, "truncated checkpoint");
    ckpt.blocks[name] = {std::move(shape), std::move(data)};
  }
  return ckpt;
}

// Captures the model's weights (bookkeeping blocks are the caller's to add).
inline Checkpoint checkpoint_from_model(const Model& model) {
  Checkpoint ckpt;
  ckpt.digest = model.config.digest();
  for (const auto& [name, t] : model.named_params()) {
    ckpt.put(name, t.shape(), std::vector<double>(t.data(), t.data() + t.numel()));
  }
  return ckpt;
}

// Rebuilds the architecture description from the weight shapes, so loading a
// checkpoint needs no side-channel configuration.
inline ModelConfig config_from_checkpoint(const Checkpoint& ckpt) {
  ModelConfig cfg;
  cfg.backbone.num_stages = 0;
  cfg.backbone.channels.clear();
  for (int s = 0;; ++s) {
    const auto it = ckpt.blocks.find("backbone/stage" + std::to_string(s) + "/conv1/kernel");
    if (it == ckpt.blocks.end()) break;
    const std::vector<int>& shape = it->second.first;
    if (shape.size() != 4) {
      throw std::invalid_argument("checkpoint: malformed backbone kernel block");
    }
    cfg.backbone.channels.push_back(shape[3]);
    cfg.backbone.num_stages = s + 1;
  }
  if (cfg.backbone.num_stages == 0) {
    throw std::invalid_argument("checkpoint: no backbone weights found");
  }
  return cfg;
}

// Writes checkpoint weights into an already-constructed model of the same
// architecture.
inline void apply_checkpoint(const Checkpoint& ckpt, Model& model) {
  if (ckpt.digest != model.config.digest()) {
    throw std::invalid_argument("checkpoint: config digest mismatch (file " +
                                std::to_string(ckpt.digest) + ", model " +
                                std::to_string(model.config.digest()) + ")");
  }
  for (auto& [name, t] : model.named_params()) {
    const auto& [shape, data] = ckpt.at(name);
    if (shape != t.shape()) {
      throw std::invalid_argument("checkpoint: block " + name + " has the wrong shape");
    }
    std::copy(data.begin(), data.end(), t.data());
  }
}

inline Model model_from_checkpoint(const Checkpoint& ckpt) {
  Model model = Model::init(config_from_checkpoint(ckpt), /*seed=*/0);
  apply_checkpoint(ckpt, model);
  return model;
}

}  // namespace bupm
