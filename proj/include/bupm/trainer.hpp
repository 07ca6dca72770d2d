#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bupm/image.hpp"
#include "bupm/localizer.hpp"
#include "bupm/manifest.hpp"
#include "bupm/model.hpp"
#include "bupm/rng.hpp"
#include "bupm/synth.hpp"
#include "bupm/tensor.hpp"

namespace bupm {

namespace detail {

constexpr double kBceClamp = 1e-7;

inline double bce_clamp(double p) {
  return std::min(std::max(p, kBceClamp), 1.0 - kBceClamp);
}

// Mean binary cross-entropy against constant targets, as a single tape node.
// Gradient passes through only where the prediction is inside the clamp.
inline Tensor bce_node(Tape& tape, const Tensor& pred, std::vector<double> targets) {
  if (static_cast<std::int64_t>(targets.size()) != pred.numel()) {
    throw std::invalid_argument("bce: prediction and target sizes differ");
  }
  const std::int64_t n = pred.numel();
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double p = bce_clamp(pred.data()[i]);
    const double t = targets[i];
    total += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  }
  Tensor out = Tensor::scalar(total / n);
  if (!Tape::any_requires_grad({&pred})) return out;
  return tape.record("bce", {pred}, out, [pred, out, targets = std::move(targets), n]() {
    const double up = out.grad()[0] / n;
    double* g = pred.grad();
    for (std::int64_t i = 0; i < n; ++i) {
      const double raw = pred.data()[i];
      if (raw < kBceClamp || raw > 1.0 - kBceClamp) continue;
      g[i] += up * (raw - targets[i]) / (raw * (1.0 - raw));
    }
  });
}

}  // namespace detail

// Mean BCE between a predicted reference mask (H x W x 1) and a binary grid.
inline Tensor loss_mask(Tape& tape, const Tensor& predicted, const CellGrid& target) {
  const std::vector<int> want{target.h, target.w, 1};
  if (predicted.shape() != want) {
    throw std::invalid_argument("loss_mask: prediction shape does not match the target grid");
  }
  std::vector<double> t(target.on.begin(), target.on.end());
  return detail::bce_node(tape, predicted, std::move(t));
}

// BCE on a single verification score.
inline Tensor loss_verify(Tape& tape, const Tensor& score, int label) {
  if (score.numel() != 1) {
    throw std::invalid_argument("loss_verify: score must hold a single value");
  }
  if (label != 0 && label != 1) {
    throw std::invalid_argument("loss_verify: label must be 0 or 1");
  }
  return detail::bce_node(tape, score, {static_cast<double>(label)});
}

struct PhaseConfig {
  double lr = 0.0;
  int batch = 1;
  int max_epochs = 0;
};

struct TrainConfig {
  PhaseConfig phase1{1e-2, 16, 3};
  PhaseConfig phase2a{1e-3, 64, 20};
  PhaseConfig phase2b{1e-5, 64, 1};
  std::vector<int> query_sizes{192, 224, 256};
  int val_query_size = 224;
  double val_frac = 0.1;
  double min_improvement = 1e-4;
  int patience = 5;
  std::uint64_t seed = 1;
};

struct EpochLog {
  std::string phase;
  int epoch = 0;  // 1-based within the phase
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;

  std::string to_line() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "{\"phase\":\"%s\",\"epoch\":%d,\"train_loss\":%.17g,"
                  "\"val_loss\":%.17g,\"lr\":%.17g}",
                  phase.c_str(), epoch, train_loss, val_loss, lr);
    return buf;
  }
};

using LogSink = std::function<void(const EpochLog&)>;

struct TrainSample {
  Image query;
  int pano_index = 0;
  CellGrid target;
};

struct TrainDataset {
  std::vector<Image> panos;
  std::vector<TrainSample> samples;      // train-split positives
  std::vector<std::size_t> train_idx;    // optimization subset
  std::vector<std::size_t> val_idx;      // held-back tail for convergence
  int feature_factor = 0;
};

// Loads the train-split positives of a synthetic dataset directory and holds
// back the trailing val_frac of them for validation.
inline TrainDataset load_train_dataset(const std::string& root, double val_frac = 0.1) {
  namespace fs = std::filesystem;
  const SynthMetaFile meta = load_synth_meta((fs::path(root) / "synth.jsonl").string());
  TrainDataset ds;
  ds.feature_factor = meta.feature_factor;

  std::map<std::string, int> pano_index;
  for (const SynthSampleMeta& row : meta.rows) {
    if (row.split != "train") continue;
    auto [it, inserted] = pano_index.try_emplace(row.ref_path, static_cast<int>(ds.panos.size()));
    if (inserted) ds.panos.push_back(load_image((fs::path(root) / row.ref_path).string()));
    TrainSample s;
    s.query = load_image((fs::path(root) / row.query_path).string());
    s.pano_index = it->second;
    s.target = box_to_target(row.box, meta.pano_h, meta.pano_w, meta.feature_factor);
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw std::runtime_error(root + ": dataset has no train samples");

  const std::size_t n = ds.samples.size();
  std::size_t n_val = 0;
  if (val_frac > 0.0 && n >= 2) {
    n_val = std::min<std::size_t>(n - 1, std::max<std::size_t>(1, std::lround(val_frac * n)));
  }
  for (std::size_t i = 0; i < n - n_val; ++i) ds.train_idx.push_back(i);
  for (std::size_t i = n - n_val; i < n; ++i) ds.val_idx.push_back(i);
  return ds;
}

namespace detail {

inline const char* phase_tag(int phase_id) {
  switch (phase_id) {
    case 1: return "1";
    case 2: return "2a";
    case 3: return "2b";
    default: return "done";
  }
}

inline void check_finite(double loss, int phase_id, int epoch) {
  if (!std::isfinite(loss)) {
    throw std::runtime_error(std::string("training diverged: non-finite loss in phase ") +
                             phase_tag(phase_id) + ", epoch " + std::to_string(epoch + 1));
  }
}

// Derangement of batch entries that also never pairs a query with its own
// scene (several samples can share a panorama). Entries are laid out grouped
// by scene and rotated by k with maxcount <= k <= n - maxcount: two positions
// of the same group sit closer than maxcount on the circle, so the rotation
// always lands in a different group. Such a k exists exactly when no scene
// holds a strict majority.
inline std::vector<std::size_t> cross_scene_derangement(const std::vector<std::size_t>& idx,
                                                        const std::vector<TrainSample>& samples,
                                                        Rng& rng) {
  const std::size_t n = idx.size();
  if (n < 2) throw std::invalid_argument("negative pairing needs at least 2 samples");
  std::map<int, std::vector<std::size_t>> groups;  // scene -> positions in idx
  for (std::size_t i = 0; i < n; ++i) groups[samples[idx[i]].pano_index].push_back(i);
  std::size_t maxcount = 0;
  for (const auto& [scene, members] : groups) maxcount = std::max(maxcount, members.size());
  if (2 * maxcount > n) {
    throw std::runtime_error("negative pairing failed: batch scenes are too uniform");
  }
  std::vector<std::pair<int, int>> order;  // (-count, scene): biggest group first
  for (const auto& [scene, members] : groups) {
    order.emplace_back(-static_cast<int>(members.size()), scene);
  }
  std::sort(order.begin(), order.end());
  std::vector<std::size_t> layout;
  layout.reserve(n);
  for (const auto& [neg_count, scene] : order) {
    std::vector<std::size_t>& members = groups[scene];
    rng.shuffle(members);
    layout.insert(layout.end(), members.begin(), members.end());
  }
  const std::size_t k =
      maxcount + static_cast<std::size_t>(rng.uniform_int(
                     static_cast<std::int64_t>(n - 2 * maxcount + 1)));
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[layout[i]] = layout[(i + k) % n];
  return perm;
}

inline Tensor query_tensor(const Image& query, int size) {
  return to_tensor(resize_bilinear(query, size, size));
}

// Kneads the shuffled order so no scene holds a strict majority inside any
// batch — the exact condition for a within-batch cross-scene derangement to
// exist. Swaps pull replacement samples from later positions.
inline void repair_batch_scenes(std::vector<std::size_t>& order, std::size_t half,
                                const std::vector<TrainSample>& samples) {
  for (std::size_t start = 0; start < order.size(); start += half) {
    const std::size_t n = std::min(half, order.size() - start);
    if (n < 2) break;
    while (true) {
      std::map<int, std::size_t> counts;
      for (std::size_t k = 0; k < n; ++k) ++counts[samples[order[start + k]].pano_index];
      int majority_scene = -1;
      std::size_t majority = 0;
      for (const auto& [scene, c] : counts) {
        if (c > majority) {
          majority = c;
          majority_scene = scene;
        }
      }
      if (majority * 2 <= n) break;
      bool swapped = false;
      for (std::size_t k = 0; k < n && !swapped; ++k) {
        if (samples[order[start + k]].pano_index != majority_scene) continue;
        for (std::size_t j = start + n; j < order.size(); ++j) {
          if (samples[order[j]].pano_index != majority_scene) {
            std::swap(order[start + k], order[j]);
            swapped = true;
            break;
          }
        }
        break;
      }
      if (!swapped) {
        throw std::runtime_error("negative pairing failed: batch scenes are too uniform");
      }
    }
  }
}

struct FeatureCache {
  std::vector<Tensor> pano_feats;                 // by pano index
  std::map<int, std::vector<Tensor>> query_feats; // size -> per-sample features
};

inline FeatureCache build_feature_cache(const Model& model, const TrainDataset& data,
                                        std::vector<int> sizes) {
  FeatureCache cache;
  {
    Tape tape;
    for (const Image& pano : data.panos) {
      cache.pano_feats.push_back(
          model.backbone.extract_features(tape, to_tensor(pano)).detached_copy());
    }
  }
  std::sort(sizes.begin(), sizes.end());
  sizes.erase(std::unique(sizes.begin(), sizes.end()), sizes.end());
  for (int s : sizes) {
    std::vector<Tensor>& feats = cache.query_feats[s];
    feats.reserve(data.samples.size());
    for (const TrainSample& smp : data.samples) {
      Tape tape;
      feats.push_back(
          model.backbone.extract_features(tape, query_tensor(smp.query, s)).detached_copy());
    }
  }
  return cache;
}

struct PhaseState {
  double best_val = std::numeric_limits<double>::infinity();
  int patience_used = 0;
  double last_val = std::numeric_limits<double>::quiet_NaN();
};

inline void save_progress(const Model& model, int phase_id, int next_epoch,
                          const PhaseState& state, const AdamOptimizer* adam,
                          const std::vector<std::pair<std::string, Tensor>>* adam_named,
                          const std::string& path) {
  Checkpoint ck = checkpoint_from_model(model);
  ck.put_scalar("meta/phase_id", phase_id);
  ck.put_scalar("meta/epoch", next_epoch);
  ck.put_scalar("meta/best_val", state.best_val);
  ck.put_scalar("meta/patience", state.patience_used);
  ck.put_scalar("meta/last_val", state.last_val);
  if (adam && adam_named) {
    ck.put_scalar("opt/step", static_cast<double>(adam->step_count()));
    AdamOptimizer* mut = const_cast<AdamOptimizer*>(adam);
    for (std::size_t i = 0; i < adam->slot_count(); ++i) {
      const std::string& name = (*adam_named)[i].first;
      const std::vector<int>& shape = (*adam_named)[i].second.shape();
      ck.put("opt/m/" + name, shape, mut->first_moment(i));
      ck.put("opt/v/" + name, shape, mut->second_moment(i));
    }
  }
  save_checkpoint(ck, path);
}

inline void restore_adam(AdamOptimizer& adam,
                         const std::vector<std::pair<std::string, Tensor>>& named,
                         const Checkpoint& ck) {
  if (!ck.has("opt/step")) return;
  adam.restore_step_count(static_cast<std::int64_t>(ck.scalar("opt/step")));
  for (std::size_t i = 0; i < adam.slot_count(); ++i) {
    const std::string m_name = "opt/m/" + named[i].first;
    const std::string v_name = "opt/v/" + named[i].first;
    if (!ck.has(m_name) || !ck.has(v_name)) continue;
    const auto& m = ck.at(m_name).second;
    const auto& v = ck.at(v_name).second;
    if (m.size() != adam.first_moment(i).size() || v.size() != adam.second_moment(i).size()) {
      throw std::invalid_argument("checkpoint: optimizer block " + m_name + " has the wrong size");
    }
    adam.first_moment(i) = m;
    adam.second_moment(i) = v;
  }
}

}  // namespace detail

namespace detail {

// ---- per-phase epoch bodies ----

inline double phase1_epoch(const Model& model, const TrainDataset& data, const TrainConfig& cfg,
                           const PhaseConfig& pc, SgdOptimizer* opt,
                           const std::vector<Tensor>& params, Rng& rng, int epoch) {
  std::vector<std::size_t> order = data.train_idx;
  rng.shuffle(order);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < order.size(); start += pc.batch) {
    const std::size_t n = std::min<std::size_t>(pc.batch, order.size() - start);
    const int size = cfg.query_sizes[rng.uniform_int(cfg.query_sizes.size())];
    for (const Tensor& p : params) p.zero_grad();
    for (std::size_t k = 0; k < n; ++k) {
      const TrainSample& smp = data.samples[order[start + k]];
      Tape tape;
      Tensor f_r = model.backbone.extract_features(tape, to_tensor(data.panos[smp.pano_index]));
      Tensor f_q = model.backbone.extract_features(tape, query_tensor(smp.query, size));
      MatchResult match = match_features(tape, f_r, f_q, model.detector);
      Tensor loss = loss_mask(tape, match.m_r, smp.target);
      const double lv = loss.value();
      check_finite(lv, 1, epoch);
      total += lv;
      ++count;
      tape.backward(loss, 1.0 / n);
    }
    if (opt) opt->step();
  }
  return total / count;
}

inline double phase1_val(const Model& model, const TrainDataset& data, const TrainConfig& cfg,
                         int epoch) {
  double total = 0.0;
  for (std::size_t idx : data.val_idx) {
    const TrainSample& smp = data.samples[idx];
    Tape tape;
    Tensor f_r = model.backbone.extract_features(tape, to_tensor(data.panos[smp.pano_index]));
    Tensor f_q = model.backbone.extract_features(tape, query_tensor(smp.query, cfg.val_query_size));
    MatchResult match = match_features(tape, f_r, f_q, model.detector);
    const double lv = loss_mask(tape, match.m_r, smp.target).value();
    check_finite(lv, 1, epoch);
    total += lv;
  }
  return total / data.val_idx.size();
}

// Balanced verification epoch. With cache != nullptr (stage 2a) scores come
// from frozen cached features; otherwise (stage 2b) every pair runs the full
// network, so gradients reach the trunk as well.
inline double phase2_epoch(const Model& model, const TrainDataset& data, const TrainConfig& cfg,
                           const PhaseConfig& pc, AdamOptimizer* opt,
                           const std::vector<Tensor>& params, Rng& rng, int epoch, int phase_id,
                           const FeatureCache* cache) {
  std::vector<std::size_t> order = data.train_idx;
  rng.shuffle(order);
  const std::size_t half = std::max<std::size_t>(1, pc.batch / 2);
  repair_batch_scenes(order, half, data.samples);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start < order.size(); start += half) {
    const std::size_t n = std::min<std::size_t>(half, order.size() - start);
    if (n < 2) break;  // a balanced batch needs at least two scenes to disorder
    const int size = cfg.query_sizes[rng.uniform_int(cfg.query_sizes.size())];
    const std::vector<std::size_t> chunk(order.begin() + start, order.begin() + start + n);
    const std::vector<std::size_t> perm = cross_scene_derangement(chunk, data.samples, rng);
    for (const Tensor& p : params) p.zero_grad();
    const double inv = 1.0 / (2.0 * n);
    for (std::size_t k = 0; k < 2 * n; ++k) {
      const bool positive = k < n;
      const std::size_t query_idx = positive ? chunk[k] : chunk[k - n];
      const std::size_t ref_idx = positive ? chunk[k] : chunk[perm[k - n]];
      const int pano = data.samples[ref_idx].pano_index;
      Tape tape;
      Tensor score;
      if (cache) {
        score = score_from_features(tape, model, cache->pano_feats[pano],
                                    cache->query_feats.at(size)[query_idx]);
      } else {
        Tensor f_r = model.backbone.extract_features(tape, to_tensor(data.panos[pano]));
        Tensor f_q =
            model.backbone.extract_features(tape, query_tensor(data.samples[query_idx].query, size));
        score = score_from_features(tape, model, f_r, f_q);
      }
      Tensor loss = loss_verify(tape, score, positive ? 1 : 0);
      const double lv = loss.value();
      check_finite(lv, phase_id, epoch);
      total += lv;
      ++count;
      tape.backward(loss, inv);
    }
    if (opt) opt->step();
  }
  if (count == 0) throw std::runtime_error("phase 2 found no usable batches");
  return total / count;
}

inline double phase2_val(const Model& model, const TrainDataset& data, const TrainConfig& cfg,
                         int epoch, int phase_id, const FeatureCache* cache) {
  Rng rng = derive_rng(cfg.seed, "val/derangement");
  const std::vector<std::size_t> perm = cross_scene_derangement(data.val_idx, data.samples, rng);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t k = 0; k < 2 * data.val_idx.size(); ++k) {
    const bool positive = k < data.val_idx.size();
    const std::size_t query_idx = positive ? data.val_idx[k] : data.val_idx[k - data.val_idx.size()];
    const std::size_t ref_idx =
        positive ? query_idx : data.val_idx[perm[k - data.val_idx.size()]];
    const int pano = data.samples[ref_idx].pano_index;
    Tape tape;
    Tensor score;
    if (cache) {
      score = score_from_features(tape, model, cache->pano_feats[pano],
                                  cache->query_feats.at(cfg.val_query_size)[query_idx]);
    } else {
      Tensor f_r = model.backbone.extract_features(tape, to_tensor(data.panos[pano]));
      Tensor f_q = model.backbone.extract_features(
          tape, query_tensor(data.samples[query_idx].query, cfg.val_query_size));
      score = score_from_features(tape, model, f_r, f_q);
    }
    const double lv = loss_verify(tape, score, positive ? 1 : 0).value();
    check_finite(lv, phase_id, epoch);
    total += lv;
    ++count;
  }
  return total / count;
}

}  // namespace detail

// Runs the staged schedule: mask supervision with SGD, verifier training on a
// frozen trunk with Adam, then end-to-end fine-tuning at a low rate. Batches,
// sizes, and negative pairings derive from (seed, phase, epoch), so a resumed
// run continues exactly where the interrupted one left off. A zero learning
// rate runs the schedule without applying updates. Checkpoints are written
// after every epoch when a path is given; `resume` restarts from one of them.
inline void train(Model& model, const TrainDataset& data, const TrainConfig& cfg,
                  const LogSink& sink, const std::string& ckpt_path = "",
                  const Checkpoint* resume = nullptr) {
  if (data.train_idx.empty() || data.val_idx.empty()) {
    throw std::invalid_argument("train: dataset needs both train and validation samples");
  }
  if ((cfg.phase2a.max_epochs > 0 || cfg.phase2b.max_epochs > 0) && data.val_idx.size() < 2) {
    throw std::invalid_argument(
        "train: verification phases pair validation samples as negatives and need at least 2 "
        "validation samples; raise the validation fraction or the dataset size");
  }
  if (data.feature_factor != model.config.backbone.downsample_factor()) {
    throw std::invalid_argument("train: dataset feature factor does not match the model");
  }
  if (cfg.query_sizes.empty()) throw std::invalid_argument("train: no query sizes configured");
  for (int s : cfg.query_sizes) {
    if (s <= 0 || s % model.config.backbone.downsample_factor() != 0) {
      throw std::invalid_argument("train: query sizes must be positive multiples of the stride");
    }
  }

  int start_phase = 1;
  int start_epoch = 0;
  detail::PhaseState state;
  if (resume) {
    apply_checkpoint(*resume, model);
    start_phase = static_cast<int>(resume->scalar("meta/phase_id"));
    start_epoch = static_cast<int>(resume->scalar("meta/epoch"));
    state.best_val = resume->scalar("meta/best_val");
    state.patience_used = static_cast<int>(resume->scalar("meta/patience"));
    if (start_phase > 3) return;  // finished run
  }

  for (int phase_id = start_phase; phase_id <= 3; ++phase_id) {
    const PhaseConfig& pc =
        phase_id == 1 ? cfg.phase1 : phase_id == 2 ? cfg.phase2a : cfg.phase2b;
    const int epoch0 = phase_id == start_phase ? start_epoch : 0;
    if (phase_id != start_phase) state = detail::PhaseState{};

    // trainable set and parameter list for this phase
    std::vector<std::pair<std::string, Tensor>> named;
    if (phase_id == 1) {
      model.set_trainable(true, false);
      model.backbone.collect_params(named, "backbone");
      model.detector.collect_params(named, "detector");
    } else if (phase_id == 2) {
      model.set_trainable(false, true);
      model.verifier.collect_params(named, "verifier");
    } else {
      model.set_trainable(true, true);
      named = model.named_params();
    }
    std::vector<Tensor> params;
    for (auto& [name, t] : named) params.push_back(t);

    std::unique_ptr<SgdOptimizer> sgd;
    std::unique_ptr<AdamOptimizer> adam;
    if (pc.lr > 0.0) {
      if (phase_id == 1) {
        sgd = std::make_unique<SgdOptimizer>(params, pc.lr);
      } else {
        adam = std::make_unique<AdamOptimizer>(params, pc.lr);
        if (resume && phase_id == start_phase && epoch0 > 0) {
          detail::restore_adam(*adam, named, *resume);
        }
      }
    }

    std::unique_ptr<detail::FeatureCache> cache;
    if (phase_id == 2 && epoch0 < pc.max_epochs) {
      std::vector<int> sizes = cfg.query_sizes;
      sizes.push_back(cfg.val_query_size);
      cache = std::make_unique<detail::FeatureCache>(
          detail::build_feature_cache(model, data, std::move(sizes)));
    }

    for (int epoch = epoch0; epoch < pc.max_epochs; ++epoch) {
      Rng rng = derive_rng(cfg.seed, std::string("phase") + detail::phase_tag(phase_id) +
                                         "/epoch/" + std::to_string(epoch));
      double train_loss = 0.0;
      double val_loss = 0.0;
      if (phase_id == 1) {
        train_loss = detail::phase1_epoch(model, data, cfg, pc, sgd.get(), params, rng, epoch);
        val_loss = detail::phase1_val(model, data, cfg, epoch);
      } else {
        train_loss = detail::phase2_epoch(model, data, cfg, pc, adam.get(), params, rng, epoch,
                                          phase_id, cache.get());
        val_loss = detail::phase2_val(model, data, cfg, epoch, phase_id, cache.get());
      }

      EpochLog log;
      log.phase = detail::phase_tag(phase_id);
      log.epoch = epoch + 1;
      log.train_loss = train_loss;
      log.val_loss = val_loss;
      log.lr = pc.lr;
      if (sink) sink(log);

      if (state.best_val - val_loss >= cfg.min_improvement) {
        state.best_val = val_loss;
        state.patience_used = 0;
      } else {
        ++state.patience_used;
      }
      state.last_val = val_loss;

      const bool stop = state.patience_used >= cfg.patience || epoch + 1 >= pc.max_epochs;
      if (!ckpt_path.empty()) {
        detail::save_progress(model, stop ? phase_id + 1 : phase_id, stop ? 0 : epoch + 1, state,
                              adam.get(), &named, ckpt_path);
      }
      if (stop) break;
    }
  }
  model.set_trainable(true, true);
}

}  // namespace bupm
