#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "bupm/image.hpp"
#include "bupm/manifest.hpp"
#include "bupm/model.hpp"
#include "bupm/tensor.hpp"

#include "json.hpp"

namespace bupm {

struct ScoredSample {
  double score = 0.0;
  int label = 0;
  std::string id;
};

using ScoredSet = std::vector<ScoredSample>;

namespace detail {

inline std::pair<long long, long long> count_classes(const ScoredSet& set) {
  long long pos = 0, neg = 0;
  for (const ScoredSample& s : set) {
    if (s.label != 0 && s.label != 1) {
      throw std::invalid_argument("scored set: label must be 0 or 1");
    }
    if (!std::isfinite(s.score)) {
      throw std::invalid_argument("scored set: non-finite score");
    }
    if (s.label == 1) {
      ++pos;
    } else {
      ++neg;
    }
  }
  return {pos, neg};
}

// Indices sorted by score descending, stable within ties.
inline std::vector<std::size_t> descending_order(const ScoredSet& set) {
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return set[a].score > set[b].score;
  });
  return order;
}

}  // namespace detail

// Probability that a random positive outscores a random negative; ties count
// half. Computed from average ranks, which matches brute-force pair counting
// exactly (both sides are sums of halves).
inline double roc_auc(const ScoredSet& set) {
  const auto [pos, neg] = detail::count_classes(set);
  if (pos == 0 || neg == 0) {
    throw std::invalid_argument("auc: need at least one positive and one negative");
  }
  std::vector<std::size_t> order = detail::descending_order(set);
  std::reverse(order.begin(), order.end());  // ascending for rank assignment
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && set[order[j]].score == set[order[i]].score) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks are 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (set[order[k]].label == 1) pos_rank_sum += avg_rank;
    }
    i = j;
  }
  const double p = static_cast<double>(pos);
  return (pos_rank_sum - 0.5 * p * (p + 1.0)) / (p * static_cast<double>(neg));
}

struct RocPoint {
  double threshold = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
};

// One point per distinct score, thresholds descending; classifier at point k
// predicts positive iff score >= threshold_k.
inline std::vector<RocPoint> roc_curve(const ScoredSet& set) {
  const auto [pos, neg] = detail::count_classes(set);
  if (pos == 0 || neg == 0) {
    throw std::invalid_argument("roc curve: need at least one positive and one negative");
  }
  const std::vector<std::size_t> order = detail::descending_order(set);
  std::vector<RocPoint> out;
  long long tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && set[order[j]].score == set[order[i]].score) ++j;
    for (std::size_t k = i; k < j; ++k) {
      if (set[order[k]].label == 1) {
        ++tp;
      } else {
        ++fp;
      }
    }
    out.push_back({set[order[i]].score, static_cast<double>(tp) / static_cast<double>(pos),
                   static_cast<double>(fp) / static_cast<double>(neg)});
    i = j;
  }
  return out;
}

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct PrCurve {
  std::vector<PrPoint> points;
  double average_precision = 0.0;
};

// Step-interpolated average precision: AP = sum_k (R_k - R_{k-1}) * P_k over
// the descending-threshold sweep. Depends only on the score ordering.
inline PrCurve precision_recall(const ScoredSet& set) {
  const auto [pos, neg] = detail::count_classes(set);
  (void)neg;
  if (pos == 0) {
    throw std::invalid_argument("average precision: no positive samples");
  }
  const std::vector<std::size_t> order = detail::descending_order(set);
  PrCurve curve;
  long long tp = 0, fp = 0;
  double prev_recall = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && set[order[j]].score == set[order[i]].score) ++j;
    for (std::size_t k = i; k < j; ++k) {
      if (set[order[k]].label == 1) {
        ++tp;
      } else {
        ++fp;
      }
    }
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(pos);
    curve.average_precision += (recall - prev_recall) * precision;
    prev_recall = recall;
    curve.points.push_back({set[order[i]].score, precision, recall});
    i = j;
  }
  return curve;
}

struct EvalOptions {
  int query_size = 224;   // queries are resampled to this square before scoring
  std::string base_dir;   // prefix for relative manifest paths; empty = as written
};

struct EvalRow {
  std::string query_path;
  std::string ref_path;
  int label = 0;
  double score = 0.0;
};

struct EvalReport {
  double auc = 0.0;
  double average_precision = 0.0;
  long long n_pos = 0;
  long long n_neg = 0;
  long long excluded = 0;
  std::vector<EvalRow> rows;
  std::vector<std::string> errors;  // one entry per excluded record
  std::vector<RocPoint> roc;
  PrCurve pr;
};

namespace detail {

inline std::string resolve_path(const std::string& base, const std::string& rel) {
  if (base.empty() || std::filesystem::path(rel).is_absolute()) return rel;
  return (std::filesystem::path(base) / rel).string();
}

// References whose extents do not divide the backbone stride are resampled to
// the nearest valid size.
inline Tensor ref_tensor_for_model(const Image& img, int factor) {
  if (img.height % factor == 0 && img.width % factor == 0) return to_tensor(img);
  const auto snap = [factor](int v) {
    const int n = std::max(1, (v + factor / 2) / factor);
    return n * factor;
  };
  return to_tensor(resize_bilinear(img, snap(img.height), snap(img.width)));
}

inline std::string format_row(double a, double b, double c) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%.17g\t%.17g\t%.17g\n", a, b, c);
  return buf;
}

}  // namespace detail

// Scores every manifest record with the model. Unreadable samples are skipped
// and reported in `errors`; metrics are computed over the rest.
inline EvalReport evaluate_records(const Model& model,
                                   const std::vector<ManifestRecord>& records,
                                   const EvalOptions& opt = {}) {
  if (records.empty()) {
    throw std::invalid_argument("evaluate: manifest has no records");
  }
  const int factor = model.config.backbone.downsample_factor();
  if (opt.query_size <= 0 || opt.query_size % factor != 0) {
    throw std::invalid_argument("evaluate: query size must be a positive multiple of " +
                                std::to_string(factor));
  }

  EvalReport report;
  std::map<std::string, Tensor> ref_features;  // keyed by resolved path
  for (const ManifestRecord& rec : records) {
    const std::string qpath = detail::resolve_path(opt.base_dir, rec.query_path);
    const std::string rpath = detail::resolve_path(opt.base_dir, rec.ref_path);
    try {
      auto it = ref_features.find(rpath);
      if (it == ref_features.end()) {
        Tape tape;
        Tensor f = model.backbone.extract_features(
            tape, detail::ref_tensor_for_model(load_image(rpath), factor));
        it = ref_features.emplace(rpath, f.detached_copy()).first;
      }
      const Image query = load_image(qpath);
      Tape tape;
      Tensor f_q = model.backbone.extract_features(
          tape, to_tensor(resize_bilinear(query, opt.query_size, opt.query_size)));
      const double score = score_from_features(tape, model, it->second, f_q).value();
      report.rows.push_back({rec.query_path, rec.ref_path, rec.label, score});
    } catch (const std::exception& e) {
      ++report.excluded;
      report.errors.push_back(rec.query_path + " | " + rec.ref_path + ": " + e.what());
    }
  }

  if (report.rows.empty()) {
    throw std::runtime_error("evaluate: no scorable samples (" +
                             std::to_string(report.excluded) + " excluded)");
  }
  ScoredSet set;
  set.reserve(report.rows.size());
  for (const EvalRow& row : report.rows) {
    set.push_back({row.score, row.label, row.query_path});
    if (row.label == 1) {
      ++report.n_pos;
    } else {
      ++report.n_neg;
    }
  }
  report.auc = roc_auc(set);
  report.roc = roc_curve(set);
  report.pr = precision_recall(set);
  report.average_precision = report.pr.average_precision;
  return report;
}

// Writes report.json, per-sample scores.jsonl, and the two curve tables
// roc.tsv (threshold, tpr, fpr) and pr.tsv (threshold, precision, recall).
inline void write_eval_report(const EvalReport& report, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto open = [](const fs::path& p) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw DecodeError(p.string(), "cannot open for writing");
    return out;
  };

  {
    nlohmann::json j = {{"auc", report.auc},
                        {"average_precision", report.average_precision},
                        {"n_pos", report.n_pos},
                        {"n_neg", report.n_neg},
                        {"excluded", report.excluded},
                        {"errors", report.errors}};
    auto out = open(fs::path(out_dir) / "report.json");
    out << j.dump(2) << "\n";
  }
  {
    auto out = open(fs::path(out_dir) / "scores.jsonl");
    for (const EvalRow& row : report.rows) {
      nlohmann::json j = {{"query_path", row.query_path},
                          {"ref_path", row.ref_path},
                          {"label", row.label},
                          {"score", row.score}};
      out << j.dump() << "\n";
    }
  }
  {
    auto out = open(fs::path(out_dir) / "roc.tsv");
    out << "threshold\ttpr\tfpr\n";
    for (const RocPoint& p : report.roc) out << detail::format_row(p.threshold, p.tpr, p.fpr);
  }
  {
    auto out = open(fs::path(out_dir) / "pr.tsv");
    out << "threshold\tprecision\trecall\n";
    for (const PrPoint& p : report.pr.points) {
      out << detail::format_row(p.threshold, p.precision, p.recall);
    }
  }
}

// Full pass: load the manifest, score every record, write the report files.
// Relative paths resolve against the manifest's directory unless the options
// name a different base.
inline EvalReport evaluate_manifest(const Model& model, const std::string& manifest_path,
                                    const std::string& out_dir, EvalOptions opt = {}) {
  const Manifest manifest = load_manifest(manifest_path);
  if (opt.base_dir.empty()) {
    opt.base_dir = std::filesystem::path(manifest_path).parent_path().string();
  }
  EvalReport report = evaluate_records(model, manifest.records, opt);
  write_eval_report(report, out_dir);
  return report;
}

}  // namespace bupm
