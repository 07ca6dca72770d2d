// Release gate for the whole pipeline. Each criterion prints exactly one
// PASS/FAIL line; the exit code is nonzero when any line fails. The two
// expensive criteria (end-to-end training and its repeat) share one working
// directory under --work.
//
//   acceptance [--criterion N]... [--work DIR]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "bupm/evaluator.hpp"
#include "bupm/gradcheck.hpp"
#include "bupm/image.hpp"
#include "bupm/localizer.hpp"
#include "bupm/manifest.hpp"
#include "bupm/matcher.hpp"
#include "bupm/model.hpp"
#include "bupm/rng.hpp"
#include "bupm/synth.hpp"
#include "bupm/tensor.hpp"
#include "bupm/trainer.hpp"

namespace {

namespace fs = std::filesystem;
using namespace bupm;

fs::path g_work;  // set in main before any criterion runs

struct Timer {
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  }
};

std::string format(const char* fmt, ...) {
  char buf[512];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return buf;
}

Tensor random_values(Rng& rng, const std::vector<int>& shape, double lo, double hi,
                     bool signed_values) {
  Tensor t = Tensor::zeros(shape);
  for (std::int64_t k = 0; k < t.numel(); ++k) {
    const double mag = rng.uniform(lo, hi);
    t.data()[k] = signed_values && rng.coin(0.5) ? -mag : mag;
  }
  return t;
}

// ---------------------------------------------------------------------------
// the shared end-to-end experiment: 50 panoramas, 400 training positives,
// the full schedule, then 100 held-out positives + 100 derangement negatives
// ---------------------------------------------------------------------------

constexpr std::uint64_t kSeed = 42;

struct Experiment {
  fs::path ds;
  Model model;
  std::string log;  // every epoch line, newline-terminated
  EvalReport report;
  SynthMetaFile meta;
  double seconds = 0.0;
};

Experiment run_experiment(const fs::path& root) {
  Timer timer;
  Experiment ex;
  ex.ds = root / "ds";
  fs::create_directories(root);

  SynthDatasetConfig synth_cfg;
  synth_cfg.panoramas = 50;
  synth_cfg.samples = 500;
  synth_cfg.pano_h = 96;
  synth_cfg.pano_w = 192;
  synth_cfg.feature_factor = 8;
  synth_cfg.train_frac = 0.8;
  synth_cfg.seed = kSeed;
  write_synth_dataset(synth_cfg, ex.ds.string());

  TrainConfig train_cfg;  // stock schedule and rates; seed pinned
  train_cfg.seed = kSeed;
  const TrainDataset data = load_train_dataset(ex.ds.string(), train_cfg.val_frac);
  ex.model = Model::init(ModelConfig{}, kSeed);
  const LogSink sink = [&ex](const EpochLog& log) {
    const std::string line = log.to_line();
    ex.log += line;
    ex.log += '\n';
    std::fprintf(stderr, "    %s\n", line.c_str());
  };
  train(ex.model, data, train_cfg, sink, (root / "model.ckpt").string());

  std::vector<ManifestRecord> held_out;
  for (const ManifestRecord& rec : load_manifest((ex.ds / "manifest.jsonl").string()).records) {
    if (rec.split == "test") held_out.push_back(rec);
  }
  Rng neg_rng = derive_rng(kSeed, "acceptance/negatives");
  const std::vector<ManifestRecord> negatives =
      build_negative_manifest(held_out, 1.609, neg_rng);
  held_out.insert(held_out.end(), negatives.begin(), negatives.end());

  EvalOptions opt;
  opt.query_size = 224;
  opt.base_dir = ex.ds.string();
  ex.report = evaluate_records(ex.model, held_out, opt);
  ex.meta = load_synth_meta((ex.ds / "synth.jsonl").string());
  ex.seconds = timer.seconds();
  return ex;
}

const Experiment& experiment() {
  static const Experiment ex = [] {
    std::fprintf(stderr, "  [experiment] training the shared end-to-end run...\n");
    return run_experiment(g_work / "run_a");
  }();
  return ex;
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

// pairwise cosine matches a freshly written nested-loop implementation
bool similarity_oracle(std::string& detail) {
  Timer timer;
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int hr = 1 + static_cast<int>(rng.uniform_int(8));
    const int wr = 1 + static_cast<int>(rng.uniform_int(8));
    const int hq = 1 + static_cast<int>(rng.uniform_int(8));
    const int wq = 1 + static_cast<int>(rng.uniform_int(8));
    const int d = 1 + static_cast<int>(rng.uniform_int(16));
    // magnitudes stay away from zero so the norm floor never engages
    const Tensor f_r = random_values(rng, {hr, wr, d}, 0.1, 1.0, true);
    const Tensor f_q = random_values(rng, {hq, wq, d}, 0.1, 1.0, true);
    Tape tape;
    const Tensor s = pairwise_cosine(tape, f_r, f_q);
    for (int x = 0; x < hr; ++x) {
      for (int y = 0; y < wr; ++y) {
        for (int i = 0; i < hq; ++i) {
          for (int j = 0; j < wq; ++j) {
            const double* a = f_r.data() + (static_cast<std::int64_t>(x) * wr + y) * d;
            const double* b = f_q.data() + (static_cast<std::int64_t>(i) * wq + j) * d;
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (int c = 0; c < d; ++c) {
              dot += a[c] * b[c];
              na += a[c] * a[c];
              nb += b[c] * b[c];
            }
            const double expect = dot / (std::sqrt(na) * std::sqrt(nb));
            const double got =
                s.data()[((static_cast<std::int64_t>(x) * wr + y) * hq + i) * wq + j];
            worst = std::max(worst, std::abs(got - expect) / std::max(1.0, std::abs(expect)));
          }
        }
      }
    }
  }
  const double secs = timer.seconds();
  detail = format("cosine map vs nested loops: max relative error %.2e over 50 instances, %.2f s",
                  worst, secs);
  return worst <= 1e-12 && secs < 10.0;
}

// per-patch max pooling matches exhaustive scans bitwise
bool pooling_oracle(std::string& detail) {
  Rng rng(202);
  int checked = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int hr = 1 + static_cast<int>(rng.uniform_int(6));
    const int wr = 1 + static_cast<int>(rng.uniform_int(6));
    const int hq = 1 + static_cast<int>(rng.uniform_int(6));
    const int wq = 1 + static_cast<int>(rng.uniform_int(6));
    Tensor s = Tensor::zeros({hr, wr, hq, wq});
    // quantized values provoke ties
    for (std::int64_t k = 0; k < s.numel(); ++k) {
      s.data()[k] = static_cast<double>(rng.uniform_int(17) - 8) / 8.0;
    }
    Tape tape;
    const BestScores best = global_max_pool(tape, s);
    for (int x = 0; x < hr; ++x) {
      for (int y = 0; y < wr; ++y) {
        double m = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < hq; ++i) {
          for (int j = 0; j < wq; ++j) {
            m = std::max(m, s.data()[((static_cast<std::int64_t>(x) * wr + y) * hq + i) * wq + j]);
          }
        }
        if (best.b_r.data()[x * wr + y] != m) {
          detail = format("reference-side pooling mismatch on trial %d", trial);
          return false;
        }
      }
    }
    for (int i = 0; i < hq; ++i) {
      for (int j = 0; j < wq; ++j) {
        double m = -std::numeric_limits<double>::infinity();
        for (int x = 0; x < hr; ++x) {
          for (int y = 0; y < wr; ++y) {
            m = std::max(m, s.data()[((static_cast<std::int64_t>(x) * wr + y) * hq + i) * wq + j]);
          }
        }
        if (best.b_q.data()[i * wq + j] != m) {
          detail = format("query-side pooling mismatch on trial %d", trial);
          return false;
        }
      }
    }
    double top_r = -std::numeric_limits<double>::infinity();
    double top_q = -std::numeric_limits<double>::infinity();
    for (std::int64_t k = 0; k < best.b_r.numel(); ++k) top_r = std::max(top_r, best.b_r.data()[k]);
    for (std::int64_t k = 0; k < best.b_q.numel(); ++k) top_q = std::max(top_q, best.b_q.data()[k]);
    if (top_r != top_q) {
      detail = format("global maxima disagree across sides on trial %d", trial);
      return false;
    }
    ++checked;
  }
  detail = format("both pooled maps bitwise-exact on %d random score tensors", checked);
  return true;
}

// finite-difference audit of every op and the end-to-end score
bool gradient_suite(std::string& detail) {
  Timer timer;
  GradCheckOptions opt;  // 20 seeds, step 1e-5, tolerance 1e-4
  const std::vector<GradCheckResult> results = run_gradient_checks(opt);
  double worst = 0.0;
  int failures = 0;
  for (const GradCheckResult& r : results) {
    worst = std::max(worst, r.max_rel_err);
    if (!r.pass) ++failures;
  }
  const double secs = timer.seconds();
  detail = format("%zu ops x %d seeds: %d failures, max relative error %.2e, %.1f s",
                  results.size(), opt.seeds, failures, worst, secs);
  return failures == 0 && secs < 120.0;
}

double pair_count_auc(const ScoredSet& set) {
  double credit = 0.0;
  long long pairs = 0;
  for (const ScoredSample& p : set) {
    if (p.label != 1) continue;
    for (const ScoredSample& n : set) {
      if (n.label != 0) continue;
      ++pairs;
      if (p.score > n.score) {
        credit += 1.0;
      } else if (p.score == n.score) {
        credit += 0.5;
      }
    }
  }
  return credit / static_cast<double>(pairs);
}

// ranking metrics against pair counting and hand-enumerated sweeps
bool metric_oracle(std::string& detail) {
  Rng rng(404);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform_int(199));
    ScoredSet set;
    for (std::size_t k = 0; k < n; ++k) {
      set.push_back({static_cast<double>(rng.uniform_int(17)) / 16.0, rng.coin(0.5) ? 1 : 0,
                     "s" + std::to_string(k)});
    }
    set[0].label = 1;  // both classes must appear
    set[1].label = 0;
    if (roc_auc(set) != pair_count_auc(set)) {
      detail = format("rank-sum and pair-count AUC disagree on trial %d", trial);
      return false;
    }
  }

  struct ApFixture {
    std::vector<double> scores;
    std::vector<int> labels;
    double expect;
  };
  // expectations enumerated by hand from the threshold sweep
  const std::vector<ApFixture> fixtures = {
      {{0.9}, {1}, 1.0},
      {{0.9, 0.8}, {0, 1}, 0.5},
      {{0.9, 0.8}, {1, 0}, 1.0},
      {{0.9, 0.8, 0.7, 0.6}, {1, 1, 0, 0}, 1.0},
      {{0.9, 0.8, 0.7, 0.6}, {0, 0, 1, 1}, 1.0 / 6.0 + 0.25},
      {{0.9, 0.8, 0.7}, {1, 0, 1}, 0.5 + 1.0 / 3.0},
      {{0.9, 0.8, 0.7, 0.6}, {0, 1, 0, 1}, 0.5},
      {{0.9, 0.8, 0.7, 0.6, 0.5}, {1, 0, 0, 1, 1}, 1.0 / 3.0 + 1.0 / 6.0 + 0.2},
      {{0.8, 0.8}, {1, 0}, 0.5},
      {{0.9, 0.5, 0.5, 0.1}, {0, 1, 1, 0}, 2.0 / 3.0},
  };
  for (std::size_t f = 0; f < fixtures.size(); ++f) {
    ScoredSet set;
    for (std::size_t k = 0; k < fixtures[f].scores.size(); ++k) {
      set.push_back({fixtures[f].scores[k], fixtures[f].labels[k], "f" + std::to_string(k)});
    }
    const double ap = precision_recall(set).average_precision;
    if (std::abs(ap - fixtures[f].expect) > 1e-12) {
      detail = format("AP fixture %zu: got %.17g, enumerated %.17g", f, ap, fixtures[f].expect);
      return false;
    }
  }
  detail = "AUC exact on 100 random sets; AP matches 10 enumerated sweeps";
  return true;
}

// scaled synthetic experiment: train from scratch, verify held-out pairs
bool synthetic_end_to_end(std::string& detail) {
  const Experiment& ex = experiment();
  const std::int64_t params = ex.model.parameter_count();
  const int stride = ex.model.config.backbone.downsample_factor();
  detail = format("AUC %.4f AP %.4f on 100+100 held-out pairs; %lld params, stride %d, %.0f s",
                  ex.report.auc, ex.report.average_precision,
                  static_cast<long long>(params), stride, ex.seconds);
  return stride == 8 && params <= 100000 && ex.report.n_pos == 100 && ex.report.n_neg == 100 &&
         ex.report.excluded == 0 && ex.report.auc >= 0.90 &&
         ex.report.average_precision >= 0.90 && ex.seconds <= 1800.0;
}

// localization quality on the same held-out positives, plus the seam fixture
bool localization(std::string& detail) {
  const Experiment& ex = experiment();
  std::map<std::string, Tensor> ref_cache;
  int hits = 0;
  int total = 0;
  for (const SynthSampleMeta& row : ex.meta.rows) {
    if (row.split != "test") continue;
    ++total;
    auto it = ref_cache.find(row.ref_path);
    if (it == ref_cache.end()) {
      const Image ref = load_image((ex.ds / row.ref_path).string());
      it = ref_cache.emplace(row.ref_path, to_tensor(ref)).first;
    }
    Image query = load_image((ex.ds / row.query_path).string());
    query = resize_bilinear(query, 224, 224);
    const VerifyResult result = verify(ex.model, to_tensor(query), it->second);
    const std::optional<BoundingBox> box =
        localize_mask(result.m_r, ex.meta.pano_h, ex.meta.pano_w, 0.5);
    const double iou = box ? box_iou(*box, row.box, ex.meta.pano_w) : 0.0;
    if (iou >= 0.5) ++hits;
  }

  // content split across the seam: columns 14,15 | 0,1 of a 4x16 grid must
  // come back as one wrapping box
  Tensor mask = Tensor::zeros({4, 16, 1});
  for (std::int64_t k = 0; k < mask.numel(); ++k) mask.data()[k] = 0.1;
  for (int y = 1; y <= 2; ++y) {
    for (int x : {14, 15, 0, 1}) mask.data()[y * 16 + x] = 0.9;
  }
  const std::optional<BoundingBox> seam = localize_mask(mask, 32, 128, 0.5);
  const bool seam_ok = seam && seam->x0 == 112 && seam->width == 32 && seam->y0 == 8 &&
                       seam->height == 16 && seam->wrap;

  detail = format("IoU >= 0.5 on %d/%d held-out positives; seam fixture %s", hits, total,
                  seam_ok ? "exact" : "wrong");
  return total == 100 && hits * 10 >= total * 7 && seam_ok;
}

// the whole experiment repeats bit-for-bit under the same seed
bool determinism(std::string& detail) {
  const Experiment& first = experiment();
  std::fprintf(stderr, "  [experiment] repeating the end-to-end run...\n");
  const Experiment second = run_experiment(g_work / "run_b");
  const bool log_same = first.log == second.log;
  const bool auc_same = std::memcmp(&first.report.auc, &second.report.auc, sizeof(double)) == 0;
  const bool ap_same = std::memcmp(&first.report.average_precision,
                                   &second.report.average_precision, sizeof(double)) == 0;
  std::size_t lines = 0;
  for (char c : first.log) lines += c == '\n';
  detail = format("repeat run: %zu log lines %s, AUC %s, AP %s", lines,
                  log_same ? "identical" : "DIFFER", auc_same ? "identical" : "DIFFERS",
                  ap_same ? "identical" : "DIFFERS");
  return log_same && auc_same && ap_same;
}

// augmentation draws stay inside their documented ranges
bool augmentation_ranges(std::string& detail) {
  Rng rng = derive_rng(kSeed, "acceptance/augment");
  int violations = 0;
  for (int k = 0; k < 1000; ++k) {
    const AugmentParams p = sample_augment_params(rng);
    const bool ok = p.scale >= 0.5 && p.scale <= 2.0 && p.shift_x > -0.2 && p.shift_x < 0.2 &&
                    p.shift_y > -0.2 && p.shift_y < 0.2 && p.gamma >= 0.5 && p.gamma <= 1.5;
    if (!ok) ++violations;
  }
  detail = format("1000 draws: %d out of range", violations);
  return violations == 0;
}

struct Criterion {
  int id;
  const char* what;
  std::function<bool(std::string&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> selected;
  g_work = fs::temp_directory_path() / "bupm_acceptance";
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--criterion" && i + 1 < argc) {
      selected.push_back(std::atoi(argv[++i]));
    } else if (arg == "--work" && i + 1 < argc) {
      g_work = argv[++i];
    } else {
      std::fprintf(stderr, "usage: acceptance [--criterion N]... [--work DIR]\n");
      return 2;
    }
  }

  const std::vector<Criterion> criteria = {
      {1, "similarity oracle", similarity_oracle},
      {2, "pooling oracle", pooling_oracle},
      {3, "gradient suite", gradient_suite},
      {4, "metric oracle", metric_oracle},
      {5, "synthetic end-to-end", synthetic_end_to_end},
      {6, "localization", localization},
      {7, "determinism", determinism},
      {8, "augmentation ranges", augmentation_ranges},
  };

  int failures = 0;
  int ran = 0;
  for (const Criterion& c : criteria) {
    if (!selected.empty() &&
        std::find(selected.begin(), selected.end(), c.id) == selected.end()) {
      continue;
    }
    ++ran;
    std::string detail;
    bool ok = false;
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail = format("threw: %s", e.what());
    }
    std::printf("criterion %d (%s): %s  %s\n", c.id, c.what, ok ? "PASS" : "FAIL",
                detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
  }
  std::printf("acceptance: %d/%d criteria pass\n", ran - failures, ran);
  return failures == 0 ? 0 : 1;
}
