#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bupm/evaluator.hpp"
#include "bupm/gradcheck.hpp"
#include "bupm/image.hpp"
#include "bupm/localizer.hpp"
#include "bupm/manifest.hpp"
#include "bupm/model.hpp"
#include "bupm/synth.hpp"
#include "bupm/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

int default_threads() {
  if (const char* env = std::getenv("BUPM_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

void echo_run_header(std::uint64_t seed, int threads) {
  std::cout << nlohmann::json{{"seed", seed}, {"threads", threads}}.dump() << "\n";
}

// Snap an image to extents the backbone accepts; reports the change through
// `note` so a resample is never silent.
bupm::Image fit_to_stride(const bupm::Image& img, int factor, const std::string& role) {
  const auto snap = [factor](int v) { return std::max(1, (v + factor / 2) / factor) * factor; };
  const int th = snap(img.height), tw = snap(img.width);
  if (th == img.height && tw == img.width) return img;
  std::cerr << "note: resized " << role << " from " << img.height << "x" << img.width << " to "
            << th << "x" << tw << " to fit the stride-" << factor << " trunk\n";
  return bupm::resize_bilinear(img, th, tw);
}

bupm::Model load_model(const std::string& ckpt_path) {
  return bupm::model_from_checkpoint(bupm::load_checkpoint(ckpt_path));
}

void draw_box_outline(bupm::Image& img, const bupm::BoundingBox& box) {
  const int w = img.width;
  const auto paint = [&img](int y, int x) {
    img.at(y, x, 0) = 1.0;
    if (img.channels == 3) {
      img.at(y, x, 1) = 0.1;
      img.at(y, x, 2) = 0.1;
    }
  };
  const int y1 = std::min(box.y0 + box.height - 1, img.height - 1);
  for (int i = 0; i < box.width; ++i) {
    const int x = (box.x0 + i) % w;
    paint(box.y0, x);
    paint(y1, x);
  }
  for (int y = box.y0; y <= y1; ++y) {
    paint(y, box.x0 % w);
    paint(y, (box.x0 + box.width - 1) % w);
  }
}

struct VerifyInputs {
  bupm::Tensor query;
  bupm::Tensor ref;
  int ref_h = 0;
  int ref_w = 0;
};

VerifyInputs prepare_pair(const bupm::Model& model, const std::string& query_path,
                          const std::string& ref_path, int query_size) {
  const int factor = model.config.backbone.downsample_factor();
  VerifyInputs in;
  bupm::Image query = bupm::load_image(query_path);
  if (query_size > 0) {
    if (query_size % factor != 0) {
      throw std::invalid_argument("--query-size must be a multiple of " +
                                  std::to_string(factor));
    }
    if (query.height != query_size || query.width != query_size) {
      std::cerr << "note: resized query from " << query.height << "x" << query.width << " to "
                << query_size << "x" << query_size << "\n";
      query = bupm::resize_bilinear(query, query_size, query_size);
    }
  } else {
    query = fit_to_stride(query, factor, "query");
  }
  const bupm::Image ref = fit_to_stride(bupm::load_image(ref_path), factor, "reference");
  in.query = bupm::to_tensor(query);
  in.ref = bupm::to_tensor(ref);
  in.ref_h = ref.height;
  in.ref_w = ref.width;
  return in;
}

int guarded(const std::function<int()>& body) {
  try {
    return body();
  } catch (const bupm::DecodeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return std::string(e.what()).find("diverged") != std::string::npos ? kExitNumeric : kExitIo;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"verification of photo location claims against panoramic references"};
  app.require_subcommand(1);
  app.fallthrough();  // --seed/--threads may follow the subcommand name
  app.set_config("--config", "", "read default option values from an INI/TOML file");

  std::uint64_t seed = 1;
  int threads = default_threads();
  app.add_option("--seed", seed, "master random seed, echoed into all logs");
  app.add_option("--threads", threads, "worker thread cap (processing is deterministic at 1)")
      ->check(CLI::PositiveNumber);

  // ---- synth ----
  auto* synth = app.add_subcommand("synth", "generate a procedural panorama dataset");
  std::string synth_out;
  bupm::SynthDatasetConfig synth_cfg;
  synth->add_option("--out", synth_out, "output dataset directory")->required();
  synth->add_option("--panoramas", synth_cfg.panoramas, "number of distinct panoramas");
  synth->add_option("--samples", synth_cfg.samples, "number of query samples");
  synth->add_option("--pano-height", synth_cfg.pano_h, "panorama height in pixels");
  synth->add_option("--pano-width", synth_cfg.pano_w, "panorama width in pixels");
  synth->add_option("--feature-factor", synth_cfg.feature_factor,
                    "cell size of the mask target grid");
  synth->add_option("--train-frac", synth_cfg.train_frac, "fraction of samples in the train split");

  // ---- train ----
  auto* train = app.add_subcommand("train", "run the two-phase training schedule");
  std::string train_data, train_ckpt, train_log, train_phase = "all";
  bool train_resume = false;
  bupm::TrainConfig train_cfg;
  std::vector<int> train_channels = {16, 32, 32};
  train->add_option("--data", train_data, "dataset directory from `synth`")->required();
  train->add_option("--ckpt", train_ckpt, "checkpoint path (written after every epoch)")
      ->required();
  train->add_option("--phase", train_phase, "which part of the schedule to run")
      ->check(CLI::IsMember({"1", "2", "all"}));
  train->add_flag("--resume", train_resume, "continue from the checkpoint at --ckpt");
  train->add_option("--log", train_log, "also append epoch records to this file");
  train->add_option("--phase1-epochs", train_cfg.phase1.max_epochs, "epoch cap, mask phase");
  train->add_option("--phase2a-epochs", train_cfg.phase2a.max_epochs,
                    "epoch cap, decision head phase");
  train->add_option("--phase2b-epochs", train_cfg.phase2b.max_epochs,
                    "epoch cap, end-to-end fine-tune");
  train->add_option("--patience", train_cfg.patience, "epochs without improvement before stopping");
  train->add_option("--val-frac", train_cfg.val_frac, "fraction of train rows held for validation");
  train->add_option("--query-sizes", train_cfg.query_sizes,
                    "square sizes randomly assigned to training batches")
      ->delimiter(',');
  train->add_option("--val-query-size", train_cfg.val_query_size,
                    "square size used for validation queries");
  train->add_option("--backbone-channels", train_channels,
                    "trunk channels per stage (fresh models only)")
      ->delimiter(',');

  // ---- verify ----
  auto* verify = app.add_subcommand("verify", "score one query image against one reference");
  std::string v_query, v_ref, v_ckpt, v_masks;
  double v_threshold = 0.5;
  int v_query_size = 0;
  verify->add_option("--query", v_query, "query photo")->required();
  verify->add_option("--ref", v_ref, "reference panorama")->required();
  verify->add_option("--ckpt", v_ckpt, "trained checkpoint")->required();
  verify->add_option("--threshold", v_threshold, "decision threshold on the score");
  verify->add_option("--query-size", v_query_size,
                     "square size for the query (0 keeps its extents, snapped to the stride)");
  verify->add_option("--emit-masks", v_masks, "directory for the matched-region masks");

  // ---- localize ----
  auto* localize = app.add_subcommand("localize", "box the query's content inside the reference");
  std::string l_query, l_ref, l_ckpt, l_annotate;
  double l_mask_threshold = 0.5;
  int l_query_size = 0;
  localize->add_option("--query", l_query, "query photo")->required();
  localize->add_option("--ref", l_ref, "reference panorama")->required();
  localize->add_option("--ckpt", l_ckpt, "trained checkpoint")->required();
  localize->add_option("--mask-threshold", l_mask_threshold, "cell activation cutoff");
  localize->add_option("--query-size", l_query_size,
                       "square size for the query (0 keeps its extents, snapped to the stride)");
  localize->add_option("--annotate", l_annotate, "write the reference with the box drawn on it");

  // ---- evaluate ----
  auto* evaluate = app.add_subcommand("evaluate", "score a manifest and report AUC / AP");
  std::string e_data, e_ckpt, e_out, e_split = "all";
  int e_query_size = 224;
  bool e_negatives = false;
  double e_min_km = 1.609;
  evaluate->add_option("--data", e_data, "manifest file")->required();
  evaluate->add_option("--ckpt", e_ckpt, "trained checkpoint")->required();
  evaluate->add_option("--out", e_out, "report directory")->required();
  evaluate->add_option("--query-size", e_query_size, "square size queries are scored at");
  evaluate->add_option("--split", e_split, "restrict to one manifest split")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  evaluate->add_flag("--with-negatives", e_negatives,
                     "pair each positive with a far-away reference as a negative");
  evaluate->add_option("--min-km", e_min_km, "distance floor for generated negatives");

  // ---- gradcheck ----
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference audit of every op");
  bupm::GradCheckOptions gc_opt;
  gradcheck->add_option("--seeds", gc_opt.seeds, "independent random draws per op")
      ->check(CLI::PositiveNumber);
  gradcheck->add_option("--step", gc_opt.step, "finite-difference step");
  gradcheck->add_option("--tolerance", gc_opt.tolerance, "max allowed relative error");
  gradcheck->add_flag("--negative-control", gc_opt.include_negative_control,
                      "add a deliberately broken gradient that must FAIL");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (*synth) {
    return guarded([&] {
      synth_cfg.seed = seed;
      echo_run_header(seed, threads);
      const bupm::SynthDataset ds = bupm::write_synth_dataset(synth_cfg, synth_out);
      std::cout << nlohmann::json{{"panoramas", synth_cfg.panoramas},
                                  {"samples", static_cast<int>(ds.manifest.records.size())},
                                  {"out", synth_out}}
                       .dump()
                << "\n";
      return kExitOk;
    });
  }

  if (*train) {
    return guarded([&] {
      train_cfg.seed = seed;
      if (train_phase == "1") {
        train_cfg.phase2a.max_epochs = 0;
        train_cfg.phase2b.max_epochs = 0;
      } else if (train_phase == "2") {
        train_cfg.phase1.max_epochs = 0;
      }
      echo_run_header(seed, threads);

      const bupm::TrainDataset data = bupm::load_train_dataset(train_data, train_cfg.val_frac);
      std::optional<bupm::Checkpoint> resume;
      bupm::Model model = [&] {
        if (train_resume) {
          resume = bupm::load_checkpoint(train_ckpt);
          return bupm::Model::init(bupm::config_from_checkpoint(*resume), seed);
        }
        bupm::ModelConfig cfg;
        cfg.backbone.num_stages = static_cast<int>(train_channels.size());
        cfg.backbone.channels = train_channels;
        return bupm::Model::init(cfg, seed);
      }();

      std::ofstream log_file;
      if (!train_log.empty()) {
        log_file.open(train_log, std::ios::app);
        if (!log_file) throw bupm::DecodeError(train_log, "cannot open for writing");
      }
      const bupm::LogSink sink = [&](const bupm::EpochLog& log) {
        const std::string line = log.to_line();
        std::cout << line << "\n" << std::flush;
        if (log_file.is_open()) log_file << line << "\n" << std::flush;
      };
      bupm::train(model, data, train_cfg, sink, train_ckpt,
                  resume ? &*resume : nullptr);
      return kExitOk;
    });
  }

  if (*verify) {
    return guarded([&] {
      echo_run_header(seed, threads);
      const bupm::Model model = load_model(v_ckpt);
      const VerifyInputs in = prepare_pair(model, v_query, v_ref, v_query_size);
      const bupm::VerifyResult result = bupm::verify(model, in.query, in.ref, v_threshold);
      if (!v_masks.empty()) {
        std::filesystem::create_directories(v_masks);
        bupm::save_image(bupm::mask_to_image(result.m_r),
                         (std::filesystem::path(v_masks) / "mask_ref.pgm").string());
        bupm::save_image(bupm::mask_to_image(result.m_q),
                         (std::filesystem::path(v_masks) / "mask_query.pgm").string());
      }
      nlohmann::json record = {{"score", result.score},
                               {"label", result.label ? 1 : 0},
                               {"threshold", v_threshold},
                               {"query", v_query},
                               {"ref", v_ref}};
      std::cout << record.dump() << "\n";
      return kExitOk;
    });
  }

  if (*localize) {
    return guarded([&] {
      echo_run_header(seed, threads);
      const bupm::Model model = load_model(l_ckpt);
      const VerifyInputs in = prepare_pair(model, l_query, l_ref, l_query_size);
      const bupm::VerifyResult result = bupm::verify(model, in.query, in.ref);
      const std::optional<bupm::BoundingBox> box =
          bupm::localize_mask(result.m_r, in.ref_h, in.ref_w, l_mask_threshold);
      nlohmann::json record;
      record["query"] = l_query;
      record["ref"] = l_ref;
      record["score"] = result.score;
      record["found"] = box.has_value();
      if (box) {
        record["x0"] = box->x0;
        record["y0"] = box->y0;
        record["width"] = box->width;
        record["height"] = box->height;
        record["wrap"] = box->wrap;
      }
      if (!l_annotate.empty()) {
        bupm::Image annotated = bupm::load_image(l_ref);
        if (annotated.height != in.ref_h || annotated.width != in.ref_w) {
          annotated = bupm::resize_bilinear(annotated, in.ref_h, in.ref_w);
        }
        if (box) draw_box_outline(annotated, *box);
        bupm::save_image(annotated, l_annotate);
      }
      std::cout << record.dump() << "\n";
      return kExitOk;
    });
  }

  if (*evaluate) {
    return guarded([&] {
      echo_run_header(seed, threads);
      const bupm::Model model = load_model(e_ckpt);
      bupm::EvalOptions opt;
      opt.query_size = e_query_size;
      opt.base_dir = std::filesystem::path(e_data).parent_path().string();
      std::vector<bupm::ManifestRecord> records = bupm::load_manifest(e_data).records;
      if (e_split != "all") {
        std::erase_if(records, [&](const bupm::ManifestRecord& r) { return r.split != e_split; });
      }
      if (e_negatives) {
        std::vector<bupm::ManifestRecord> positives;
        for (const bupm::ManifestRecord& r : records) {
          if (r.label == 1) positives.push_back(r);
        }
        bupm::Rng rng = bupm::derive_rng(seed, "evaluate/negatives");
        const std::vector<bupm::ManifestRecord> negatives =
            bupm::build_negative_manifest(positives, e_min_km, rng);
        records.insert(records.end(), negatives.begin(), negatives.end());
      }
      const bupm::EvalReport report = bupm::evaluate_records(model, records, opt);
      bupm::write_eval_report(report, e_out);
      std::cout << nlohmann::json{{"auc", report.auc},
                                  {"average_precision", report.average_precision},
                                  {"n_pos", report.n_pos},
                                  {"n_neg", report.n_neg},
                                  {"excluded", report.excluded}}
                       .dump()
                << "\n";
      return kExitOk;
    });
  }

  // gradcheck
  return guarded([&] {
    gc_opt.first_seed = seed;
    echo_run_header(seed, threads);
    const std::vector<bupm::GradCheckResult> results = bupm::run_gradient_checks(gc_opt);
    bool all_pass = true;
    for (const bupm::GradCheckResult& r : results) {
      std::cout << r.to_line() << "\n";
      all_pass = all_pass && r.pass;
    }
    std::cout << (all_pass ? "gradcheck: all ops pass" : "gradcheck: FAILURES above") << "\n";
    return all_pass ? kExitOk : kExitNumeric;
  });
}
