#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sparsevox/common.hpp"
#include "sparsevox/eval.hpp"
#include "sparsevox/network.hpp"
#include "sparsevox/nifti.hpp"
#include "sparsevox/roi.hpp"
#include "sparsevox/sparse_ops.hpp"
#include "sparsevox/sparse_tensor.hpp"
#include "sparsevox/sparsify.hpp"
#include "sparsevox/volume.hpp"

namespace sparsevox {

// ---------------------------------------------------------------------------
// Pipeline configuration: one JSON document drives the stage-1 fold loop and
// the cropping stage.
// ---------------------------------------------------------------------------

struct PipelineConfig {
  std::string data_dir;
  std::string out_dir;
  HuRange hu_range{-30, 350};  // default soft-tissue window; configurable
  int factor = 3;
  UNetConfig unet = UNetConfig::tiny();
  TrainConfig train;
  std::uint64_t fold_seed = 0;
  int folds = 10;
  int margins_max = 10;

  void validate() const {
    if (factor < 1) throw ConfigError("quantization factor must be >= 1");
    if (folds < 1) throw ConfigError("fold count must be >= 1");
    if (data_dir.empty()) throw ConfigError("data_dir is required");
    if (out_dir.empty()) throw ConfigError("out_dir is required");
    if (!std::filesystem::exists(data_dir))
      throw ConfigError("data_dir does not exist: " + data_dir);
  }
};

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
  j = {{"data_dir", c.data_dir}, {"out_dir", c.out_dir},
       {"hu_range", c.hu_range}, {"factor", c.factor},
       {"unet", c.unet},         {"train", c.train},
       {"fold_seed", c.fold_seed}, {"folds", c.folds},
       {"margins_max", c.margins_max}};
}
inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
  if (j.contains("data_dir")) j.at("data_dir").get_to(c.data_dir);
  if (j.contains("out_dir")) j.at("out_dir").get_to(c.out_dir);
  if (j.contains("hu_range")) j.at("hu_range").get_to(c.hu_range);
  if (j.contains("factor")) j.at("factor").get_to(c.factor);
  if (j.contains("unet")) j.at("unet").get_to(c.unet);
  if (j.contains("train")) j.at("train").get_to(c.train);
  if (j.contains("fold_seed")) j.at("fold_seed").get_to(c.fold_seed);
  if (j.contains("folds")) j.at("folds").get_to(c.folds);
  if (j.contains("margins_max")) j.at("margins_max").get_to(c.margins_max);
}

// ---------------------------------------------------------------------------
// Dataset discovery: *.raw (JSON-header raw pairs) and *.nii / *.nii.gz in
// data_dir, skipping *_seg* label siblings. Case id = file stem.
// ---------------------------------------------------------------------------

struct CaseFile {
  std::string id;
  std::string path;
  VolumeFormat format;
};

inline std::vector<CaseFile> discover_cases(const std::string& data_dir) {
  std::vector<CaseFile> cases;
  for (const auto& e : std::filesystem::directory_iterator(data_dir)) {
    if (!e.is_regular_file()) continue;
    const std::string name = e.path().filename().string();
    if (name.find("_seg") != std::string::npos) continue;
    std::string id;
    VolumeFormat fmt;
    if (name.ends_with(".nii") || name.ends_with(".nii.gz")) {
      fmt = VolumeFormat::nifti;
      id = name.substr(0, name.find(".nii"));
    } else if (name.ends_with(".raw")) {
      fmt = VolumeFormat::raw;
      id = name.substr(0, name.size() - 4);
    } else {
      continue;
    }
    cases.push_back({id, e.path().string(), fmt});
  }
  std::sort(cases.begin(), cases.end(),
            [](const CaseFile& a, const CaseFile& b) { return a.id < b.id; });
  if (cases.empty())
    throw DataError("no volumes (*.raw, *.nii, *.nii.gz) found in " + data_dir);
  return cases;
}

// ---------------------------------------------------------------------------
// Stage-1 sample preparation: threshold, tensorize, quantize, binarize.
// ---------------------------------------------------------------------------

template <typename Real>
Sample<Real> prepare_sample(const DenseVolume& v, const HuRange& range,
                            int factor) {
  const SparseVoxels vox = apply_range(v, range);
  auto [t, labels] = from_voxels<Real>(vox, 0, range);
  QuantizationPolicy policy;
  policy.factor = factor;
  auto [qt, qlabels] = quantize(t, policy, labels);
  for (auto& l : qlabels) l = l != 0 ? 1 : 0;
  return {std::move(qt), std::move(qlabels)};
}

// ---------------------------------------------------------------------------
// run_stage1: per fold, sparsify -> quantize -> train -> predict the test
// part; pooled Table-2-shaped report plus a manifest under out_dir. A fold
// failure is recorded in the manifest and other folds continue.
//
// folds == 1 is the smoke path: train on everything (no validation split)
// and evaluate on everything.
// ---------------------------------------------------------------------------

struct Stage1Result {
  ConfusionCounts pooled;
  std::vector<ConfusionCounts> per_fold;
  int failed_folds = 0;
};

template <typename Real>
Stage1Result run_stage1(const PipelineConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);

  const auto cases = discover_cases(cfg.data_dir);
  std::map<std::string, DenseVolume> volumes;
  std::map<std::string, Sample<Real>> samples;
  for (const auto& c : cases) {
    DenseVolume v = load_volume(c.path, c.format);
    if (!v.has_labels())
      throw DataError("stage 1 requires labeled volumes; missing labels for " +
                      c.id);
    samples.emplace(c.id, prepare_sample<Real>(v, cfg.hu_range, cfg.factor));
    volumes.emplace(c.id, std::move(v));
  }

  FoldPlan plan;
  if (cfg.folds == 1) {
    Fold f;
    for (const auto& c : cases) {
      f.train.push_back(c.id);
      f.test.push_back(c.id);
    }
    plan.seed = cfg.fold_seed;
    plan.folds.push_back(std::move(f));
  } else {
    std::vector<std::string> ids;
    for (const auto& c : cases) ids.push_back(c.id);
    plan = make_folds(ids, cfg.fold_seed, cfg.folds);
  }

  nlohmann::json manifest = {
      {"format", "sparsevox-run-v1"},
      {"config", cfg},
      {"precision", sizeof(Real) == 4 ? "float32" : "float64"},
      {"fold_plan", plan},
      {"inputs", nlohmann::json::array()},
      {"folds", nlohmann::json::array()},
  };
  for (const auto& c : cases)
    manifest["inputs"].push_back(
        {{"id", c.id}, {"path", c.path}, {"hash", content_hash(c.path)}});

  Stage1Result result;
  std::vector<ConfusionCounts> ok_folds;
  for (std::size_t f = 0; f < plan.folds.size(); ++f) {
    const std::string fold_dir =
        cfg.out_dir + "/fold-" + std::to_string(f);
    nlohmann::json fold_entry = {{"fold", f}, {"status", "ok"}};
    try {
      fs::create_directories(fold_dir);
      fs::create_directories(fold_dir + "/preds");

      std::vector<Sample<Real>> train_set, val_set;
      for (const auto& id : plan.folds[f].train)
        train_set.push_back(samples.at(id));
      for (const auto& id : plan.folds[f].val)
        val_set.push_back(samples.at(id));

      UNet<Real> net(cfg.unet, cfg.train.seed + f);
      Adam<Real> opt(net.param_refs(), cfg.train);
      TrainConfig tc = cfg.train;
      tc.seed = cfg.train.seed + 1000003 * (f + 1);

      std::ofstream progress(fold_dir + "/trainlog.jsonl");
      TrainResult tr =
          train(net, opt, train_set, val_set, tc, &progress);
      if (tr.diverged)
        throw NumericError("training diverged (NaN loss) in fold " +
                           std::to_string(f));

      Checkpoint<Real> meta;
      meta.unet_config = cfg.unet;
      meta.train_config = tc;
      meta.epoch = static_cast<int>(tr.epochs.size());
      meta.rng_state = tr.rng_state;
      save_checkpoint(fold_dir + "/checkpoint", net, &opt, meta);

      ConfusionCounts fold_counts;
      for (const auto& id : plan.folds[f].test) {
        const Sample<Real>& s = samples.at(id);
        const auto pred = predict(net, s.tensor);
        fold_counts += confusion(pred, s.labels);
        nlohmann::json pj = {{"case", id},
                             {"classes", pred},
                             {"stride", s.tensor.stride}};
        std::ofstream ps(fold_dir + "/preds/" + id + ".json");
        ps << pj.dump() << "\n";
      }
      EvalReport fold_report{fold_counts};
      std::ofstream rs(fold_dir + "/report.json");
      rs << fold_report.to_table().dump(2) << "\n";
      ok_folds.push_back(fold_counts);
      fold_entry["counts"] = fold_counts;
    } catch (const std::exception& e) {
      fold_entry["status"] = "failed";
      fold_entry["error"] = e.what();
      ++result.failed_folds;
    }
    manifest["folds"].push_back(fold_entry);
  }

  if (!ok_folds.empty()) {
    result.pooled = aggregate(ok_folds);
    result.per_fold = ok_folds;
    EvalReport pooled_report{result.pooled};
    std::ofstream rs(cfg.out_dir + "/report.json");
    rs << pooled_report.to_table().dump(2) << "\n";
    std::ofstream cs(cfg.out_dir + "/report.csv");
    cs << pooled_report.to_csv();
  }
  std::ofstream ms(cfg.out_dir + "/manifest.json");
  ms << manifest.dump(2) << "\n";
  return result;
}

// ---------------------------------------------------------------------------
// run_crop_stage: for each fold checkpoint, predict the fold's test cases,
// extract per-case ROIs, crop the original volumes, and emit the per-margin
// Table-3-shaped CSV. Empty-prediction cases fall back to the full volume
// and are logged in the crop manifest.
// ---------------------------------------------------------------------------

inline std::string crop_stats_csv(const std::vector<CropStats>& stats) {
  std::string s =
      "margin,signal_kept_2d,background_removed_2d,signal_kept_slices,"
      "background_removed_slices\n";
  char buf[160];
  for (std::size_t m = 0; m < stats.size(); ++m) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f,%.6f\n", m,
                  stats[m].signal_kept_2d, stats[m].background_removed_2d,
                  stats[m].signal_kept_slices,
                  stats[m].background_removed_slices);
    s += buf;
  }
  return s;
}

template <typename Real>
std::vector<CropStats> run_crop_stage(const PipelineConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;

  std::ifstream ms(cfg.out_dir + "/manifest.json");
  if (!ms)
    throw DataError("stage-1 manifest not found under " + cfg.out_dir +
                    "; run stage 1 first");
  nlohmann::json manifest;
  ms >> manifest;

  const auto cases = discover_cases(cfg.data_dir);
  std::map<std::string, CaseFile> by_id;
  for (const auto& c : cases) by_id.emplace(c.id, c);

  std::vector<RoiSpec> rois;
  std::vector<DenseVolume> truths;
  nlohmann::json crop_manifest = {{"cases", nlohmann::json::array()}};

  const auto& folds = manifest.at("folds");
  const auto& plan = manifest.at("fold_plan").at("folds");
  for (std::size_t f = 0; f < folds.size(); ++f) {
    if (folds[f].at("status") != "ok") continue;
    const std::string fold_dir = cfg.out_dir + "/fold-" + std::to_string(f);
    fs::create_directories(fold_dir + "/roi");
    fs::create_directories(fold_dir + "/cropped");

    std::unique_ptr<UNet<Real>> net;
    load_checkpoint<Real>(fold_dir + "/checkpoint", net);

    for (const auto& idj : plan[f].at("test")) {
      const std::string id = idj.get<std::string>();
      const CaseFile& cf = by_id.at(id);
      DenseVolume v = load_volume(cf.path, cf.format);
      Sample<Real> s = prepare_sample<Real>(v, cfg.hu_range, cfg.factor);
      const auto pred = predict(*net, s.tensor);

      RoiSpec roi;
      bool fallback = false;
      try {
        roi = extract_roi(s.tensor, pred, cfg.factor, v.dims, /*margin=*/0);
      } catch (const DataError&) {
        roi = full_volume_roi(v.dims, cfg.factor);
        fallback = true;
      }
      {
        nlohmann::json rj = roi;
        std::ofstream rs(fold_dir + "/roi/" + id + ".json");
        rs << rj.dump(2) << "\n";
      }
      const CropResult cr = crop(v, roi);
      save_volume(cr.volume, fold_dir + "/cropped/" + id + ".raw",
                  VolumeFormat::raw);
      crop_manifest["cases"].push_back(
          {{"case", id},
           {"fold", f},
           {"fallback_full_volume", fallback},
           {"offset", cr.offset}});
      rois.push_back(std::move(roi));
      truths.push_back(std::move(v));
    }
  }
  if (rois.empty())
    throw DataError("no successful folds with test cases to crop");

  std::vector<const DenseVolume*> truth_ptrs;
  for (const auto& t : truths) truth_ptrs.push_back(&t);
  const auto stats = crop_stats(rois, truth_ptrs, cfg.margins_max);

  std::ofstream cs(cfg.out_dir + "/crop_stats.csv");
  cs << crop_stats_csv(stats);
  std::ofstream cms(cfg.out_dir + "/crop_manifest.json");
  cms << crop_manifest.dump(2) << "\n";
  return stats;
}

// ---------------------------------------------------------------------------
// Consolidated summary over one run directory. Missing pieces are listed as
// warnings, not fatal.
// ---------------------------------------------------------------------------

inline nlohmann::json make_report(const std::string& run_dir) {
  nlohmann::json summary = {{"run_dir", run_dir},
                            {"warnings", nlohmann::json::array()}};
  auto try_load = [&](const std::string& rel) -> nlohmann::json {
    std::ifstream is(run_dir + "/" + rel);
    if (!is) {
      summary["warnings"].push_back("missing: " + rel);
      return nullptr;
    }
    nlohmann::json j;
    is >> j;
    return j;
  };

  summary["manifest"] = try_load("manifest.json");
  summary["stage1_report"] = try_load("report.json");
  {
    std::ifstream is(run_dir + "/crop_stats.csv");
    if (is) {
      std::string line, all;
      while (std::getline(is, line)) all += line + "\n";
      summary["crop_stats_csv"] = all;
    } else {
      summary["warnings"].push_back("missing: crop_stats.csv");
    }
  }

  // Timing echo: mean seconds per epoch across fold train logs.
  if (!summary["manifest"].is_null()) {
    double total_sec = 0.0;
    std::size_t n_epochs = 0;
    for (std::size_t f = 0;; ++f) {
      std::ifstream ts(run_dir + "/fold-" + std::to_string(f) +
                       "/trainlog.jsonl");
      if (!ts) break;
      std::string line;
      while (std::getline(ts, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        total_sec += j.value("seconds", 0.0);
        ++n_epochs;
      }
    }
    if (n_epochs > 0)
      summary["mean_seconds_per_epoch"] =
          total_sec / static_cast<double>(n_epochs);
  }
  return summary;
}

inline std::string report_markdown(const nlohmann::json& summary) {
  std::string md = "# Run summary\n\n";
  if (!summary["stage1_report"].is_null()) {
    const auto& r = summary["stage1_report"];
    md += "## Stage 1 (ROI finder)\n\n";
    md += "| class | precision | recall | f1-score | support |\n";
    md += "|---|---|---|---|---|\n";
    for (const auto& row : r.at("rows")) {
      char buf[200];
      std::snprintf(buf, sizeof(buf), "| %s | %.3f | %.3f | %.3f | %llu |\n",
                    row.at("class").get<std::string>().c_str(),
                    row.at("precision").get<double>(),
                    row.at("recall").get<double>(),
                    row.at("f1_score").get<double>(),
                    static_cast<unsigned long long>(
                        row.at("support").get<std::uint64_t>()));
      md += buf;
    }
    char buf[120];
    std::snprintf(buf, sizeof(buf), "\naccuracy: %.4f, signal Dice: %.4f\n",
                  r.at("accuracy").get<double>(),
                  r.at("dice_signal").get<double>());
    md += buf;
  }
  if (summary.contains("crop_stats_csv")) {
    md += "\n## Cropping effectiveness\n\n```\n";
    md += summary["crop_stats_csv"].get<std::string>();
    md += "```\n";
  }
  if (summary.contains("mean_seconds_per_epoch")) {
    char buf[80];
    std::snprintf(buf, sizeof(buf), "\nmean seconds per epoch: %.3f\n",
                  summary["mean_seconds_per_epoch"].get<double>());
    md += buf;
  }
  if (!summary["warnings"].empty()) {
    md += "\n## Warnings\n\n";
    for (const auto& w : summary["warnings"])
      md += "- " + w.get<std::string>() + "\n";
  }
  return md;
}

}  // namespace sparsevox
