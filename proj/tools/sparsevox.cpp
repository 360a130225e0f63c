// Command-line front end for the sparse CT segmentation pipeline.
//
// Exit codes: 0 success, 2 configuration error, 3 data error,
// 4 numeric divergence.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sparsevox/eval.hpp"
#include "sparsevox/network.hpp"
#include "sparsevox/nifti.hpp"
#include "sparsevox/phantom_suite.hpp"
#include "sparsevox/pipeline.hpp"
#include "sparsevox/roi.hpp"
#include "sparsevox/sparse_tensor.hpp"
#include "sparsevox/sparsify.hpp"
#include "sparsevox/volume.hpp"

namespace sv = sparsevox;
namespace fs = std::filesystem;

namespace {

void check_threads_env() {
  if (const char* env = std::getenv("SPARSEVOX_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1)
      throw sv::ConfigError("SPARSEVOX_THREADS must be a positive integer");
    // Execution is currently single-threaded; any cap is honored trivially.
  }
}

sv::HuRange parse_range(const std::string& s) {
  const auto colon = s.find(':');
  if (colon == std::string::npos)
    throw sv::ConfigError("range must be LO:HI, got '" + s + "'");
  sv::HuRange r;
  r.lo = std::stoi(s.substr(0, colon));
  r.hi = std::stoi(s.substr(colon + 1));
  if (r.lo > r.hi) throw sv::ConfigError("range LO must be <= HI");
  return r;
}

// "64M" -> 64000000, plain numbers pass through.
std::uint64_t parse_budget(const std::string& s) {
  if (s.empty()) throw sv::ConfigError("empty budget");
  if (s.back() == 'M' || s.back() == 'm')
    return std::stoull(s.substr(0, s.size() - 1)) * 1000000ULL;
  return std::stoull(s);
}

nlohmann::json load_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw sv::DataError("cannot open: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw sv::DataError("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

int cmd_phantom_gen(const std::string& spec_path, const std::string& out_dir,
                    int count, std::uint64_t seed, double jitter,
                    const std::string& format) {
  sv::PhantomSpec base = load_json(spec_path).get<sv::PhantomSpec>();
  base.seed = seed;
  fs::create_directories(out_dir);
  const auto suite = sv::make_phantom_suite(base, count, jitter);
  for (int i = 0; i < count; ++i) {
    const sv::DenseVolume v = sv::generate_phantom(suite[i]);
    char name[64];
    std::snprintf(name, sizeof(name), "case_%04d", i);
    const std::string ext = format == "nifti" ? ".nii.gz" : ".raw";
    sv::save_volume(v, out_dir + "/" + name + ext,
                    format == "nifti" ? sv::VolumeFormat::nifti
                                      : sv::VolumeFormat::raw);
  }
  std::cout << "wrote " << count << " phantoms to " << out_dir << "\n";
  return 0;
}

int cmd_histogram(const std::string& data_dir, const std::string& out_path,
                  int bin_width) {
  const auto cases = sv::discover_cases(data_dir);
  sv::HuHistogram h = sv::HuHistogram::make(bin_width);
  for (const auto& c : cases) h.accumulate(sv::load_volume(c.path, c.format));
  nlohmann::json j = h;
  std::ofstream os(out_path);
  if (!os) throw sv::DataError("cannot write: " + out_path);
  os << j.dump() << "\n";
  std::cout << "histogram over " << cases.size() << " cases: signal total "
            << h.signal_total() << ", background total "
            << h.background_total() << "\n";
  return 0;
}

// One summary row per budget, with Wilson intervals and the corpus
// voxel-reduction factor (total basis; median per-case basis when per-case
// totals are available).
int cmd_optimize_range(const std::string& hist_path,
                       const std::vector<std::string>& budgets, bool per_case,
                       const std::string& out_path) {
  const sv::HuHistogram h = load_json(hist_path).get<sv::HuHistogram>();
  const std::uint64_t sig_total = h.signal_total();
  const std::uint64_t bkg_total = h.background_total();

  nlohmann::json rows = nlohmann::json::array();
  std::string csv =
      "max_voxels,min_hu,max_hu,signal_loss_pct,signal_loss_ci_lo,"
      "signal_loss_ci_hi,bkg_loss_pct,bkg_loss_ci_lo,bkg_loss_ci_hi\n";
  for (const auto& bs : budgets) {
    const std::uint64_t budget = parse_budget(bs);
    const sv::RangeResult r = sv::optimize_range(h, budget, per_case);
    const auto sig_lost = static_cast<std::uint64_t>(
        std::llround(r.stats.signal_loss * static_cast<double>(sig_total)));
    const auto bkg_lost = static_cast<std::uint64_t>(std::llround(
        r.stats.background_removed * static_cast<double>(bkg_total)));
    const auto sci = sv::wilson_interval(sig_lost, sig_total);
    const auto bci = sv::wilson_interval(bkg_lost, bkg_total);
    const double reduction =
        r.stats.voxels_kept == 0
            ? 0.0
            : static_cast<double>(sig_total + bkg_total) / r.stats.voxels_kept;

    nlohmann::json row = {
        {"max_voxels", budget},
        {"min_hu", r.range.lo},
        {"max_hu", r.range.hi},
        {"signal_loss_pct", 100.0 * r.stats.signal_loss},
        {"signal_loss_ci", {100.0 * sci.first, 100.0 * sci.second}},
        {"bkg_loss_pct", 100.0 * r.stats.background_removed},
        {"bkg_loss_ci", {100.0 * bci.first, 100.0 * bci.second}},
        {"interval_method", "wilson"},
        {"voxels_kept", r.stats.voxels_kept},
        {"reduction_factor_total", reduction},
    };
    rows.push_back(row);
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "%llu,%d,%d,%.4f,%.4f,%.4f,%.4f,%.4f,%.4f\n",
                  static_cast<unsigned long long>(budget), r.range.lo,
                  r.range.hi, 100.0 * r.stats.signal_loss, 100.0 * sci.first,
                  100.0 * sci.second, 100.0 * r.stats.background_removed,
                  100.0 * bci.first, 100.0 * bci.second);
    csv += buf;
  }

  if (!out_path.empty()) {
    std::ofstream os(out_path);
    if (!os) throw sv::DataError("cannot write: " + out_path);
    if (out_path.ends_with(".csv"))
      os << csv;
    else
      os << rows.dump(2) << "\n";
  }
  std::cout << rows.dump(2) << "\n";
  return 0;
}

template <typename Real>
int cmd_sparsify(const std::string& in_path, const std::string& range_str,
                 const std::string& out_path) {
  const sv::HuRange range = parse_range(range_str);
  const sv::DenseVolume v =
      sv::load_volume(in_path, sv::format_for(in_path));
  const sv::SparseVoxels vox = sv::apply_range(v, range);
  auto [t, labels] = sv::from_voxels<Real>(vox, 0, range);
  sv::save_sparse(t, out_path);
  nlohmann::json stats = {
      {"voxels_total", v.voxel_count()},
      {"voxels_kept", vox.size()},
      {"kept_fraction",
       v.voxel_count() == 0
           ? 0.0
           : static_cast<double>(vox.size()) / v.voxel_count()},
      {"range", range}};
  std::ofstream os(out_path + ".stats.json");
  os << stats.dump(2) << "\n";
  std::cout << stats.dump(2) << "\n";
  return 0;
}

sv::PipelineConfig merged_config(const std::string& config_path,
                                 const std::string& data_dir,
                                 const std::string& out_dir, int folds,
                                 int epochs, std::uint64_t seed,
                                 const std::string& range_str, int factor) {
  sv::PipelineConfig cfg;
  if (!config_path.empty()) cfg = load_json(config_path).get<sv::PipelineConfig>();
  // Flags win over the config file.
  if (!data_dir.empty()) cfg.data_dir = data_dir;
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (folds >= 0) cfg.folds = folds;
  if (epochs >= 0) cfg.train.epochs = epochs;
  if (seed != UINT64_MAX) {
    cfg.fold_seed = seed;
    cfg.train.seed = seed;
  }
  if (!range_str.empty()) cfg.hu_range = parse_range(range_str);
  if (factor >= 1) cfg.factor = factor;
  return cfg;
}

template <typename Real>
int cmd_train_roi(const sv::PipelineConfig& cfg) {
  const sv::Stage1Result r = sv::run_stage1<Real>(cfg);
  sv::EvalReport report{r.pooled};
  std::cout << report.to_csv();
  if (r.failed_folds > 0)
    std::cerr << r.failed_folds << " fold(s) failed; see manifest.json\n";
  return 0;
}

template <typename Real>
int cmd_predict(const std::string& ckpt, const std::string& in_path,
                const std::string& range_str, int factor,
                const std::string& out_path) {
  const sv::HuRange range = parse_range(range_str);
  sv::DenseVolume v = sv::load_volume(in_path, sv::format_for(in_path));
  // Prediction does not need labels; attach a dummy grid so the sample
  // builder's label plumbing is a no-op when they are absent.
  const sv::SparseVoxels vox = sv::apply_range(v, range);
  auto [t, labels] = sv::from_voxels<Real>(vox, 0, range);
  sv::QuantizationPolicy policy;
  policy.factor = factor;
  auto [qt, qlabels] = sv::quantize(t, policy, labels);

  std::unique_ptr<sv::UNet<Real>> net;
  sv::load_checkpoint<Real>(ckpt, net);
  const auto pred = sv::predict(*net, qt);

  nlohmann::json pj = {{"case", fs::path(in_path).stem().string()},
                       {"classes", pred},
                       {"stride", qt.stride},
                       {"dims", v.dims}};
  std::ofstream os(out_path);
  if (!os) throw sv::DataError("cannot write: " + out_path);
  os << pj.dump() << "\n";
  std::cout << "predicted " << pred.size() << " sites -> " << out_path << "\n";
  return 0;
}

int cmd_crop(const std::string& in_path, const std::string& roi_path,
             int margin, const std::string& out_path) {
  const sv::DenseVolume v =
      sv::load_volume(in_path, sv::format_for(in_path));
  sv::RoiSpec roi = load_json(roi_path).get<sv::RoiSpec>();
  if (margin > 0) roi = roi.expanded(margin);
  const sv::CropResult cr = sv::crop(v, roi);
  sv::save_volume(cr.volume, out_path, sv::format_for(out_path));
  nlohmann::json meta = {{"offset", cr.offset},
                         {"dims", cr.volume.dims},
                         {"source", in_path}};
  std::ofstream os(out_path + ".crop.json");
  os << meta.dump(2) << "\n";
  std::cout << meta.dump(2) << "\n";
  return 0;
}

template <typename Real>
int cmd_crop_stats(const sv::PipelineConfig& cfg) {
  const auto stats = sv::run_crop_stage<Real>(cfg);
  std::cout << sv::crop_stats_csv(stats);
  return 0;
}

template <typename Real>
int cmd_evaluate(const std::string& pred_path, const std::string& truth_path,
                 const std::string& range_str, int factor,
                 const std::string& out_path) {
  const nlohmann::json pj = load_json(pred_path);
  const auto pred = pj.at("classes").get<std::vector<std::uint8_t>>();

  const sv::HuRange range = parse_range(range_str);
  const sv::DenseVolume v =
      sv::load_volume(truth_path, sv::format_for(truth_path));
  if (!v.has_labels())
    throw sv::DataError("evaluate requires a labeled truth volume");
  const sv::Sample<Real> s = sv::prepare_sample<Real>(v, range, factor);
  const sv::ConfusionCounts c = sv::confusion(pred, s.labels);
  sv::EvalReport report{c};
  if (!out_path.empty()) {
    std::ofstream os(out_path);
    if (out_path.ends_with(".csv"))
      os << report.to_csv();
    else
      os << report.to_table().dump(2) << "\n";
  }
  std::cout << report.to_csv();
  return 0;
}

int cmd_report(const std::string& run_dir, const std::string& out_path) {
  const nlohmann::json summary = sv::make_report(run_dir);
  const std::string md = sv::report_markdown(summary);
  if (!out_path.empty()) {
    std::ofstream js(out_path + ".json");
    js << summary.dump(2) << "\n";
    std::ofstream ms(out_path + ".md");
    ms << md;
  }
  std::cout << md;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse submanifold CT segmentation pipeline"};
  app.require_subcommand(1);

  std::string precision = "float32";
  app.add_option("--precision", precision, "float32 or float64")
      ->check(CLI::IsMember({"float32", "float64"}));

  // phantom-gen
  std::string pg_spec, pg_out, pg_format = "raw";
  int pg_count = 1;
  std::uint64_t pg_seed = 0;
  double pg_jitter = 0.0;
  auto* pg = app.add_subcommand("phantom-gen", "generate synthetic phantoms");
  pg->add_option("--spec", pg_spec, "phantom spec JSON")->required();
  pg->add_option("--out", pg_out, "output directory")->required();
  pg->add_option("--count", pg_count, "number of cases");
  pg->add_option("--seed", pg_seed, "base seed");
  pg->add_option("--jitter", pg_jitter, "organ center jitter (voxels)");
  pg->add_option("--format", pg_format)->check(CLI::IsMember({"raw", "nifti"}));

  // histogram
  std::string hg_data, hg_out = "histogram.json";
  int hg_bin = 10;
  auto* hg = app.add_subcommand("histogram", "per-class HU histogram");
  hg->add_option("--data", hg_data, "directory of labeled volumes")->required();
  hg->add_option("--out", hg_out, "output JSON path");
  hg->add_option("--bin-width", hg_bin, "bin width in HU");

  // optimize-range
  std::string or_hist, or_out;
  std::vector<std::string> or_budgets;
  bool or_per_case = false;
  auto* orc = app.add_subcommand("optimize-range",
                                 "budget-optimal HU range search");
  orc->add_option("--histogram", or_hist, "histogram JSON")->required();
  orc->add_option("--budget", or_budgets, "max kept voxels, e.g. 64M")
      ->required();
  orc->add_flag("--per-case", or_per_case, "budget applies per scan");
  orc->add_option("--out", or_out, "write table (.json or .csv)");

  // sparsify
  std::string sp_in, sp_range = "-30:350", sp_out;
  auto* sp = app.add_subcommand("sparsify", "threshold a volume to sparse");
  sp->add_option("--in", sp_in, "input volume")->required();
  sp->add_option("--range", sp_range, "HU range LO:HI");
  sp->add_option("--out", sp_out, "output sparse tensor path")->required();

  // train-roi
  std::string tr_config, tr_data, tr_out, tr_range;
  int tr_folds = -1, tr_epochs = -1, tr_factor = -1;
  std::uint64_t tr_seed = UINT64_MAX;
  auto* tr = app.add_subcommand("train-roi", "stage-1 fold loop");
  tr->add_option("--config", tr_config, "pipeline config JSON");
  tr->add_option("--data", tr_data, "data directory");
  tr->add_option("--out", tr_out, "output run directory");
  tr->add_option("--folds", tr_folds, "fold count (1 = smoke path)");
  tr->add_option("--epochs", tr_epochs, "training epochs");
  tr->add_option("--seed", tr_seed, "fold and training seed");
  tr->add_option("--range", tr_range, "HU range LO:HI");
  tr->add_option("--factor", tr_factor, "quantization factor");

  // predict
  std::string pr_ckpt, pr_in, pr_range = "-30:350", pr_out;
  int pr_factor = 3;
  auto* pr = app.add_subcommand("predict", "per-site classes for one volume");
  pr->add_option("--checkpoint", pr_ckpt, "checkpoint path (no extension)")
      ->required();
  pr->add_option("--in", pr_in, "input volume")->required();
  pr->add_option("--range", pr_range, "HU range LO:HI");
  pr->add_option("--factor", pr_factor, "quantization factor");
  pr->add_option("--out", pr_out, "output prediction JSON")->required();

  // crop
  std::string cr_in, cr_roi, cr_out;
  int cr_margin = 0;
  auto* cr = app.add_subcommand("crop", "crop a volume to an ROI");
  cr->add_option("--in", cr_in, "input volume")->required();
  cr->add_option("--roi", cr_roi, "RoiSpec JSON")->required();
  cr->add_option("--margin", cr_margin, "extra margin (voxels/slices)");
  cr->add_option("--out", cr_out, "output volume path")->required();

  // crop-stats
  std::string cs_config, cs_data, cs_run, cs_range;
  int cs_margins = -1, cs_factor = -1;
  auto* cs = app.add_subcommand("crop-stats",
                                "cropping stage + per-margin table");
  cs->add_option("--config", cs_config, "pipeline config JSON");
  cs->add_option("--data", cs_data, "data directory");
  cs->add_option("--run", cs_run, "stage-1 run directory");
  cs->add_option("--margins", cs_margins, "max margin (rows 0..N)");
  cs->add_option("--range", cs_range, "HU range LO:HI");
  cs->add_option("--factor", cs_factor, "quantization factor");

  // evaluate
  std::string ev_pred, ev_truth, ev_range = "-30:350", ev_out;
  int ev_factor = 3;
  auto* ev = app.add_subcommand("evaluate", "segmentation metrics table");
  ev->add_option("--pred", ev_pred, "prediction JSON")->required();
  ev->add_option("--truth", ev_truth, "labeled truth volume")->required();
  ev->add_option("--range", ev_range, "HU range LO:HI");
  ev->add_option("--factor", ev_factor, "quantization factor");
  ev->add_option("--out", ev_out, "write table (.json or .csv)");

  // report
  std::string rp_run, rp_out;
  auto* rp = app.add_subcommand("report", "consolidated run summary");
  rp->add_option("--run", rp_run, "run directory")->required();
  rp->add_option("--out", rp_out, "output basename (.json/.md appended)");

  try {
    app.parse(argc, argv);
    check_threads_env();
    const bool f64 = precision == "float64";

    if (pg->parsed())
      return cmd_phantom_gen(pg_spec, pg_out, pg_count, pg_seed, pg_jitter,
                             pg_format);
    if (hg->parsed()) return cmd_histogram(hg_data, hg_out, hg_bin);
    if (orc->parsed())
      return cmd_optimize_range(or_hist, or_budgets, or_per_case, or_out);
    if (sp->parsed())
      return f64 ? cmd_sparsify<double>(sp_in, sp_range, sp_out)
                 : cmd_sparsify<float>(sp_in, sp_range, sp_out);
    if (tr->parsed()) {
      const auto cfg = merged_config(tr_config, tr_data, tr_out, tr_folds,
                                     tr_epochs, tr_seed, tr_range, tr_factor);
      return f64 ? cmd_train_roi<double>(cfg) : cmd_train_roi<float>(cfg);
    }
    if (pr->parsed())
      return f64 ? cmd_predict<double>(pr_ckpt, pr_in, pr_range, pr_factor,
                                       pr_out)
                 : cmd_predict<float>(pr_ckpt, pr_in, pr_range, pr_factor,
                                      pr_out);
    if (cr->parsed()) return cmd_crop(cr_in, cr_roi, cr_margin, cr_out);
    if (cs->parsed()) {
      auto cfg = merged_config(cs_config, cs_data, cs_run, -1, -1, UINT64_MAX,
                               cs_range, cs_factor);
      if (cs_margins >= 0) cfg.margins_max = cs_margins;
      return f64 ? cmd_crop_stats<double>(cfg) : cmd_crop_stats<float>(cfg);
    }
    if (ev->parsed())
      return f64 ? cmd_evaluate<double>(ev_pred, ev_truth, ev_range,
                                        ev_factor, ev_out)
                 : cmd_evaluate<float>(ev_pred, ev_truth, ev_range, ev_factor,
                                       ev_out);
    if (rp->parsed()) return cmd_report(rp_run, rp_out);
    return 2;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const sv::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const sv::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const sv::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
