// Command-line front end: dataset synthesis, HHA conversion, training,
// evaluation, the fusion ablation table, and plotting.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "fsfnet/checkpoint.hpp"
#include "fsfnet/config.hpp"
#include "fsfnet/data.hpp"
#include "fsfnet/hha.hpp"
#include "fsfnet/metrics.hpp"
#include "fsfnet/model.hpp"
#include "fsfnet/png_io.hpp"
#include "fsfnet/train.hpp"
#include "plot.hpp"

namespace fs = std::filesystem;
using fsfnet::fail;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open " + path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    fail(path + " is not valid JSON: " + std::string(e.what()));
  }
  return doc;
}

void write_json_file(const std::string& path, const json& doc) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write " + path);
  out << doc.dump(2) << "\n";
}

fsfnet::CameraIntrinsics read_intrinsics(const std::string& path) {
  const json doc = read_json_file(path);
  if (!doc.is_object()) fail(path + ": intrinsics must be a JSON object");
  for (const auto& [key, value] : doc.items()) {
    if (key != "fx" && key != "fy" && key != "cx" && key != "cy") {
      fail(path + ": unknown intrinsics key \"" + key + "\"");
    }
  }
  fsfnet::CameraIntrinsics k;
  for (const char* key : {"fx", "fy", "cx", "cy"}) {
    if (!doc.contains(key) || !doc.at(key).is_number()) {
      fail(path + ": intrinsics need numeric \"" + key + "\"");
    }
  }
  k.fx = doc.at("fx").get<double>();
  k.fy = doc.at("fy").get<double>();
  k.cx = doc.at("cx").get<double>();
  k.cy = doc.at("cy").get<double>();
  k.validate();
  return k;
}

// Shared by train/ablate: config file -> overrides -> resolved experiment.
fsfnet::ExperimentConfig resolve_experiment(
    const std::string& config_path, const std::vector<std::string>& overrides,
    const std::string& data_flag, const std::string& out_flag) {
  json flat = read_json_file(config_path);
  for (const std::string& assignment : overrides) {
    fsfnet::apply_override(flat, assignment);
  }
  if (!data_flag.empty()) flat["data_dir"] = data_flag;
  if (!out_flag.empty()) flat["out_dir"] = out_flag;
  fsfnet::ExperimentConfig cfg = fsfnet::experiment_from_json(flat);
  cfg.validate();
  return cfg;
}

// Loads the configured dataset (from disk when data_dir is set, otherwise
// generated in memory) and returns it with a provenance label.
std::vector<fsfnet::RgbdSample> gather_samples(
    const fsfnet::ExperimentConfig& cfg, std::string* source) {
  if (!cfg.data_dir.empty()) {
    if (source) *source = cfg.data_dir;
    return fsfnet::load_dataset(cfg.data_dir);
  }
  if (source) {
    *source = "synthesized (" + std::to_string(cfg.scene_count) +
              " scenes, seed " + std::to_string(cfg.scene.seed) + ")";
  }
  std::vector<fsfnet::RgbdSample> samples;
  samples.reserve(static_cast<std::size_t>(cfg.scene_count));
  for (int i = 0; i < cfg.scene_count; ++i) {
    samples.push_back(fsfnet::synth_scene(cfg.scene, i));
  }
  return samples;
}

std::vector<fsfnet::RgbdSample> pick(const std::vector<fsfnet::RgbdSample>& all,
                                     const std::vector<int>& idx) {
  std::vector<fsfnet::RgbdSample> out;
  out.reserve(idx.size());
  for (const int i : idx) out.push_back(all[static_cast<std::size_t>(i)]);
  return out;
}

int run_convert_hha(const std::string& depth_path,
                    const std::string& intrinsics_path,
                    const std::string& out_path) {
  const fsfnet::ImageU16 raw = fsfnet::read_png_gray16(depth_path);
  fsfnet::DepthMap d(raw.h, raw.w);
  for (int y = 0; y < raw.h; ++y) {
    for (int x = 0; x < raw.w; ++x) {
      const std::uint16_t mm = raw.at(y, x);
      if (mm > 0) d.set(y, x, mm / 1000.0);
    }
  }
  const fsfnet::CameraIntrinsics k = read_intrinsics(intrinsics_path);
  const fsfnet::Tensor<double> hha = fsfnet::encode_hha(d, k);

  fsfnet::ImageU8 img = fsfnet::make_image_u8(raw.h, raw.w, 3);
  for (int y = 0; y < raw.h; ++y) {
    for (int x = 0; x < raw.w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(hha.at(0, y, x, c), 0.0, 1.0);
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(255.0 * v));
      }
    }
  }
  fsfnet::write_png_u8(out_path, img);
  std::cout << "wrote " << out_path << " (" << raw.w << "x" << raw.h
            << ", 8-bit HHA)\n";
  return 0;
}

int run_synth(const fsfnet::SceneConfig& scene, const std::string& out_dir,
              int count, bool with_hha) {
  scene.validate();
  if (count < 1) fail("synth: --count must be >= 1");
  fsfnet::save_dataset(out_dir, scene, count, with_hha);
  std::cout << "wrote " << count << " scenes (" << scene.image_size << "x"
            << scene.image_size << ", " << scene.num_classes << " classes"
            << (with_hha ? ", with hha/" : "") << ") to " << out_dir << "\n";
  return 0;
}

int run_train(const std::string& config_path,
              const std::vector<std::string>& overrides,
              const std::string& data_flag, const std::string& out_flag) {
  const fsfnet::ExperimentConfig cfg =
      resolve_experiment(config_path, overrides, data_flag, out_flag);

  std::string source;
  const std::vector<fsfnet::RgbdSample> all = gather_samples(cfg, &source);
  const fsfnet::SplitIndices split = fsfnet::split_dataset(
      static_cast<int>(all.size()), cfg.val_fraction, cfg.scene.seed);
  const std::vector<fsfnet::RgbdSample> train_set = pick(all, split.train);
  const std::vector<fsfnet::RgbdSample> val_set = pick(all, split.val);
  if (train_set.empty()) fail("train: the training split is empty");

  fs::create_directories(cfg.out_dir);
  write_json_file((fs::path(cfg.out_dir) / "config.json").string(),
                  fsfnet::experiment_to_json(cfg));

  std::cout << "data: " << source << "  (" << train_set.size() << " train / "
            << val_set.size() << " val)\n";
  std::cout << "model: " << (cfg.model.use_scrf ? "+SCRF" : "sum-fusion")
            << (cfg.model.use_dfp ? " +DFP" : "") << ", "
            << cfg.model.num_classes << " classes, input "
            << cfg.model.input_size << "\n";

  fsfnet::FsfNet<float> model(cfg.model, cfg.train.seed);
  const int every = std::max(1, cfg.train.max_steps / 20);
  fsfnet::TrainResult result = fsfnet::train(
      model, cfg.train, train_set, val_set, cfg.out_dir,
      [&](const fsfnet::HistoryRow& row) {
        if (row.step % every == 0 || row.step == cfg.train.max_steps) {
          std::printf("step %*d/%d  lr %.6f  loss %.6f\n",
                      static_cast<int>(
                          std::to_string(cfg.train.max_steps).size()),
                      row.step, cfg.train.max_steps, row.lr, row.total_loss);
          std::fflush(stdout);
        }
      });

  if (result.halted) {
    std::cerr << "training halted: " << result.halt_reason << "\n"
              << "last good parameters kept at " << result.last_checkpoint
              << "\n";
    return 1;
  }
  std::cout << "finished " << result.steps_completed << " steps\n";
  if (!std::isnan(result.best_val_miou)) {
    std::printf("best validation mIoU %.4f (%s)\n", result.best_val_miou,
                result.best_checkpoint.c_str());
  }
  std::cout << "history: " << (fs::path(cfg.out_dir) / "history.csv").string()
            << "\nlast checkpoint: " << result.last_checkpoint << "\n";
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_dir,
             const std::string& out_path) {
  fsfnet::FsfNet<float> model = fsfnet::load_checkpoint(ckpt_path);
  const std::vector<fsfnet::RgbdSample> samples =
      fsfnet::load_dataset(data_dir);
  const fsfnet::ConfusionMatrix cm = fsfnet::evaluate(model, samples);

  json report = fsfnet::metrics_report(cm);
  report["checkpoint"] = ckpt_path;
  report["data_dir"] = data_dir;
  report["num_samples"] = samples.size();
  write_json_file(out_path, report);

  std::cout << "evaluated " << samples.size() << " samples from " << data_dir
            << "\n";
  std::printf("pixel accuracy %.4f\n", report.at("pixel_accuracy").get<double>());
  std::printf("mean IoU       %.4f\n", report.at("mean_iou").get<double>());
  const auto& per_class = report.at("per_class_iou");
  for (std::size_t c = 0; c < per_class.size(); ++c) {
    if (per_class[c].is_null()) {
      std::printf("  class %zu IoU    --  (absent)\n", c);
    } else {
      std::printf("  class %zu IoU %.4f\n", c, per_class[c].get<double>());
    }
  }
  std::cout << "report: " << out_path << "\n";
  return 0;
}

int run_ablate(const std::string& config_path,
               const std::vector<std::string>& overrides,
               const std::string& out_flag, int seeds) {
  const fsfnet::ExperimentConfig cfg =
      resolve_experiment(config_path, overrides, "", out_flag);

  std::string source;
  const std::vector<fsfnet::RgbdSample> all = gather_samples(cfg, &source);
  const fsfnet::SplitIndices split = fsfnet::split_dataset(
      static_cast<int>(all.size()), cfg.val_fraction, cfg.scene.seed);
  const std::vector<fsfnet::RgbdSample> train_set = pick(all, split.train);
  const std::vector<fsfnet::RgbdSample> test_set = pick(all, split.val);

  fs::create_directories(cfg.out_dir);
  write_json_file((fs::path(cfg.out_dir) / "config.json").string(),
                  fsfnet::experiment_to_json(cfg));

  std::cout << "data: " << source << "  (" << train_set.size() << " train / "
            << test_set.size() << " test)\n"
            << "running 4 variants x " << seeds << " seeds, "
            << cfg.train.max_steps << " steps each\n";

  const std::vector<fsfnet::AblationRow> rows = fsfnet::ablate(
      cfg.model, cfg.train, train_set, test_set, seeds, cfg.out_dir,
      [](const std::string& line) {
        std::cout << "  " << line << "\n";
        std::cout.flush();
      });

  std::cout << "\nvariant      mean mIoU   stddev   per-seed\n";
  for (const fsfnet::AblationRow& row : rows) {
    std::printf("%-11s  %.4f      %.4f  ", row.name.c_str(), row.miou.mean,
                row.miou.stddev);
    for (const double v : row.per_seed_miou) std::printf(" %.4f", v);
    std::printf("\n");
  }

  // Paired per-seed differences against the SUM baseline.
  json out_rows = json::array();
  for (const fsfnet::AblationRow& row : rows) {
    json r;
    r["name"] = row.name;
    r["use_scrf"] = row.use_scrf;
    r["use_dfp"] = row.use_dfp;
    r["per_seed_miou"] = row.per_seed_miou;
    r["mean_miou"] = row.miou.mean;
    r["stddev_miou"] = row.miou.stddev;
    if (&row != &rows.front()) {
      std::vector<double> diff(row.per_seed_miou.size());
      for (std::size_t i = 0; i < diff.size(); ++i) {
        diff[i] = row.per_seed_miou[i] - rows.front().per_seed_miou[i];
      }
      const fsfnet::MeanStd d = fsfnet::mean_and_sample_std(diff);
      std::printf("%s - SUM: mean %+.4f  stddev %.4f  mean-stddev %+.4f\n",
                  row.name.c_str(), d.mean, d.stddev, d.mean - d.stddev);
      r["diff_vs_sum_mean"] = d.mean;
      r["diff_vs_sum_stddev"] = d.stddev;
    }
    out_rows.push_back(r);
  }

  json doc;
  doc["rows"] = out_rows;
  doc["seeds"] = seeds;
  doc["train_size"] = train_set.size();
  doc["test_size"] = test_set.size();
  const std::string table_path =
      (fs::path(cfg.out_dir) / "ablation.json").string();
  write_json_file(table_path, doc);
  std::cout << "table: " << table_path << "\n";
  return 0;
}

int run_plot(const std::string& history_path, const std::string& report_path,
             const std::string& out_path) {
  if (history_path.empty() == report_path.empty()) {
    fail("plot: pass exactly one of --history or --report");
  }
  if (!history_path.empty()) {
    const std::vector<fsfnet::HistoryRow> history =
        fsfnet::read_history_csv(history_path);
    fsfnet::plot::render_history(history, out_path);
  } else {
    fsfnet::plot::render_report(read_json_file(report_path), out_path);
  }
  std::cout << "wrote " << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "fsfnet — two-stream RGB-D semantic segmentation laboratory\n"
      "(SCRF cross-modality fusion, DFP detail propagation, pyramid "
      "supervision)"};
  app.require_subcommand(1);
  int rc = 0;

  // convert-hha
  std::string ch_depth, ch_intrinsics, ch_out;
  CLI::App* convert = app.add_subcommand(
      "convert-hha",
      "Encode a 16-bit millimeter depth PNG as an 8-bit 3-channel HHA PNG");
  convert->add_option("--depth", ch_depth, "16-bit grayscale depth PNG (mm)")
      ->required();
  convert
      ->add_option("--intrinsics", ch_intrinsics,
                   "JSON file with fx, fy, cx, cy")
      ->required();
  convert->add_option("--out", ch_out, "output PNG path")->required();
  convert->callback(
      [&] { rc = run_convert_hha(ch_depth, ch_intrinsics, ch_out); });

  // synth
  fsfnet::SceneConfig scene;
  std::string sy_out;
  int sy_count = 80;
  bool sy_with_hha = false;
  CLI::App* synth = app.add_subcommand(
      "synth", "Materialize a synthetic RGB-D dataset to disk");
  synth->add_option("--out", sy_out, "dataset directory")->required();
  synth->add_option("--count", sy_count, "number of scenes (default 80)");
  synth->add_option("--seed", scene.seed, "generator seed (default 1)");
  synth->add_option("--size", scene.image_size,
                    "square image size in pixels (default 64)");
  synth->add_option("--classes", scene.num_classes,
                    "number of classes (default 6)");
  synth->add_option("--min-shapes", scene.min_shapes,
                    "minimum shapes per scene (default 2)");
  synth->add_option("--max-shapes", scene.max_shapes,
                    "maximum shapes per scene (default 5)");
  synth->add_option("--noise", scene.rgb_noise_sigma,
                    "RGB Gaussian noise sigma (default 0.02)");
  synth->add_option("--depth-min", scene.depth_min,
                    "nearest shape depth in meters (default 0.5)");
  synth->add_option("--depth-max", scene.depth_max,
                    "background depth in meters (default 5.0)");
  synth->add_flag("--with-hha", sy_with_hha,
                  "also write precomputed hha/ images");
  synth->callback([&] { rc = run_synth(scene, sy_out, sy_count, sy_with_hha); });

  // train
  std::string tr_config, tr_data, tr_out;
  std::vector<std::string> tr_overrides;
  CLI::App* train_cmd =
      app.add_subcommand("train", "Train a model from a flat JSON config");
  train_cmd->add_option("--config", tr_config, "flat JSON experiment config")
      ->required();
  train_cmd->add_option("--override", tr_overrides,
                        "key=value applied on top of the config (repeatable)");
  train_cmd->add_option("--data", tr_data,
                        "dataset directory (overrides data_dir)");
  train_cmd->add_option("--out", tr_out,
                        "run directory (overrides out_dir)");
  train_cmd->callback(
      [&] { rc = run_train(tr_config, tr_overrides, tr_data, tr_out); });

  // eval
  std::string ev_ckpt, ev_data, ev_out = "report.json";
  CLI::App* eval_cmd = app.add_subcommand(
      "eval", "Evaluate a checkpoint on a dataset and write a metrics report");
  eval_cmd->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", ev_data, "dataset directory")->required();
  eval_cmd->add_option("--out", ev_out,
                       "report JSON path (default report.json)");
  eval_cmd->callback([&] { rc = run_eval(ev_ckpt, ev_data, ev_out); });

  // ablate
  std::string ab_config, ab_out;
  std::vector<std::string> ab_overrides;
  int ab_seeds = 5;
  CLI::App* ablate_cmd = app.add_subcommand(
      "ablate",
      "Train SUM / +DFP / +SCRF / +SCRF+DFP across seeds and tabulate mIoU");
  ablate_cmd->add_option("--config", ab_config, "flat JSON experiment config")
      ->required();
  ablate_cmd->add_option("--seeds", ab_seeds, "seeds per variant (default 5)");
  ablate_cmd->add_option("--override", ab_overrides,
                         "key=value applied on top of the config (repeatable)");
  ablate_cmd->add_option("--out", ab_out,
                         "output directory (overrides out_dir)");
  ablate_cmd->callback(
      [&] { rc = run_ablate(ab_config, ab_overrides, ab_out, ab_seeds); });

  // plot
  std::string pl_history, pl_report, pl_out;
  CLI::App* plot_cmd = app.add_subcommand(
      "plot", "Render a training history CSV or a metrics report to PNG");
  plot_cmd->add_option("--history", pl_history, "history.csv from a run");
  plot_cmd->add_option("--report", pl_report, "report.json from eval");
  plot_cmd->add_option("--out", pl_out, "output PNG path")->required();
  plot_cmd->callback([&] { rc = run_plot(pl_history, pl_report, pl_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
