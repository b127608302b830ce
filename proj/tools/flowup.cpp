// Command-line front end: data generation, training, inference and the
// evaluation studies.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "flowup/flowup.hpp"

namespace fs = std::filesystem;
using namespace flowup;

namespace {

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad integer list '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("empty integer list");
  return out;
}

std::pair<std::int64_t, std::int64_t> parse_size(const std::string& s) {
  const auto x = s.find('x');
  if (x == std::string::npos) throw ConfigError("size must look like HxW, got '" + s + "'");
  try {
    return {std::stoll(s.substr(0, x)), std::stoll(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw ConfigError("size must look like HxW, got '" + s + "'");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) throw FormatError(FormatError::Kind::io, "cannot write " + path.string());
}

// Held-out split: the last eighth of the dataset (at least one sample) unless
// a separate validation directory is given.
std::pair<std::vector<SyntheticSample>, std::vector<SyntheticSample>> split_data(
    std::vector<SyntheticSample> all, const std::string& val_dir) {
  if (!val_dir.empty()) return {std::move(all), read_dataset(val_dir)};
  if (all.size() < 2) return {std::move(all), {}};
  const auto n_val = std::max<std::size_t>(1, all.size() / 8);
  std::vector<SyntheticSample> val(all.end() - static_cast<std::ptrdiff_t>(n_val), all.end());
  all.resize(all.size() - n_val);
  return {std::move(all), std::move(val)};
}

fs::path default_metrics_path(const fs::path& ckpt) {
  auto p = ckpt;
  p += ".metrics.csv";
  return p;
}

void print_eval(const std::string& label, const EvalResult& r) {
  std::cout << label << ": epe " << r.epe << ", edge epe " << r.edge_epe << " (" << r.edge_pixels
            << " px), high-detail epe " << r.high_detail_epe << '\n';
}

int cmd_gen_data(const std::string& out, int count, const std::string& size, int shapes,
                 std::uint64_t seed) {
  const auto [h, w] = parse_size(size);
  if (count < 1) throw ConfigError("--count must be positive");
  std::vector<SyntheticSample> samples(static_cast<std::size_t>(count));
  parallel_for(count, [&](std::int64_t i) {
    samples[static_cast<std::size_t>(i)] =
        gen_sample(mix_seed(seed, static_cast<std::uint64_t>(i)), h, w, shapes);
  });
  write_dataset(out, samples);
  std::cout << "wrote " << count << " samples of " << h << "x" << w << " to " << out << '\n';
  return 0;
}

struct TrainArgs {
  std::string data, val, mode = "shared", mask_sizes, out, metrics;
  bool inject = false, no_interp = false;
  int steps = 2000, batch = 4;
  std::uint64_t seed = 0;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig cfg;
  cfg.steps = a.steps;
  cfg.batch = a.batch;
  cfg.seed = a.seed;
  cfg.aug.interpolation_enabled = !a.no_interp;
  cfg.model.mode = parse_mode(a.mode);
  cfg.model.seed = a.seed;
  cfg.model.tcu.inject_features = a.inject;
  if (cfg.model.mode == WiringMode::decoupled_tcu) {
    if (!a.mask_sizes.empty()) {
      cfg.model.tcu.mask_sizes = parse_int_list(a.mask_sizes);
      cfg.model.tcu.steps = static_cast<int>(cfg.model.tcu.mask_sizes.size());
    }
    cfg.model.tcu.validate();
  } else if (!a.mask_sizes.empty()) {
    const auto m = parse_int_list(a.mask_sizes);
    if (m.size() != 1) throw ConfigError("--mask-sizes takes one value outside dc-tcu mode");
    cfg.model.baseline_mask = m[0];
  }
  auto [train_set, val_set] = split_data(read_dataset(a.data), a.val);
  const auto& first = train_set.front().image;
  cfg.aug.crop_height = std::min<std::int64_t>(cfg.aug.crop_height, first.dim(1));
  cfg.aug.crop_width = std::min<std::int64_t>(cfg.aug.crop_width, first.dim(2));

  std::cout << "training " << mode_name(cfg.model.mode) << " on " << train_set.size()
            << " samples, validating on " << val_set.size() << '\n';
  auto [model, result] = train(cfg, train_set, val_set, &std::cout);
  nlohmann::json meta{{"train", to_json(cfg)},
                      {"data", fs::absolute(a.data).string()},
                      {"val", a.val.empty() ? "" : fs::absolute(a.val).string()},
                      {"steps_done", result.steps}};
  save_checkpoint(a.out, model, meta);
  write_text(a.metrics.empty() ? default_metrics_path(a.out) : fs::path(a.metrics),
             metrics_csv(result.metrics));
  std::cout << "saved " << a.out << '\n';
  return 0;
}

int cmd_continue(const std::string& ckpt_path, int steps, const std::string& out_arg,
                 const std::string& data_arg, const std::string& metrics) {
  auto ck = load_checkpoint(ckpt_path);
  if (!ck.meta.contains("train")) throw ConfigError(ckpt_path + " carries no training config");
  const auto cfg = train_config_from_json(ck.meta.at("train"));
  const std::string data = data_arg.empty() ? ck.meta.value("data", "") : data_arg;
  if (data.empty()) throw ConfigError("no dataset: pass --data");
  auto [train_set, val_set] = split_data(read_dataset(data), ck.meta.value("val", ""));
  const auto before = val_set.empty() ? EvalResult{} : evaluate(ck.model, val_set, cfg.emulator, cfg.seed);
  const auto result = continue_without_interpolation(ck.model, cfg, train_set, val_set, steps, &std::cout);
  if (!val_set.empty()) {
    print_eval("before", before);
    print_eval("after", evaluate(ck.model, val_set, cfg.emulator, cfg.seed));
  }
  std::cout << "resize operations during continuation: " << result.aug_stats.resize_calls << '\n';
  fs::path out = out_arg;
  if (out.empty()) {
    out = fs::path(ckpt_path);
    out.replace_filename(out.stem().string() + "-noaug" + out.extension().string());
  }
  auto meta = ck.meta;
  meta["noaug_steps"] = result.steps;
  save_checkpoint(out, ck.model, meta);
  write_text(metrics.empty() ? default_metrics_path(out) : fs::path(metrics),
             metrics_csv(result.metrics));
  std::cout << "saved " << out.string() << '\n';
  return 0;
}

int cmd_upsample(const std::string& ckpt_path, const std::string& flow_path,
                 const std::string& image_path, const std::string& out) {
  const auto ck = load_checkpoint(ckpt_path);
  const auto flow = flo_read(flow_path);
  const auto image = ppm_read(image_path);
  const auto f = ck.model.config().factor;
  if (image.dim(1) != flow.dim(1) * f || image.dim(2) != flow.dim(2) * f) {
    throw DimensionError("image " + shape_str(image.shape()) + " is not " + std::to_string(f) +
                         "x the flow " + shape_str(flow.shape()));
  }
  NoGradGuard no_grad;
  flo_write(out, ck.model.predict(image, flow));
  std::cout << "wrote " << out << '\n';
  return 0;
}

std::vector<fs::path> flo_files(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".flo") files.push_back(e.path().filename());
  }
  std::sort(files.begin(), files.end());
  return files;
}

int cmd_eval_detail(const std::string& pred_dir, const std::string& gt_dir, const std::string& out) {
  const auto names = flo_files(gt_dir);
  if (names.empty()) throw ConfigError("no .flo files in " + gt_dir);
  BucketAccumulator acc;
  double epe_sum = 0.0;
  std::int64_t pixels = 0;
  for (const auto& name : names) {
    const auto gt = flo_read(fs::path(gt_dir) / name);
    const auto pred = flo_read(fs::path(pred_dir) / name);
    const auto e = epe(pred, gt);
    epe_sum += e.mean * static_cast<double>(e.map.numel());
    pixels += e.map.numel();
    acc.add(pred, gt);
  }
  const auto report = acc.report();
  write_text(out, report.to_csv());
  std::cout << report.to_text() << "pixel epe " << epe_sum / static_cast<double>(pixels)
            << ", patch-mean epe " << report.global_patch_mean_epe << " over " << names.size()
            << " fields\n";
  return 0;
}

int cmd_hull_study(const std::string& data, const std::string& masks_arg, int factor,
                   const std::string& out) {
  const auto masks = parse_int_list(masks_arg);
  const auto entries = read_index(data);
  std::vector<RepresentabilityResult> scenes(entries.size());
  std::vector<int> motions(entries.size());
  parallel_for(static_cast<std::int64_t>(entries.size()), [&](std::int64_t i) {
    const auto s = static_cast<std::size_t>(i);
    const auto flow = flo_read(entries[s].flow);
    scenes[s] = representability_study(flow, factor, masks);
    motions[s] = static_cast<int>(count_motions(flow));
  });
  write_text(out, representability_csv(scenes, motions));
  std::int64_t violations = 0;
  std::vector<double> mean(masks.size(), 0.0);
  for (const auto& r : scenes) {
    for (std::size_t i = 0; i < masks.size(); ++i) {
      mean[i] += r.fraction(i) / static_cast<double>(scenes.size());
      if (i > 0 && masks[i] > masks[i - 1] && r.fraction(i) < r.fraction(i - 1)) ++violations;
    }
  }
  for (std::size_t i = 0; i < masks.size(); ++i) {
    std::cout << "m=" << masks[i] << " mean representable fraction " << mean[i] << '\n';
  }
  std::cout << "monotonicity violations: " << violations << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& op) {
  const auto results = run_gradchecks(op);
  bool ok = true;
  std::cout << std::left << std::setw(18) << "op" << std::setw(14) << "max_rel_err" << std::setw(9)
            << "checked" << "skipped_kinks\n";
  for (const auto& r : results) {
    const bool pass = r.passed(kGradTolerance);
    ok = ok && pass;
    std::cout << std::setw(18) << r.name << std::setw(14) << std::setprecision(3) << r.max_rel_error
              << std::setw(9) << r.checked << std::setw(6) << r.skipped_kinks
              << (pass ? "ok" : "FAIL") << '\n';
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convex and attention-based flow upsampling"};
  app.require_subcommand(1);

  std::string gd_out, gd_size = "128x128";
  int gd_count = 16, gd_shapes = 4;
  std::uint64_t gd_seed = 0;
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic image/flow dataset");
  gen->add_option("--out", gd_out, "Output directory")->required();
  gen->add_option("--count", gd_count, "Number of samples");
  gen->add_option("--size", gd_size, "Extent HxW, multiples of 8");
  gen->add_option("--shapes", gd_shapes, "Moving shapes per scene");
  gen->add_option("--seed", gd_seed, "Seed");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a model on a dataset directory");
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--val", ta.val, "Validation dataset (default: hold out the last eighth)");
  tr->add_option("--mode", ta.mode, "Wiring: shared, dc or dc-tcu")
      ->check(CLI::IsMember({"shared", "dc", "dc-tcu"}));
  tr->add_option("--mask-sizes", ta.mask_sizes,
                 "Comma-separated mask sizes (one per TCU step, or the baseline mask)");
  tr->add_flag("--inject-features", ta.inject, "Inject encoder features at every TCU step");
  tr->add_option("--steps", ta.steps, "Optimizer steps");
  tr->add_option("--batch", ta.batch, "Batch size");
  tr->add_option("--seed", ta.seed, "Seed");
  tr->add_option("--out", ta.out, "Checkpoint path")->required();
  tr->add_option("--metrics", ta.metrics, "Metrics CSV (default: CKPT.metrics.csv)");
  tr->add_flag("--no-interp-aug", ta.no_interp, "Disable interpolating augmentation");

  std::string cn_ckpt, cn_out, cn_data, cn_metrics;
  int cn_steps = -1;
  auto* cont = app.add_subcommand("continue-noaug", "Continue training with crop/flip only");
  cont->add_option("--ckpt", cn_ckpt, "Checkpoint from train")->required();
  cont->add_option("--steps", cn_steps, "Steps (default: 40% of the original run)");
  cont->add_option("--out", cn_out, "Output checkpoint (default: CKPT-noaug)");
  cont->add_option("--data", cn_data, "Dataset (default: the one recorded in the checkpoint)");
  cont->add_option("--metrics", cn_metrics, "Metrics CSV (default: OUT.metrics.csv)");

  std::string up_ckpt, up_flow, up_image, up_out;
  auto* up = app.add_subcommand("upsample", "Upsample a low-resolution flow field");
  up->add_option("--ckpt", up_ckpt, "Checkpoint")->required();
  up->add_option("--flow-lr", up_flow, "Low-resolution .flo")->required();
  up->add_option("--image", up_image, "Full-resolution PPM image")->required();
  up->add_option("--out", up_out, "Output .flo")->required();

  std::string ev_pred, ev_gt, ev_out;
  auto* ev = app.add_subcommand("eval-detail", "Detail-bucket EPE report");
  ev->add_option("--pred", ev_pred, "Directory of predicted .flo files")->required();
  ev->add_option("--gt", ev_gt, "Directory of ground-truth .flo files")->required();
  ev->add_option("--out", ev_out, "Report CSV")->required();

  std::string hs_data, hs_masks = "3,5,7,9", hs_out;
  int hs_factor = 8;
  auto* hs = app.add_subcommand("hull-study", "Convex-hull representability per mask size");
  hs->add_option("--data", hs_data, "Dataset directory")->required();
  hs->add_option("--masks", hs_masks, "Comma-separated mask sizes");
  hs->add_option("--factor", hs_factor, "Downsampling factor");
  hs->add_option("--out", hs_out, "Study CSV")->required();

  std::string gc_op;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--op", gc_op, "Single op (default: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(gd_out, gd_count, gd_size, gd_shapes, gd_seed);
    if (*tr) return cmd_train(ta);
    if (*cont) return cmd_continue(cn_ckpt, cn_steps, cn_out, cn_data, cn_metrics);
    if (*up) return cmd_upsample(up_ckpt, up_flow, up_image, up_out);
    if (*ev) return cmd_eval_detail(ev_pred, ev_gt, ev_out);
    if (*hs) return cmd_hull_study(hs_data, hs_masks, hs_factor, hs_out);
    if (*gc) return cmd_gradcheck(gc_op);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
