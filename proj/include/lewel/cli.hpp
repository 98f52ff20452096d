#pragma once

// Implementations behind the `lewel` binary. Each command takes plain option
// structs (argv parsing lives in the tool's main), throws the library error
// types on failure, and writes everything it produces under its own output
// directory, starting with a snapshot of the fully resolved config so any run
// can be reproduced from its artifacts alone.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "lewel/gradcheck.hpp"
#include "lewel/image.hpp"
#include "lewel/train.hpp"

namespace lewel::cli {

// Exit-code table, part of the public contract:
// 0 success, 1 usage/config, 2 data, 3 numeric, 4 I/O.
inline int exit_code_for(const Error& e) {
  if (dynamic_cast<const ConfigError*>(&e) != nullptr) return 1;
  if (dynamic_cast<const DataError*>(&e) != nullptr) return 2;
  if (dynamic_cast<const IoError*>(&e) != nullptr) return 4;
  return 3;  // NumericError, ShapeError and other internal contract failures
}

template <typename F>
int run_guarded(F&& fn) {
  try {
    fn();
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 3;
  }
}

struct RunOptions {
  std::string config_path;             // optional TOML-syntax file
  std::vector<std::string> overrides;  // repeated --set key=value
  std::string out_dir = "out";
  int threads = 1;
  bool strict_deterministic = false;   // force single-thread numeric paths
};

inline void apply_runtime(const RunOptions& opt) {
  const int n = opt.strict_deterministic ? 1 : std::max(1, opt.threads);
  runtime::flags().num_threads = n;
  openblas_set_num_threads(n);
}

inline TrainConfig resolve_from(const RunOptions& opt) {
  const ConfigMap file =
      opt.config_path.empty() ? ConfigMap{} : parse_config_file(opt.config_path);
  return resolve_train_config(file, opt.overrides);
}

inline void write_config_snapshot(const std::string& out_dir, const TrainConfig& cfg) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError(cat("cannot create output directory ", out_dir, ": ", ec.message()));
  const auto path = (std::filesystem::path(out_dir) / "resolved_config.toml").string();
  std::ofstream out(path);
  if (!out) throw IoError(cat("cannot write ", path));
  out << canonical_config_text(cfg);
  if (!out) throw IoError(cat("short write on ", path));
}

// --- gen-data ---------------------------------------------------------------

inline void cmd_gen_data(const RunOptions& opt) {
  apply_runtime(opt);
  const TrainConfig cfg = resolve_from(opt);
  write_config_snapshot(opt.out_dir, cfg);
  namespace fs = std::filesystem;
  for (const char* split : {"train", "test"}) {
    const auto dir = (fs::path(opt.out_dir) / split).string();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError(cat("cannot create ", dir, ": ", ec.message()));
    const auto samples = generate(cfg.data, split);
    write_dataset(dir, samples);
    std::cout << split << ": " << samples.size() << " samples -> " << dir << '\n';
  }
}

// --- pretrain ----------------------------------------------------------------

inline void cmd_pretrain(const RunOptions& opt, const std::string& resume_from) {
  apply_runtime(opt);
  const TrainConfig cfg = resolve_from(opt);
  const auto result = pretrain(cfg, opt.out_dir, resume_from);
  const auto& last = result.epochs.back();
  std::cout << "epochs " << result.epochs.size() << "  total " << detail::fmt_double(last.total)
            << "  global " << detail::fmt_double(last.global_term) << "  aligned "
            << detail::fmt_double(last.aligned_term) << '\n'
            << "checkpoint: " << result.checkpoint_path << '\n';
}

// --- probe -------------------------------------------------------------------

// The config comes from the checkpoint itself; --set can still adjust the
// probe.* keys (anything else would describe a different pretraining run).
inline TrainConfig config_for_checkpoint(const Checkpoint& ck,
                                         const std::vector<std::string>& overrides) {
  const ConfigMap base = parse_config_text(ck.config_text, "<checkpoint>");
  TrainConfig cfg = resolve_train_config(base, overrides);
  const TrainConfig original = resolve_train_config(base);
  TrainConfig probe_only = original;
  probe_only.probe_epochs = cfg.probe_epochs;
  probe_only.probe_lr0 = cfg.probe_lr0;
  probe_only.probe_batch_size = cfg.probe_batch_size;
  probe_only.data_path = cfg.data_path;
  if (!(cfg == probe_only))
    throw ConfigError("probe: only probe.* keys and data.path may be overridden; "
                      "the rest is pinned by the checkpoint");
  return cfg;
}

inline void cmd_probe(const RunOptions& opt, const std::string& checkpoint_path) {
  apply_runtime(opt);
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  const TrainConfig cfg = config_for_checkpoint(ck, opt.overrides);
  write_config_snapshot(opt.out_dir, cfg);

  const auto train_split = detail::load_split(cfg, "train");
  const auto test_split = detail::load_split(cfg, "test");
  const auto result = linear_probe(cfg, ck, train_split, test_split);

  const auto csv_path = (std::filesystem::path(opt.out_dir) / "probe.csv").string();
  std::ofstream csv(csv_path);
  if (!csv) throw IoError(cat("cannot write ", csv_path));
  csv << "metric,value\n";
  csv << "top1," << detail::fmt_double(result.top1) << '\n';
  csv << "train_accuracy," << detail::fmt_double(result.train_accuracy) << '\n';
  for (std::size_t k = 0; k < result.per_class.size(); ++k)
    csv << "class_" << k << ',' << detail::fmt_double(result.per_class[k]) << '\n';
  if (!csv) throw IoError(cat("short write on ", csv_path));

  std::cout << "top1 " << detail::fmt_double(result.top1) << "  train "
            << detail::fmt_double(result.train_accuracy) << '\n';
}

// --- export-maps -------------------------------------------------------------

namespace detail_cli {

inline Tensor<float> nearest_upsample(const Tensor<float>& grid, std::size_t H, std::size_t W) {
  const std::size_t h = grid.size(0), w = grid.size(1);
  std::vector<float> out(H * W);
  const auto v = grid.data();
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) out[y * W + x] = v[(y * h / H) * w + (x * w / W)];
  return Tensor<float>::from_data({H, W}, std::move(out));
}

}  // namespace detail_cli

// One heatmap per alignment map and image: {image}_{k}.pgm at image
// resolution (nearest-neighbor) plus {image}_{k}_grid.pgm on the raw grid.
inline void cmd_export_maps(const RunOptions& opt, const std::string& checkpoint_path,
                            const std::string& images_dir) {
  apply_runtime(opt);
  const Checkpoint ck = load_checkpoint(checkpoint_path);
  const TrainConfig cfg = config_for_checkpoint(ck, opt.overrides);
  write_config_snapshot(opt.out_dir, cfg);
  auto net = restore_online_branch<float>(cfg, ck);

  namespace fs = std::filesystem;
  std::vector<fs::path> images;
  {
    std::error_code ec;
    fs::directory_iterator it(images_dir, ec);
    if (ec) throw IoError(cat("cannot read ", images_dir, ": ", ec.message()));
    for (const auto& entry : it)
      if (entry.is_regular_file() && entry.path().extension() == ".ppm")
        images.push_back(entry.path());
  }
  std::sort(images.begin(), images.end());
  if (images.empty()) throw DataError(cat("no .ppm images under ", images_dir));

  Rng map_rng = derive_rng(cfg.seed, "export-maps");
  std::size_t written = 0;
  for (const auto& path : images) {
    const auto img = load_ppm(path.string());
    const std::size_t H = img.size(1), W = img.size(2);
    if (H % 8 != 0 || W % 8 != 0)
      throw DataError(cat(path.string(), ": image is ", W, "x", H,
                          "; the encoder needs multiples of 8"));
    std::vector<float> data(img.data().begin(), img.data().end());
    const auto x = Tensor<float>::from_data({1, 3, H, W}, std::move(data));
    NoGradGuard guard;
    const auto out = net.forward(x, BnMode::EmaStats, /*training=*/false, /*with_aligned=*/true,
                                 &map_rng);
    const std::size_t d = out.maps.size(1), gh = out.maps.size(2), gw = out.maps.size(3);
    const auto maps = out.maps.data();
    const std::string stem = path.stem().string();
    for (std::size_t k = 0; k < d; ++k) {
      std::vector<float> plane(maps.begin() + static_cast<std::ptrdiff_t>(k * gh * gw),
                               maps.begin() + static_cast<std::ptrdiff_t>((k + 1) * gh * gw));
      const auto grid = Tensor<float>::from_data({gh, gw}, std::move(plane));
      save_heatmap_pgm((fs::path(opt.out_dir) / cat(stem, "_", k, "_grid.pgm")).string(), grid);
      save_heatmap_pgm((fs::path(opt.out_dir) / cat(stem, "_", k, ".pgm")).string(),
                       detail_cli::nearest_upsample(grid, H, W));
      written += 2;
    }
  }
  std::cout << images.size() << " images, " << written << " heatmaps -> " << opt.out_dir << '\n';
}

// --- gradcheck -----------------------------------------------------------------

inline void cmd_gradcheck(const RunOptions& opt, double tolerance = 1e-4) {
  apply_runtime(opt);
  write_config_snapshot(opt.out_dir, resolve_from(opt));
  const auto entries = gradient_battery();
  const auto csv_path = (std::filesystem::path(opt.out_dir) / "gradcheck.csv").string();
  std::ofstream csv(csv_path);
  if (!csv) throw IoError(cat("cannot write ", csv_path));
  csv << "op,max_rel_error\n";
  double worst = 0.0;
  for (const auto& e : entries) {
    std::cout << e.name << "  " << detail::fmt_double(e.max_rel) << '\n';
    csv << e.name << ',' << detail::fmt_double(e.max_rel) << '\n';
    worst = std::max(worst, e.max_rel);
  }
  if (!csv) throw IoError(cat("short write on ", csv_path));
  if (worst > tolerance)
    throw NumericError(cat("gradcheck: worst relative error ", worst, " exceeds ", tolerance));
}

// --- ablate ----------------------------------------------------------------------

inline void cmd_ablate(const RunOptions& opt, const std::string& axis) {
  apply_runtime(opt);
  const TrainConfig cfg = resolve_from(opt);
  write_config_snapshot(opt.out_dir, cfg);
  const auto rows = ablate(cfg, axis, opt.out_dir);
  for (const auto& row : rows) {
    std::cout << row.cell << "  " << (row.ok ? "ok" : "error") << "  top1 "
              << detail::fmt_double(row.probe_top1) << "  align "
              << detail::fmt_double(row.align_ratio);
    if (!row.ok) std::cout << "  (" << row.error << ')';
    std::cout << '\n';
  }
}

}  // namespace lewel::cli
