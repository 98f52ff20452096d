// Entry point: argv parsing only; the actual work lives in lewel/cli.hpp so
// tests can call the commands directly.

#include <malloc.h>

#include <string>

#include "CLI11.hpp"
#include "lewel/cli.hpp"

int main(int argc, char** argv) {
  // Training allocates and frees large per-step buffers; without these caps
  // glibc bounces them through mmap/munmap and system time dominates.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);

  CLI::App app{"Desk-scale self-supervised learning with learned spatial alignment"};
  app.require_subcommand(1);

  const auto add_common = [](CLI::App* sub, lewel::cli::RunOptions& opt, bool with_config) {
    if (with_config)
      sub->add_option("--config", opt.config_path, "TOML-syntax config file");
    sub->add_option("--set", opt.overrides,
                    "override a config key as section.key=value (repeatable)");
    sub->add_option("--out", opt.out_dir, "output directory (default: out)");
    sub->add_option("--threads", opt.threads, "BLAS worker threads (default: 1)");
    sub->add_flag("--strict-deterministic", opt.strict_deterministic,
                  "force single-thread numeric paths");
  };

  lewel::cli::RunOptions pretrain_opt;
  std::string resume_from;
  auto* pretrain = app.add_subcommand("pretrain", "train the two-branch model");
  add_common(pretrain, pretrain_opt, true);
  pretrain->add_option("--resume", resume_from, "checkpoint to resume from (epoch boundary)");

  lewel::cli::RunOptions probe_opt;
  std::string probe_checkpoint;
  auto* probe = app.add_subcommand("probe", "linear-probe a frozen checkpoint");
  add_common(probe, probe_opt, false);  // the config is pinned by the checkpoint
  probe->add_option("--checkpoint", probe_checkpoint, "pretraining checkpoint")->required();

  lewel::cli::RunOptions maps_opt;
  std::string maps_checkpoint, images_dir;
  auto* maps = app.add_subcommand("export-maps", "write alignment heatmaps as PGM");
  add_common(maps, maps_opt, false);
  maps->add_option("--checkpoint", maps_checkpoint, "pretraining checkpoint")->required();
  maps->add_option("--images", images_dir, "directory of .ppm images")->required();

  lewel::cli::RunOptions grad_opt;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every op");
  add_common(grad, grad_opt, true);

  lewel::cli::RunOptions ablate_opt;
  std::string axis;
  auto* ablate = app.add_subcommand("ablate", "sweep one config axis and collect metrics");
  add_common(ablate, ablate_opt, true);
  ablate->add_option("--axis", axis, "beta | h | c | map_source")->required();

  lewel::cli::RunOptions gen_opt;
  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset to disk");
  add_common(gen, gen_opt, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // usage errors share the config exit code
  }

  return lewel::cli::run_guarded([&] {
    if (pretrain->parsed()) {
      lewel::cli::cmd_pretrain(pretrain_opt, resume_from);
    } else if (probe->parsed()) {
      lewel::cli::cmd_probe(probe_opt, probe_checkpoint);
    } else if (maps->parsed()) {
      lewel::cli::cmd_export_maps(maps_opt, maps_checkpoint, images_dir);
    } else if (grad->parsed()) {
      lewel::cli::cmd_gradcheck(grad_opt);
    } else if (ablate->parsed()) {
      lewel::cli::cmd_ablate(ablate_opt, axis);
    } else if (gen->parsed()) {
      lewel::cli::cmd_gen_data(gen_opt);
    }
  });
}
