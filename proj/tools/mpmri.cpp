// Command-line entry point: every pipeline stage as a subcommand driven by a
// TOML config. Exit codes: 0 success, 1 domain error (message names the
// error case), 2 usage error. Logs are JSON lines on stderr.
#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <optional>

#include "mpmri/pipeline.hpp"

namespace {

void log_line(std::initializer_list<std::pair<std::string, nlohmann::json>> fields) {
  nlohmann::json j;
  for (const auto& [k, v] : fields) j[k] = v;
  std::cerr << j.dump() << std::endl;
}

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
};

void add_common(CLI::App* sub, CommonArgs& args, bool config_required) {
  auto* opt = sub->add_option("-c,--config", args.config_path, "TOML config file");
  if (config_required) opt->required();
  sub->add_option("--set", args.overrides, "override a config key, e.g. --set search.budget=5")
      ->take_all();
  sub->add_option("--seed", args.seed, "override the seed (beats config and MPMRI_SEED)");
  sub->add_option("--jobs", args.jobs, "worker threads for per-patient stages");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"prostate mpMRI malignancy pipeline"};
  app.require_subcommand(1);

  CommonArgs args;
  auto* cmd_phantom = app.add_subcommand("phantom-gen", "generate a synthetic cohort (uses [phantom], [paths])");
  auto* cmd_preprocess =
      app.add_subcommand("preprocess", "resample and bias-correct a cohort (uses [preprocess], [paths])");
  auto* cmd_dataset =
      app.add_subcommand("build-dataset", "crop and pair slices into zone datasets (uses [dataset], [paths])");
  auto* cmd_search =
      app.add_subcommand("search", "architecture search plus final training (uses [search], [train], [dataset])");
  auto* cmd_train = app.add_subcommand("train", "train detectors with the saved or default architecture "
                                                "(uses [train], [dataset])");
  auto* cmd_predict = app.add_subcommand("predict", "score preprocessed patients (uses [triage], [paths])");
  auto* cmd_report =
      app.add_subcommand("report", "write report bundles with curves and CAM overlays (uses [triage], [paths])");
  auto* cmd_selftest = app.add_subcommand("selftest", "run the invariant suite on a tiny built-in phantom");

  for (auto* sub : {cmd_phantom, cmd_preprocess, cmd_dataset, cmd_search, cmd_train, cmd_predict, cmd_report})
    add_common(sub, args, true);
  add_common(cmd_selftest, args, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const auto t0 = std::chrono::steady_clock::now();
  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    mpmri::RunConfig cfg;
    if (!args.config_path.empty()) cfg = mpmri::load_config(args.config_path, args.overrides);
    if (args.seed) cfg.seed = *args.seed;
    if (args.jobs) cfg.jobs = *args.jobs;
    log_line({{"event", "start"}, {"stage", stage}, {"seed", cfg.seed}, {"jobs", cfg.jobs}});

    if (stage == "phantom-gen") {
      const auto manifest = mpmri::run_phantom_gen(cfg);
      log_line({{"event", "cohort"}, {"entries", manifest.entries.size()}});
    } else if (stage == "preprocess") {
      const auto manifest = mpmri::run_preprocess(cfg);
      log_line({{"event", "preprocessed"}, {"entries", manifest.entries.size()}});
    } else if (stage == "build-dataset") {
      mpmri::run_build_dataset(cfg);
    } else if (stage == "search") {
      const auto outcomes = mpmri::run_search_stage(cfg, [](const mpmri::TrialRecord& t) {
        log_line({{"event", "trial"},
                  {"trial_id", t.trial_id},
                  {"objective", t.objective},
                  {"wall_seconds", t.wall_seconds}});
      });
      for (const auto& o : outcomes)
        log_line({{"event", "model"},
                  {"zone", mpmri::to_string(o.zone)},
                  {"val_auc", o.val_auc},
                  {"best_trial_id", o.best_trial_id},
                  {"trials_run", o.trials_run}});
    } else if (stage == "train") {
      for (const auto& o : mpmri::run_train_stage(cfg))
        log_line({{"event", "model"}, {"zone", mpmri::to_string(o.zone)}, {"val_auc", o.val_auc}});
    } else if (stage == "predict") {
      const auto preds = mpmri::run_predict_stage(cfg);
      log_line({{"event", "predicted"}, {"patients", preds.size()}});
    } else if (stage == "report") {
      mpmri::run_report_stage(cfg);
    } else if (stage == "selftest") {
      mpmri::run_selftest(std::cout);
    }

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log_line({{"event", "done"}, {"stage", stage}, {"wall_seconds", secs}});
    return 0;
  } catch (const mpmri::PipelineError& e) {
    log_line({{"event", "error"}, {"stage", stage}, {"error", mpmri::to_string(e.code())}, {"message", e.what()}});
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    log_line({{"event", "error"}, {"stage", stage}, {"error", "Unexpected"}, {"message", e.what()}});
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
}
