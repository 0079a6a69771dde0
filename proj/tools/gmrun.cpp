// Command-line front end for the three-step training recipe: data
// generation, stage-by-stage runs, evaluation, the language-ID ablation
// grid, and metrics plotting.
//
// Exit codes: 0 success, 2 input/configuration error, 3 numeric error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gm/pipeline.hpp"

namespace fs = std::filesystem;

namespace {

nlohmann::json load_json(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw gm::IoError("cannot open config " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw gm::InputError("config " + path.string() + ": " + e.what());
  }
}

template <typename R>
int dispatch(const std::string& cmd, const nlohmann::json& raw, gm::RunConfig cfg,
             const fs::path& out) {
  using gm::Stage;
  if (cmd == "gen-data") {
    auto sc = cfg.corpus;
    for (auto& n : sc.counts)
      n = std::max<std::int64_t>(
          1, static_cast<std::int64_t>(std::llround(double(n) * cfg.corpus_fraction)));
    sc.validate();
    gm::gen_corpus(sc, gm::derive_seed(cfg.seed, "corpus"), out / "data");
    std::cout << "wrote corpus to " << (out / "data").string() << "\n";
    return 0;
  }
  if (cmd == "pretrain-ssl") {
    gm::run_recipe<R>(cfg, out, Stage::Ssl);
  } else if (cmd == "leap") {
    gm::run_recipe<R>(cfg, out, Stage::Leap);
  } else if (cmd == "finetune") {
    gm::run_recipe<R>(cfg, out, Stage::Finetune);
  } else if (cmd == "evaluate") {
    if (raw.contains("checkpoint")) {
      auto ckpt = gm::load_checkpoint<R>(raw.at("checkpoint").get<std::string>());
      const auto resolved = cfg.resolved();
      auto corpus = gm::gen_corpus(resolved.corpus, gm::derive_seed(cfg.seed, "corpus"));
      auto report = gm::evaluate(ckpt.params, corpus);
      fs::create_directories(out);
      std::ofstream jf(out / "report.json");
      jf << nlohmann::json(report).dump(2) << "\n";
      std::ofstream cf(out / "report.csv");
      cf << gm::wer_report_csv(report);
      if (!jf || !cf) throw gm::IoError("cannot write report");
      std::cout << "overall WER " << report.overall() << "%\n";
    } else {
      auto result = gm::run_recipe<R>(cfg, out);
      std::cout << "overall WER " << result.report.overall() << "%\n";
    }
  } else if (cmd == "recipe") {
    auto result = gm::run_recipe<R>(cfg, out);
    std::cout << "overall WER " << result.report.overall() << "%\n";
  } else if (cmd == "ablate") {
    auto report = gm::ablate<R>(cfg, out);
    for (const auto& red : report["lang_id_reductions"])
      std::cout << red["method"].template get<std::string>()
                << ": lang-ID reduces overall WER by "
                << red["relative_reduction"].template get<double>() << "%\n";
  } else {
    throw gm::UsageError("unknown command " + cmd);
  }
  return 0;
}

int run(const std::string& cmd, const fs::path& config_path, const fs::path& out,
        std::optional<std::uint64_t> seed) {
  auto raw = load_json(config_path);
  if (cmd == "plot") {
    std::vector<fs::path> files;
    for (const auto& f : raw.value("metrics_files", std::vector<std::string>{}))
      files.push_back(f);
    gm::plot_metrics(files, out);
    std::cout << "plotted " << files.size() << " metrics file(s)\n";
    return 0;
  }
  gm::RunConfig cfg;
  try {
    cfg = raw.get<gm::RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw gm::InputError("config " + config_path.string() + ": " + e.what());
  }
  if (seed) cfg.seed = *seed;
  if (cmd != "gen-data") cfg.validate();
  if (cfg.profile == "fast") return dispatch<float>(cmd, raw, cfg, out);
  return dispatch<double>(cmd, raw, cfg, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gradmeta training toolkit"};
  app.require_subcommand(1);

  const std::vector<std::string> commands = {"gen-data", "pretrain-ssl", "leap", "finetune",
                                             "evaluate", "recipe",       "ablate", "plot"};
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  for (const auto& name : commands) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "override the config seed");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    return run(app.get_subcommands().front()->get_name(), config_path, out_dir, seed);
  } catch (const gm::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  } catch (const gm::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const gm::UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const gm::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  }
}
