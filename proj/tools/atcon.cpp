// atcon: data generation, source training, adaptation, evaluation, ablation
// and embedding export from the command line.
//
// Every command accepts --config FILE and repeated --set key=value; inline
// values override the file, which overrides the built-in defaults. Failures
// print a single "atcon: error: <kind>: <message>" line to stderr.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "atcon/checkpoint.hpp"
#include "atcon/config.hpp"
#include "atcon/pipeline.hpp"
#include "atcon/synthdata.hpp"

namespace fs = std::filesystem;
using namespace atcon;

namespace {

struct IoError : Error {
  using Error::Error;
};

struct ConfigSource {
  std::string file;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "key = value configuration file");
    cmd->add_option("--set", sets, "inline key=value override (repeatable)");
  }

  RunConfig load() const {
    RunConfig cfg;
    if (!file.empty()) {
      std::ifstream in(file);
      if (!in) throw IoError("cannot open config file " + file);
      apply_config(cfg, in, file);
    }
    for (const auto& s : sets) apply_assignment(cfg, s, "--set");
    cfg.validate();
    return cfg;
  }
};

void require_file(const std::string& path, const char* flag) {
  if (!fs::is_regular_file(path)) throw IoError(std::string(flag) + ": no such file " + path);
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

// Sidecar files next to an output: <out>.config, <out>.metrics.csv, ...
fs::path sidecar(const fs::path& out, const std::string& suffix) { return fs::path(out.string() + suffix); }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

std::string one_line(std::string s) {
  for (auto& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Source-free temporal-consistency video domain adaptation on synthetic data"};
  app.require_subcommand(1);

  ConfigSource gen_cfg, train_cfg, adapt_cfg, eval_cfg, ablate_cfg, export_cfg;
  std::string out, data, model, target, variant, variants, seeds, level = "overall";

  auto* gen = app.add_subcommand("gen-data", "write source.jsonl and target.jsonl");
  gen_cfg.attach(gen);
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train-source", "train a source model");
  train_cfg.attach(train);
  train->add_option("--data", data, "labeled source dataset")->required();
  train->add_option("--out", out, "checkpoint path")->required();

  auto* adapt = app.add_subcommand("adapt", "adapt a source model to unlabeled target data");
  adapt_cfg.attach(adapt);
  adapt->add_option("--source-model", model, "source checkpoint")->required();
  adapt->add_option("--target-data", target, "target dataset")->required();
  adapt->add_option("--variant", variant, "objective variant");
  adapt->add_option("--out", out, "adapted checkpoint path")->required();

  auto* eval = app.add_subcommand("eval", "top-1 accuracy of a checkpoint on a labeled dataset");
  eval_cfg.attach(eval);
  eval->add_option("--model", model, "checkpoint")->required();
  eval->add_option("--data", data, "labeled dataset")->required();

  auto* ablate = app.add_subcommand("ablate", "variant x seed accuracy grid");
  ablate_cfg.attach(ablate);
  ablate->add_option("--variants", variants, "comma-separated variant names")->required();
  ablate->add_option("--seeds", seeds, "comma-separated seeds")->required();
  ablate->add_option("--out", out, "results CSV")->required();

  auto* exp = app.add_subcommand("export-embeddings", "write eval-mode features as CSV");
  export_cfg.attach(exp);
  exp->add_option("--model", model, "checkpoint")->required();
  exp->add_option("--data", data, "dataset")->required();
  exp->add_option("--level", level, "local | overall")->check(CLI::IsMember({"local", "overall"}));
  exp->add_option("--out", out, "CSV path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "atcon: error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (*gen) {
      const auto cfg = gen_cfg.load();
      const auto [source, tgt] = generate_domain_pair(cfg.data);
      const fs::path dir(out);
      write_file(dir / "source.jsonl", dataset_to_string(source));
      write_file(dir / "target.jsonl", dataset_to_string(tgt));
      write_file(dir / "config", emit_config(cfg));
      std::cout << "wrote " << source.videos.size() << " source and " << tgt.videos.size() << " target videos to "
                << dir.string() << "\n";
    } else if (*train) {
      const auto cfg = train_cfg.load();
      require_file(data, "--data");
      const auto ds = read_dataset(data);
      const auto result = train_source(ds, cfg);
      write_file(out, checkpoint_to_string(result.model));
      write_file(sidecar(out, ".metrics.csv"), metrics_csv(result.metrics));
      write_file(sidecar(out, ".timing.csv"), timing_csv(result.metrics));
      write_file(sidecar(out, ".config"), emit_config(cfg));
      std::cout << "source top1=" << detail::fmt(evaluate(result.model, ds).top1) << "\n";
    } else if (*adapt) {
      auto cfg = adapt_cfg.load();
      if (!variant.empty()) set_config_value(cfg, "variant", variant);
      require_file(model, "--source-model");
      require_file(target, "--target-data");
      const auto src = load_checkpoint(model);
      const auto ds = read_dataset(target);
      const auto result = adapt_target(src, ds, cfg);
      write_file(out, checkpoint_to_string(result.model));
      write_file(sidecar(out, ".metrics.csv"), metrics_csv(result.metrics));
      write_file(sidecar(out, ".timing.csv"), timing_csv(result.metrics));
      write_file(sidecar(out, ".config"), emit_config(cfg));
      std::cout << "adapted variant=" << to_string(cfg.variant) << "\n";
    } else if (*eval) {
      eval_cfg.load();
      require_file(model, "--model");
      require_file(data, "--data");
      const auto r = evaluate(load_checkpoint(model), read_dataset(data));
      std::cout << "top1=" << detail::fmt(r.top1) << "\n";
      for (std::size_t c = 0; c < r.per_class.size(); ++c)
        std::cout << "class" << c << "=" << detail::fmt(r.per_class[c]) << "\n";
    } else if (*ablate) {
      const auto cfg = ablate_cfg.load();
      std::vector<Variant> vs;
      for (const auto& name : split_list(variants)) vs.push_back(variant_from_string(name));
      std::vector<std::uint64_t> ss;
      for (const auto& s : split_list(seeds)) ss.push_back(detail::parse_number<std::uint64_t>("--seeds", s));
      const auto table = run_ablation(cfg, vs, ss);
      write_file(out, table.csv());
      write_file(sidecar(out, ".config"), emit_config(cfg));
      std::cout << table.csv();
    } else if (*exp) {
      export_cfg.load();
      require_file(model, "--model");
      require_file(data, "--data");
      const auto lvl = level == "local" ? EmbeddingLevel::local : EmbeddingLevel::overall;
      write_file(out, embeddings_csv(load_checkpoint(model), read_dataset(data), lvl));
    }
  } catch (const ConfigError& e) {
    std::cerr << "atcon: error: config: " << one_line(e.what()) << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "atcon: error: io: " << one_line(e.what()) << "\n";
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "atcon: error: numeric: " << one_line(e.what()) << "\n";
    return 5;
  } catch (const std::exception& e) {
    std::cerr << "atcon: error: runtime: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
