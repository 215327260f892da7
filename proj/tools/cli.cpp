// SPDX-License-Identifier: Apache-2.0
#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "uniwrv/analysis.hpp"
#include "uniwrv/dra.hpp"
#include "uniwrv/errors.hpp"
#include "uniwrv/tensorkit/gradcheck.hpp"
#include "uniwrv/wpgm.hpp"

namespace uniwrv::cli {

namespace fs = std::filesystem;
using nlohmann::json;

json RunConfig::to_json() const {
  json d = data.to_json();
  if (data_dir) d["dir"] = data_dir->string();
  return json{{"model", model.to_json()},
              {"data", d},
              {"train", train.to_json()},
              {"flags", {{"hard_routing", model.hard_routing}, {"grad_mode_64bit", train.grad_mode_64bit}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be an object");
  RunConfig c;
  std::optional<bool> hard, wide;
  for (const auto& [key, v] : j.items()) {
    if (key == "model") {
      c.model = model::ModelConfig::from_json(v);
      if (v.contains("hard_routing")) hard = c.model.hard_routing;
    } else if (key == "train") {
      c.train = model::TrainConfig::from_json(v);
      if (v.contains("grad_mode_64bit")) wide = c.train.grad_mode_64bit;
    } else if (key == "data") {
      if (!v.is_object()) throw ConfigError("data section must be an object");
      json rest = v;
      if (rest.contains("dir")) {
        if (!rest["dir"].is_string()) throw ConfigError("data.dir must be a string");
        c.data_dir = fs::path(rest["dir"].get<std::string>());
        rest.erase("dir");
      }
      c.data = weathergen::DatasetConfig::from_json(rest);
    } else if (key != "flags") {
      throw ConfigError("unknown config section '" + key + "'");
    }
  }
  if (j.contains("flags")) {
    const json& f = j["flags"];
    if (!f.is_object()) throw ConfigError("flags section must be an object");
    for (const auto& [key, v] : f.items()) {
      if (!v.is_boolean()) throw ConfigError("flags." + key + " must be a boolean");
      const bool b = v.get<bool>();
      if (key == "hard_routing") {
        if (hard && *hard != b) throw ConfigError("flags.hard_routing contradicts model.hard_routing");
        c.model.hard_routing = b;
      } else if (key == "grad_mode_64bit") {
        if (wide && *wide != b) throw ConfigError("flags.grad_mode_64bit contradicts train.grad_mode_64bit");
        c.train.grad_mode_64bit = b;
      } else {
        throw ConfigError("unknown flags key '" + key + "'");
      }
    }
  }
  c.model.validate();
  c.train.validate();
  c.data.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

namespace {

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << j.dump(2) << '\n';
  if (!f) throw IoError("write failed: " + path.string());
}

void log_config(std::ostream& out, const json& j) { out << "resolved config:\n" << j.dump(2) << '\n'; }

void register_all_gradchecks() {
  static const bool once = [] {
    wpgm::register_gradchecks();
    dra::register_gradchecks();
    model::register_gradchecks();
    return true;
  }();
  (void)once;
}

// A dataset root holds test/ and train/; anything else is taken as a split.
fs::path eval_split(const fs::path& data) { return fs::is_directory(data / "test") ? data / "test" : data; }

std::string fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct Options {
  std::string config, out, data, ckpt, report;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::vector<std::string> ops;
  bool all = false, list = false;
  double eps = 1e-5, tol = 1e-4;
  int trials = 10;
  std::size_t height = 64, width = 64;
  std::size_t triplets = 0, samples = 48;
  bool no_images = false;
};

int cmd_generate(const Options& o, std::ostream& out) {
  RunConfig cfg = RunConfig::load(o.config);
  if (o.seed) cfg.data.seed = *o.seed;
  const json resolved = cfg.to_json();
  log_config(out, resolved);
  const auto summary = weathergen::make_dataset(cfg.data, o.out, o.force);
  write_json(fs::path(o.out) / "resolved_config.json", resolved);
  out << "wrote " << summary.train_clips << " train and " << summary.test_clips << " test clips to " << o.out << '\n';
  return kOk;
}

int cmd_train(const Options& o, std::ostream& out) {
  RunConfig cfg = RunConfig::load(o.config);
  fs::path data;
  if (!o.data.empty()) data = o.data;
  else if (cfg.data_dir) data = *cfg.data_dir;
  else throw UsageError("train: --data is required when the config has no data.dir");
  cfg.data_dir = data;
  const json resolved = cfg.to_json();
  log_config(out, resolved);
  write_json(fs::path(o.out) / "resolved_config.json", resolved);
  const auto result = model::train(cfg.model, cfg.train, data, o.out);
  out << "trained " << result.iterations << " iterations, final loss " << result.last.total << ", checkpoint "
      << result.final_checkpoint.string() << '\n';
  return kOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  auto [net, meta] = model::load_checkpoint(o.ckpt);
  const fs::path split = eval_split(o.data);
  const json resolved{{"model", meta.config.to_json()},
                      {"checkpoint", o.ckpt},
                      {"iteration", meta.iteration},
                      {"data", split.string()},
                      {"triplets_per_clip", o.triplets},
                      {"write_images", !o.no_images}};
  log_config(out, resolved);
  const auto clips = weathergen::load_split(split);
  if (clips.empty()) throw IoError("no clips under " + split.string());
  const fs::path report(o.report);
  analysis::EvalOptions opts;
  opts.triplets_per_clip = o.triplets;
  if (!o.no_images) opts.image_dir = report / "restored";
  std::error_code ec;
  fs::create_directories(report, ec);
  const auto summary = analysis::evaluate(net, clips, opts);
  analysis::write_metrics_csv(summary, report / "metrics.csv");
  write_json(report / "resolved_config.json", resolved);
  out << "condition  triplets  psnr_in  psnr_out  ssim_in  ssim_out\n";
  for (const auto& m : summary.means) {
    out << m.label << "  " << m.count << "  " << fixed(m.psnr_degraded, 3) << "  " << fixed(m.psnr, 3) << "  "
        << fixed(m.ssim_degraded, 4) << "  " << fixed(m.ssim, 4) << '\n';
  }
  return kOk;
}

int cmd_gradcheck(const Options& o, std::ostream& out) {
  register_all_gradchecks();
  auto& registry = tensorkit::GradcheckRegistry::global();
  if (o.list) {
    for (const auto& n : registry.names()) out << n << '\n';
    return kOk;
  }
  if (o.all && !o.ops.empty()) throw UsageError("gradcheck: --op and --all are exclusive");
  std::vector<std::string> ops = o.ops.empty() ? registry.names() : o.ops;
  for (const auto& n : ops) registry.get(n);  // unknown names fail before any work
  tensorkit::GradcheckOptions opts;
  opts.eps = o.eps;
  opts.tol = o.tol;
  opts.trials = o.trials;
  if (o.seed) opts.seed = *o.seed;
  log_config(out, json{{"ops", ops}, {"eps", opts.eps}, {"tol", opts.tol}, {"trials", opts.trials}, {"seed", opts.seed}});
  std::size_t failed = 0;
  for (const auto& n : ops) {
    const auto r = registry.run(n, opts);
    char line[160];
    std::snprintf(line, sizeof line, "%-28s %3d  %.3e  %s", n.c_str(), r.trials, r.max_error, r.passed ? "PASS" : "FAIL");
    out << line << '\n';
    if (!r.passed) ++failed;
  }
  out << (ops.size() - failed) << "/" << ops.size() << " passed\n";
  return failed ? kVerificationFailed : kOk;
}

int cmd_bench(const Options& o, std::ostream& out) {
  const RunConfig cfg = RunConfig::load(o.config);
  const fs::path csv(o.out);
  const json resolved{{"model", cfg.model.to_json()}, {"height", o.height}, {"width", o.width}};
  log_config(out, resolved);
  std::vector<analysis::ComplexityRow> rows;
  for (auto s : analysis::all_schemes()) rows.push_back(analysis::count_complexity(cfg.model, o.height, o.width, s));
  if (csv.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(csv.parent_path(), ec);
  }
  analysis::write_complexity_csv(rows, csv);
  write_json(fs::path(csv).replace_extension(".config.json"), resolved);
  out << "scheme  params  macs\n";
  for (const auto& r : rows) out << r.scheme << "  " << r.params << "  " << r.macs << '\n';
  return kOk;
}

int cmd_inspect(const Options& o, std::ostream& out) {
  auto [net, meta] = model::load_checkpoint(o.ckpt);
  const fs::path split = eval_split(o.data);
  const json resolved{{"model", meta.config.to_json()},
                      {"checkpoint", o.ckpt},
                      {"iteration", meta.iteration},
                      {"data", split.string()},
                      {"samples_per_condition", o.samples}};
  log_config(out, resolved);
  const auto clips = weathergen::load_split(split);
  const auto report = analysis::specialization_report(net, clips, o.samples);
  analysis::write_specialization_csvs(report, o.out);
  write_json(fs::path(o.out) / "resolved_config.json", resolved);
  out << "condition  samples  purity(layer " << report.deepest_layer << ")\n";
  for (const auto& s : report.conditions)
    out << weathergen::condition_name(s.condition) << "  " << s.samples << "  " << fixed(s.deepest_purity, 3) << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Video weather restoration toolkit", "uniwrv"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate", "Render a synthetic degraded/clean dataset");
  gen->add_option("--config", o.config, "run config (JSON)")->required();
  gen->add_option("--out", o.out, "output directory")->required();
  gen->add_option("--seed", o.seed, "master seed override");
  gen->add_flag("--force", o.force, "replace an existing dataset");

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", o.config, "run config (JSON)")->required();
  tr->add_option("--data", o.data, "dataset root");
  tr->add_option("--out", o.out, "run directory")->required();

  auto* ev = app.add_subcommand("eval", "Restore a test split and report PSNR/SSIM");
  ev->add_option("--ckpt", o.ckpt, "checkpoint")->required();
  ev->add_option("--data", o.data, "dataset root or split directory")->required();
  ev->add_option("--report", o.report, "report directory")->required();
  ev->add_option("--triplets", o.triplets, "centre frames per clip (0: all)");
  ev->add_flag("--no-images", o.no_images, "skip writing restored frames");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc->add_option("--op", o.ops, "case name (repeatable)");
  gc->add_flag("--all", o.all, "every registered case (default)");
  gc->add_flag("--list", o.list, "print registered case names");
  gc->add_option("--eps", o.eps, "finite-difference step");
  gc->add_option("--tol", o.tol, "max relative error");
  gc->add_option("--trials", o.trials, "random trials per case")->check(CLI::PositiveNumber);
  gc->add_option("--seed", o.seed, "trial seed");

  auto* bench = app.add_subcommand("bench-routing", "Parameter and MAC counts for the routing schemes");
  bench->add_option("--config", o.config, "run config (JSON)")->required();
  bench->add_option("--out", o.out, "CSV path")->required();
  bench->add_option("--height", o.height, "input height")->check(CLI::PositiveNumber);
  bench->add_option("--width", o.width, "input width")->check(CLI::PositiveNumber);

  auto* ins = app.add_subcommand("inspect", "Routing and prior statistics per condition");
  ins->add_option("--ckpt", o.ckpt, "checkpoint")->required();
  ins->add_option("--data", o.data, "dataset root or split directory")->required();
  ins->add_option("--out", o.out, "output directory")->required();
  ins->add_option("--samples", o.samples, "triplets per condition")->check(CLI::PositiveNumber);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  try {
    if (*gen) return cmd_generate(o, out);
    if (*tr) return cmd_train(o, out);
    if (*ev) return cmd_eval(o, out);
    if (*gc) return cmd_gradcheck(o, out);
    if (*bench) return cmd_bench(o, out);
    if (*ins) return cmd_inspect(o, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const DimensionError& e) {
    err << "shape error: " << e.what() << '\n';
    return kUsageError;
  } catch (const json::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << '\n';
    return kIoError;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kVerificationFailed;
  }
  return kUsageError;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace uniwrv::cli
