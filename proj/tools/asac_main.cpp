// asac: dataset generation, training, evaluation, attacks, protocols and codebook analysis.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "asac/analysis.hpp"
#include "asac/binary_io.hpp"
#include "asac/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace asac;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::string checkpoint;
};

void set_path(json& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw model::ConfigError(assignment, "--set expects key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;  // bare strings need no quotes

  json* node = &root;
  std::stringstream parts(key);
  std::string part;
  std::vector<std::string> path;
  while (std::getline(parts, part, '.')) path.push_back(part);
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    json& child = (*node)[path[i]];
    if (child.is_null()) child = json::object();
    if (!child.is_object()) throw model::ConfigError(key, "'" + path[i] + "' is not an object");
    node = &child;
  }
  (*node)[path.back()] = value;
}

train::RunConfig resolve_config(const Common& c) {
  json j = json::object();
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw model::ConfigError("--config", "cannot open '" + c.config_path + "'");
    j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw model::ConfigError("--config", "'" + c.config_path + "' is not valid JSON");
  }
  for (const auto& s : c.sets) set_path(j, s);
  if (c.seed) j["seed"] = *c.seed;
  return train::run_config_from_json(j);
}

fs::path prepare_out(const Common& c, const train::RunConfig& cfg) {
  const fs::path out(c.out);
  fs::create_directories(out);
  io::write_file((out / "config.resolved.json").string(), train::to_json(cfg).dump(2) + "\n");
  return out;
}

void write_metrics(const fs::path& out, const std::vector<train::MetricsRow>& rows) {
  io::write_file((out / "metrics.csv").string(), train::to_csv(rows));
}

model::AsacModel load_model(const Common& c, const fs::path& out) {
  const std::string path = c.checkpoint.empty() ? (out / "checkpoint.asac").string() : c.checkpoint;
  return model::load_checkpoint(path);
}

void write_usage(const fs::path& out, const model::AsacModel& m, const data::Dataset& ds) {
  if (!m.config().use_asac) return;
  fs::create_directories(out / "analysis");
  std::vector<analysis::UsageHistogram> all;
  const std::size_t tasks = std::max<std::size_t>(ds.schema.num_tasks, 1);
  for (std::size_t t = 0; t < tasks; ++t) {
    auto hs = analysis::codebook_usage(m, ds, t);
    all.insert(all.end(), hs.begin(), hs.end());
  }
  io::write_file((out / "analysis" / "codebook_usage.json").string(), analysis::to_json(all).dump() + "\n");
}

int cmd_gen_data(const Common& c) {
  const auto cfg = resolve_config(c);
  const auto out = prepare_out(c, cfg);
  const auto split = train::build_datasets(cfg.dataset);
  data::save_dataset(split.train, (out / "train.asds").string());
  data::save_dataset(split.test, (out / "test.asds").string());
  std::printf("wrote %zu train / %zu test samples to %s\n", split.train.size(), split.test.size(), out.c_str());
  return 0;
}

int cmd_train(const Common& c) {
  const auto cfg = resolve_config(c);
  const auto out = prepare_out(c, cfg);
  const auto split = train::build_datasets(cfg.dataset);
  auto result = train::train(cfg, split.train, split.test, cfg.epochs);
  write_metrics(out, result.record.rows);
  model::save_checkpoint(result.model, (out / "checkpoint.asac").string());
  write_usage(out, result.model, split.test);
  const auto& last = result.record.last("test");
  std::printf("run %s epoch %zu test accuracy %.4f\n", result.record.run_id.c_str(), last.epoch,
              last.metrics.accuracy);
  return 0;
}

int cmd_eval(const Common& c) {
  const auto cfg = resolve_config(c);
  const auto out = prepare_out(c, cfg);
  const auto m = load_model(c, out);
  const auto split = train::build_datasets(cfg.dataset);
  const auto metrics = train::evaluate(m, split.test, cfg.eval_batch_size, cfg.lambda);
  write_metrics(out, {{train::config_hash(cfg), "eval", "test", 0, metrics, 0.0, 1.0, 0.0}});
  std::printf("test accuracy %.4f\n", metrics.accuracy);
  return 0;
}

int cmd_attack(const Common& c, const std::string& kinds, const std::vector<double>& eps) {
  auto cfg = resolve_config(c);
  if (!eps.empty()) cfg.epsilons = eps;
  const auto out = prepare_out(c, cfg);
  const auto m = load_model(c, out);
  const auto split = train::build_datasets(cfg.dataset);
  std::vector<train::AttackKind> chosen;
  if (kinds == "fgsm" || kinds == "both") chosen.push_back(train::AttackKind::fgsm);
  if (kinds == "pgd" || kinds == "both") chosen.push_back(train::AttackKind::pgd);
  if (chosen.empty()) throw model::ConfigError("--kind", "expected fgsm, pgd or both");
  std::vector<train::MetricsRow> rows;
  for (auto kind : chosen) {
    for (double e : cfg.epsilons) {
      const auto metrics = train::attack_evaluate(m, split.test, kind, e, cfg.pgd_steps, cfg.pgd_alpha_ratio * e,
                                                  cfg.eval_batch_size, cfg.lambda);
      rows.push_back({train::config_hash(cfg), "attack", train::to_string(kind), 0, metrics, e, 1.0, 0.0});
      std::printf("%s eps %.4g accuracy %.4f\n", train::to_string(kind).c_str(), e, metrics.accuracy);
    }
  }
  write_metrics(out, rows);
  return 0;
}

int cmd_protocol(const Common& c, const std::string& name) {
  auto cfg = resolve_config(c);
  const auto out = prepare_out(c, cfg);
  if (name == "transfer") {
    auto result = train::protocol_transfer(cfg);
    write_metrics(out, result.record.rows);
    model::save_checkpoint(result.model, (out / "checkpoint.asac").string());
  } else if (name == "fewshot") {
    write_metrics(out, train::protocol_fewshot(cfg).rows);
  } else if (name == "efficiency") {
    write_metrics(out, train::protocol_efficiency(cfg).rows);
  } else {
    throw model::ConfigError("--name", "expected transfer, fewshot or efficiency");
  }
  std::printf("protocol %s finished\n", name.c_str());
  return 0;
}

int cmd_analyze(const Common& c, const std::string& samples, const std::string& method) {
  const auto cfg = resolve_config(c);
  const auto out = prepare_out(c, cfg);
  const auto m = load_model(c, out);
  const auto mode = analysis::sample_mode_from_string(samples);
  const auto ks = analysis::ks_method_from_string(method);

  // One histogram set per task. A single-task dataset is compared against the
  // target dataset, which then plays task 1.
  const auto split = train::build_datasets(cfg.dataset);
  std::vector<std::vector<analysis::UsageHistogram>> per_task;
  if (split.test.schema.num_tasks > 1) {
    for (std::size_t t = 0; t < split.test.schema.num_tasks; ++t)
      per_task.push_back(analysis::codebook_usage(m, split.test, t));
  } else {
    per_task.push_back(analysis::codebook_usage(m, split.test, 0));
    per_task.push_back(analysis::codebook_usage(m, train::build_datasets(cfg.target).test, 1));
  }

  fs::create_directories(out / "analysis");
  std::vector<analysis::UsageHistogram> flat;
  for (const auto& hs : per_task) flat.insert(flat.end(), hs.begin(), hs.end());
  io::write_file((out / "analysis" / "codebook_usage.json").string(), analysis::to_json(flat).dump() + "\n");
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    std::vector<analysis::UsageHistogram> layer;
    for (const auto& hs : per_task) layer.push_back(hs[l]);
    const auto matrix = analysis::pairwise_ks(layer, mode, ks);
    json doc = analysis::matrix_to_json(matrix);
    doc["layer"] = l;
    doc["samples"] = samples;
    io::write_file((out / "analysis" / ("ks_layer" + std::to_string(l) + ".json")).string(), doc.dump() + "\n");
    std::printf("layer %zu p(task0, task1) = %.6g\n", l, matrix[0][1]);
  }
  return 0;
}

// Concatenates the metrics.csv of several run directories and summarises final test accuracy.
int cmd_export(const Common& c, const std::vector<std::string>& runs) {
  if (runs.empty()) throw model::ConfigError("--runs", "at least one run directory is required");
  const fs::path out(c.out);
  fs::create_directories(out);
  std::string merged = train::metrics_csv_header();
  json summary = json::array();
  for (const auto& r : runs) {
    const std::string text = io::read_file((fs::path(r) / "metrics.csv").string());
    std::istringstream lines(text);
    std::string line;
    std::getline(lines, line);
    if (line + "\n" != train::metrics_csv_header()) throw io::FormatError(r + "/metrics.csv: unexpected header");
    std::string last_test;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      merged += line + "\n";
      std::vector<std::string> cells;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
      if (cells.size() > 8 && cells[2] == "test") last_test = cells[8];
    }
    summary.push_back({{"run", r}, {"final_test_accuracy", last_test.empty() ? json() : json(std::stod(last_test))}});
  }
  io::write_file((out / "metrics.csv").string(), merged);
  io::write_file((out / "summary.json").string(), summary.dump(2) + "\n");
  std::printf("merged %zu runs into %s\n", runs.size(), out.c_str());
  return 0;
}

void add_common(CLI::App* sub, Common& c, bool needs_checkpoint) {
  sub->add_option("--config", c.config_path, "JSON run configuration");
  sub->add_option("--set", c.sets, "override, dotted key=value (repeatable)");
  sub->add_option("--seed", c.seed, "run seed");
  sub->add_option("--out", c.out, "output directory")->capture_default_str();
  if (needs_checkpoint) sub->add_option("--checkpoint", c.checkpoint, "checkpoint (default <out>/checkpoint.asac)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ASAC vision transformer with a VQ-VAE attention controller"};
  app.require_subcommand(1);
  Common c;
  std::string attack_kind = "both", protocol_name, ks_samples = "counts", ks_method = "auto";
  std::vector<double> eps;
  std::vector<std::string> runs;

  auto* gen = app.add_subcommand("gen-data", "generate and save the train/test datasets");
  add_common(gen, c, false);
  auto* tr = app.add_subcommand("train", "train a model");
  add_common(tr, c, false);
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  add_common(ev, c, true);
  auto* at = app.add_subcommand("attack", "FGSM/PGD accuracy sweep");
  add_common(at, c, true);
  at->add_option("--kind", attack_kind, "fgsm | pgd | both")->capture_default_str();
  at->add_option("--eps", eps, "epsilon values (default from config)");
  auto* pr = app.add_subcommand("protocol", "transfer, fewshot or efficiency protocol");
  add_common(pr, c, false);
  pr->add_option("--name", protocol_name, "transfer | fewshot | efficiency")->required();
  auto* an = app.add_subcommand("analyze-codebook", "code usage histograms and pairwise KS p-values");
  add_common(an, c, true);
  an->add_option("--samples", ks_samples, "KS samples: counts | codes")->capture_default_str();
  an->add_option("--ks-method", ks_method, "auto | exact | asymptotic")->capture_default_str();
  auto* ex = app.add_subcommand("export", "merge metrics of several runs");
  ex->add_option("--runs", runs, "run directories")->required();
  ex->add_option("--out", c.out, "output directory")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  if (const char* env = std::getenv("ASAC_THREADS")) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) {
      std::fprintf(stderr, "config error [ASAC_THREADS]: expected a positive integer\n");
      return kExitConfig;
    }
    train::set_eval_threads(static_cast<std::size_t>(n));
  }

  try {
    if (gen->parsed()) return cmd_gen_data(c);
    if (tr->parsed()) return cmd_train(c);
    if (ev->parsed()) return cmd_eval(c);
    if (at->parsed()) return cmd_attack(c, attack_kind, eps);
    if (pr->parsed()) return cmd_protocol(c, protocol_name);
    if (an->parsed()) return cmd_analyze(c, ks_samples, ks_method);
    if (ex->parsed()) return cmd_export(c, runs);
  } catch (const model::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const vq::ConfigurationError& e) {
    std::fprintf(stderr, "config error [model.controller]: %s\n", e.what());
    return kExitConfig;
  } catch (const train::NumericalError& e) {
    std::fprintf(stderr, "numerical abort [%s]: %s\n", e.component().c_str(), e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
