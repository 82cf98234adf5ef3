// ppc: generate data, train, score, evaluate and reproduce the experiments.

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include "ppc/conformance.hpp"
#include "ppc/datagen.hpp"
#include "ppc/experiments.hpp"
#include "ppc/metrics.hpp"
#include "ppc/model.hpp"
#include "ppc/training.hpp"

namespace fs = std::filesystem;
using namespace ppc;

namespace {

enum Exit { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

// Config file entries overlaid with flag values; flags win.
struct RunTree {
  std::string config_path;
  std::map<std::string, std::string> flags;

  ConfigTree resolve(const ConfigTree& base = {}) const {
    ConfigTree t = base;
    if (!config_path.empty()) {
      const ConfigTree file = ConfigTree::load(config_path);
      for (const auto& [k, v] : file.entries()) t.set(k, v);
    }
    for (const auto& [k, v] : flags) t.set(k, v);
    return t;
  }

  bool given(const std::string& key) const {
    return flags.count(key) || (!config_path.empty() && ConfigTree::load(config_path).contains(key));
  }
};

// Binds a CLI option to a tree key; the value lands in `run.flags` only when given.
template <typename V>
CLI::Option* keyed(CLI::App* app, RunTree& run, const std::string& flag, const std::string& key,
                   const std::string& help) {
  return app->add_option_function<V>(
      flag,
      [&run, key](const V& v) {
        if constexpr (std::is_same_v<V, std::string>) {
          run.flags[key] = v;
        } else if constexpr (std::is_floating_point_v<V>) {
          run.flags[key] = format_real(v);
        } else {
          run.flags[key] = std::to_string(v);
        }
      },
      help);
}

void refuse_overwrite(const std::string& path, bool force) {
  if (!force && fs::exists(path)) {
    throw ConfigError("refusing to overwrite '" + path + "' (pass --force)");
  }
}

void require_seed(const RunTree& run, const std::string& key) {
  if (!run.given(key)) throw ConfigError("--seed is required");
}

void write_run_config(const ConfigTree& tree, const std::string& out) {
  std::ofstream f(out + ".run.cfg");
  if (!f) throw DataError("cannot write '" + out + ".run.cfg'");
  f << tree.serialize();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write '" + path + "'");
  return f;
}

// Pipeline config from a preset (or none), then the file, then flags.
ConfigTree pipeline_tree(const RunTree& run, const std::string& fallback_preset) {
  ConfigTree probe = run.resolve();
  const std::string name = probe.get("run.preset").value_or(fallback_preset);
  ConfigTree base;
  if (!name.empty()) {
    base = preset(name).to_tree();
    base.set("run.preset", name);
  }
  ConfigTree t = run.resolve(base);
  if (!t.contains("model.past_steps")) throw ConfigError("no model configuration: pass --preset or --config");
  return t;
}

// ---------------------------------------------------------------------------

int cmd_generate(const RunTree& run, bool force) {
  ConfigTree tree = run.resolve();
  ConfigReader r(tree);
  require_seed(run, "dataset.seed");
  r.text("run.command", "");
  const DatasetSpec spec = read_spec(r);
  const std::string out = r.text("run.out");
  const std::string csv = r.text("run.csv", "");
  r.reject_unknown();
  if (spec.count == 0) throw ConfigError("--count must be >= 1");
  refuse_overwrite(out, force);
  const Dataset data = Dataset::generate(spec);
  data.save(out);
  if (!csv.empty()) {
    refuse_overwrite(csv, force);
    auto f = open_out(csv);
    data.write_csv(f);
  }
  ConfigTree resolved = describe(spec);
  resolved.set("run.command", "generate");
  resolved.set("run.out", out);
  if (!csv.empty()) resolved.set("run.csv", csv);
  write_run_config(resolved, out);
  std::cerr << "wrote " << spec.count << " sequences to " << out << " ("
            << data.header().get("dataset.labels.anomalous_change").value_or("0") << " with change points)\n";
  return kOk;
}

int cmd_train(const RunTree& run, bool force) {
  ConfigTree tree = pipeline_tree(run, "");
  require_seed(run, "seed");
  ConfigReader r(tree);
  const PipelineConfig cfg = PipelineConfig::read(r);
  r.text("run.preset", "");
  r.text("run.command", "");
  const std::string train_path = r.text("run.train");
  const std::string val_path = r.text("run.val");
  const std::string out = r.text("run.out");
  const std::string history = r.text("run.history", out + ".history.csv");
  r.reject_unknown();
  refuse_overwrite(out, force);
  refuse_overwrite(history, force);

  const Dataset train_data = Dataset::load(train_path);
  const Dataset val_data = Dataset::load(val_path);
  PpcModel<float> model(cfg);
  std::cerr << "model: " << model.parameter_count() << " trainable parameters\n";
  TrainOptions<float> opts;
  opts.on_eval = [](const HistoryRow& row) {
    std::cerr << "iter " << row.iteration << " [" << to_string(row.phase) << "] train " << row.train_loss << " val "
              << row.val_loss << '\n';
  };
  const TrainResult result = train(model, train_data, val_data, opts);
  save_checkpoint(model, out);
  auto f = open_out(history);
  write_history_csv(f, result.history);

  ConfigTree resolved = cfg.to_tree();
  resolved.set("run.command", "train");
  resolved.set("run.train", train_path);
  resolved.set("run.val", val_path);
  resolved.set("run.out", out);
  resolved.set("run.history", history);
  write_run_config(resolved, out);
  std::cerr << "best validation loss " << result.best_val_loss << " at iteration " << result.best_iteration << '\n';
  return kOk;
}

int cmd_score(const RunTree& run, bool force) {
  ConfigTree tree = run.resolve();
  ConfigReader r(tree);
  r.text("run.command", "");
  const std::string ckpt = r.text("run.checkpoint");
  const std::string data_path = r.text("run.data");
  const std::string out = r.text("run.out");
  r.reject_unknown();
  refuse_overwrite(out, force);
  const PpcModel<float> model = load_checkpoint(ckpt);
  const Dataset data = Dataset::load(data_path);
  auto f = open_out(out);
  f << "sequence_id,step_index,log_likelihood,distance,p_step,p_sequence,label\n";
  score_source<float>(model, data, [&](std::size_t i, const ConformanceReport& rep) {
    const int label = static_cast<int>(data.meta(i).label);
    for (const auto& s : rep.steps) {
      f << i << ',' << s.step << ',' << format_real(s.log_likelihood) << ',' << format_real(s.distance) << ','
        << format_real(s.p) << ',' << format_real(rep.p_sequence) << ',' << label << '\n';
    }
  });
  ConfigTree resolved;
  resolved.set("run.command", "score");
  resolved.set("run.checkpoint", ckpt);
  resolved.set("run.data", data_path);
  resolved.set("run.out", out);
  write_run_config(resolved, out);
  return kOk;
}

struct ScoredSet {
  std::vector<double> p;
  std::unique_ptr<bool[]> label_data;
  std::size_t n = 0;

  std::span<const bool> labels() const { return {label_data.get(), n}; }
};

ScoredSet read_scores(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scores '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw DataError("scores '" + path + "' is empty");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) cols.push_back(c);
  }
  auto col = [&](const std::string& name) -> std::optional<std::size_t> {
    for (std::size_t i = 0; i < cols.size(); ++i) {
      if (cols[i] == name) return i;
    }
    return std::nullopt;
  };
  const auto id_col = col("sequence_id"), p_col = col("p_sequence"), label_col = col("label");
  if (!id_col || !p_col) throw DataError("scores '" + path + "' lacks sequence_id/p_sequence columns");
  if (!label_col) throw DataError("scores '" + path + "' has no label column");
  ScoredSet s;
  std::vector<char> labels;
  std::string last_id;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string c; std::getline(ss, c, ',');) f.push_back(c);
    if (f.size() != cols.size()) throw DataError("scores '" + path + "' line " + std::to_string(line_no) + ": wrong field count");
    if (f[*id_col] == last_id) continue;
    last_id = f[*id_col];
    try {
      s.p.push_back(std::stod(f[*p_col]));
    } catch (const std::exception&) {
      throw DataError("scores '" + path + "' line " + std::to_string(line_no) + ": bad p_sequence");
    }
    if (f[*label_col] != "0" && f[*label_col] != "1") {
      throw DataError("scores '" + path + "' line " + std::to_string(line_no) + ": label must be 0 or 1");
    }
    labels.push_back(f[*label_col] == "1");
  }
  if (s.p.empty()) throw DataError("scores '" + path + "' holds no rows");
  s.n = labels.size();
  s.label_data = std::make_unique<bool[]>(s.n);
  std::copy(labels.begin(), labels.end(), s.label_data.get());
  return s;
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

int cmd_evaluate(const RunTree& run, bool force) {
  ConfigTree tree = run.resolve();
  ConfigReader r(tree);
  r.text("run.command", "");
  const std::string scores_path = r.text("run.scores");
  const std::string threshold = r.text("run.threshold", "auto");
  const std::string threshold_scores = r.text("run.threshold_scores", "");
  const std::string out = r.text("run.out");
  const std::string curves = r.text("run.curves", "");
  r.reject_unknown();
  refuse_overwrite(out, force);

  const ScoredSet s = read_scores(scores_path);
  double alpha = 0.0;
  if (threshold == "auto") {
    if (threshold_scores.empty()) {
      alpha = select_threshold_max_f1(s.p, s.labels());
    } else {
      const ScoredSet tune = read_scores(threshold_scores);
      alpha = select_threshold_max_f1(tune.p, tune.labels());
    }
  } else {
    try {
      std::size_t used = 0;
      alpha = std::stod(threshold, &used);
      if (used != threshold.size()) throw std::invalid_argument(threshold);
    } catch (const std::exception&) {
      throw ConfigError("--threshold must be 'auto' or a number in [0, 1]");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("--threshold must lie in [0, 1]");
  }
  const std::span<const bool> labels = s.labels();
  const ConfusionCounts c = confusion(s.p, labels, alpha);
  const MetricsSuite m = metrics_suite(c);
  nlohmann::ordered_json j;
  j["threshold_mode"] = threshold == "auto" ? "auto" : "fixed";
  j["alpha"] = alpha;
  j["sequences"] = s.p.size();
  j["counts"] = {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
  j["recall"] = opt_json(m.recall);
  j["precision"] = opt_json(m.precision);
  j["specificity"] = opt_json(m.specificity);
  j["balanced_accuracy"] = opt_json(m.balanced_accuracy);
  j["mcc"] = opt_json(m.mcc);
  j["f1"] = opt_json(m.f1);
  const bool both = c.tp + c.fn > 0 && c.fp + c.tn > 0;
  j["roc_auc"] = both ? nlohmann::json(roc_auc(s.p, labels)) : nlohmann::json(nullptr);
  j["pr_auc"] = both ? nlohmann::json(pr_auc(s.p, labels)) : nlohmann::json(nullptr);
  auto f = open_out(out);
  f << j.dump(2) << '\n';
  if (!curves.empty() && both) {
    for (const auto& [name, pts] : {std::pair{std::string("roc"), roc_curve(s.p, labels)},
                                    std::pair{std::string("pr"), pr_curve(s.p, labels)}}) {
      const std::string path = curves + "_" + name + ".csv";
      refuse_overwrite(path, force);
      auto cf = open_out(path);
      cf << "threshold,x,y\n";
      for (const auto& p : pts) cf << format_real(p.threshold) << ',' << format_real(p.x) << ',' << format_real(p.y) << '\n';
    }
  }
  ConfigTree resolved;
  resolved.set("run.command", "evaluate");
  resolved.set("run.scores", scores_path);
  resolved.set("run.threshold", threshold);
  if (!threshold_scores.empty()) resolved.set("run.threshold_scores", threshold_scores);
  resolved.set("run.out", out);
  if (!curves.empty()) resolved.set("run.curves", curves);
  write_run_config(resolved, out);
  return kOk;
}

int cmd_grid(const RunTree& run, bool force) {
  ConfigTree tree = run.resolve();
  ConfigReader r(tree);
  r.text("run.command", "");
  require_seed(run, "grid.seed");
  const std::string ckpt = r.text("run.checkpoint");
  const std::string out = r.text("run.out");
  const double resolution = r.real("grid.resolution", 0.05);
  const std::size_t reps = r.count("grid.reps", 10);
  const std::uint64_t seed = r.count("grid.seed");
  const SineConfig sine = SineConfig::read(r, "sine");
  r.reject_unknown();
  refuse_overwrite(out, force);
  const FrequencyGrid grid = make_frequency_grid(resolution, reps, seed, sine);
  const PpcModel<float> model = load_checkpoint(ckpt);
  std::cerr << "grid: " << grid.cell_count() << " cells, " << grid.signal_count() << " signals\n";
  const auto cells = evaluate_grid(model, grid);
  auto f = open_out(out);
  write_grid_csv(f, cells);
  ConfigTree resolved;
  resolved.set("run.command", "grid");
  resolved.set("run.checkpoint", ckpt);
  resolved.set("run.out", out);
  resolved.set("grid.resolution", format_real(resolution));
  resolved.set("grid.reps", std::to_string(reps));
  resolved.set("grid.seed", std::to_string(seed));
  sine.write(resolved, "sine");
  write_run_config(resolved, out);
  return kOk;
}

int cmd_prop_test(const RunTree& run, bool force) {
  ConfigTree tree = pipeline_tree(run, "proportionality");
  ConfigReader r(tree);
  r.text("run.command", "");
  r.text("run.preset", "");
  require_seed(run, "prop_test.seed");
  PropTestOptions opts;
  opts.config = PipelineConfig::read(r);
  opts.runs = r.count("prop_test.runs", 10);
  opts.seed = r.count("prop_test.seed");
  opts.train_count = r.count("prop_test.train_count", opts.train_count);
  opts.val_count = r.count("prop_test.val_count", opts.val_count);
  const std::string out = r.text("run.out");
  r.reject_unknown();
  if (opts.runs == 0) throw ConfigError("--runs must be >= 1");
  refuse_overwrite(out, force);
  const auto runs = run_prop_test(opts, [](const PropRunResult& res) {
    std::cerr << "run " << res.run << ": " << res.training.iterations << " iterations;";
    for (const auto& p : res.pdfs) std::cerr << " x1=" << p.x1 << " mu_hat=" << p.fit.mu << " sigma_hat=" << p.fit.sigma;
    std::cerr << '\n';
  });
  const auto rows = summarize_prop_test(opts.data, runs);
  auto f = open_out(out);
  write_prop_csv(f, rows);
  ConfigTree resolved = opts.config.to_tree();
  resolved.erase("seed");
  resolved.set("run.command", "prop-test");
  resolved.set("run.out", out);
  resolved.set("prop_test.runs", std::to_string(opts.runs));
  resolved.set("prop_test.seed", std::to_string(opts.seed));
  resolved.set("prop_test.train_count", std::to_string(opts.train_count));
  resolved.set("prop_test.val_count", std::to_string(opts.val_count));
  write_run_config(resolved, out);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  ppc::tune_allocator();
  CLI::App app{"Probabilistic predictive coding for anomalous change-point detection"};
  app.require_subcommand(1);
  bool force = false;
  std::map<std::string, RunTree> runs;

  auto common = [&](CLI::App* sub, bool takes_config) {
    RunTree& run = runs[sub->get_name()];
    if (takes_config) sub->add_option("--config", run.config_path, "key = value config file")->check(CLI::ExistingFile);
    sub->add_flag("--force", force, "overwrite existing outputs");
    return &run;
  };

  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  {
    RunTree& run = *common(gen, true);
    keyed<std::string>(gen, run, "--kind", "dataset.kind", "sine | prop");
    keyed<std::size_t>(gen, run, "--count", "dataset.count", "number of sequences");
    keyed<std::uint64_t>(gen, run, "--seed", "dataset.seed", "random seed");
    keyed<std::string>(gen, run, "--changes", "dataset.changes", "none | all | paired");
    gen->add_flag_callback("--with-changepoints", [&run] { run.flags["dataset.changes"] = "paired"; },
                           "half of the sequences get an anomalous change point");
    keyed<std::string>(gen, run, "--out", "run.out", "dataset file");
    keyed<std::string>(gen, run, "--csv", "run.csv", "also write a CSV export");
  }

  auto* tr = app.add_subcommand("train", "train a pipeline");
  {
    RunTree& run = *common(tr, true);
    keyed<std::string>(tr, run, "--preset", "run.preset", "proportionality | sine | mrsi");
    keyed<std::uint64_t>(tr, run, "--seed", "seed", "random seed");
    keyed<std::string>(tr, run, "--train", "run.train", "training dataset");
    keyed<std::string>(tr, run, "--val", "run.val", "validation dataset");
    keyed<std::string>(tr, run, "--out", "run.out", "checkpoint file");
    keyed<std::string>(tr, run, "--history", "run.history", "loss history CSV");
    keyed<std::size_t>(tr, run, "--warmup-iters", "schedule.warmup_iters", "warm-up iterations");
    keyed<std::size_t>(tr, run, "--max-iters", "schedule.max_iters", "total iteration budget");
    keyed<std::size_t>(tr, run, "--eval-every", "schedule.eval_every", "iterations between validations");
    keyed<std::size_t>(tr, run, "--batch-size", "schedule.batch_size", "batch size");
    keyed<double>(tr, run, "--lr", "optimizer.lr", "learning rate");
  }

  auto* sc = app.add_subcommand("score", "score sequences with a checkpoint");
  {
    RunTree& run = *common(sc, true);
    keyed<std::string>(sc, run, "--checkpoint", "run.checkpoint", "checkpoint file");
    keyed<std::string>(sc, run, "--data", "run.data", "dataset file");
    keyed<std::string>(sc, run, "--out", "run.out", "scores CSV");
  }

  auto* ev = app.add_subcommand("evaluate", "classification metrics from a scores CSV");
  {
    RunTree& run = *common(ev, true);
    keyed<std::string>(ev, run, "--scores", "run.scores", "scores CSV");
    keyed<std::string>(ev, run, "--threshold", "run.threshold", "auto | alpha");
    keyed<std::string>(ev, run, "--threshold-scores", "run.threshold_scores", "scores CSV used to pick the threshold");
    keyed<std::string>(ev, run, "--out", "run.out", "metrics JSON");
    keyed<std::string>(ev, run, "--curves", "run.curves", "prefix for ROC/PR curve CSVs");
  }

  auto* gr = app.add_subcommand("grid", "mean log-likelihood and p over a grid of frequency pairs");
  {
    RunTree& run = *common(gr, true);
    keyed<std::string>(gr, run, "--checkpoint", "run.checkpoint", "checkpoint file");
    keyed<double>(gr, run, "--resolution", "grid.resolution", "grid step in Hz");
    keyed<std::size_t>(gr, run, "--reps", "grid.reps", "signals per cell");
    keyed<std::uint64_t>(gr, run, "--seed", "grid.seed", "random seed");
    keyed<std::string>(gr, run, "--out", "run.out", "grid CSV");
  }

  auto* pt = app.add_subcommand("prop-test", "repeat the proportionality experiment");
  {
    RunTree& run = *common(pt, true);
    keyed<std::size_t>(pt, run, "--runs", "prop_test.runs", "independent training runs");
    keyed<std::uint64_t>(pt, run, "--seed", "prop_test.seed", "random seed of the first run");
    keyed<std::size_t>(pt, run, "--count", "prop_test.train_count", "training samples per run");
    keyed<std::size_t>(pt, run, "--warmup-iters", "schedule.warmup_iters", "warm-up iterations");
    keyed<std::size_t>(pt, run, "--max-iters", "schedule.max_iters", "total iteration budget");
    keyed<std::string>(pt, run, "--out", "run.out", "per-x1 summary CSV");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate(runs["generate"], force);
    if (tr->parsed()) return cmd_train(runs["train"], force);
    if (sc->parsed()) return cmd_score(runs["score"], force);
    if (ev->parsed()) return cmd_evaluate(runs["evaluate"], force);
    if (gr->parsed()) return cmd_grid(runs["grid"], force);
    if (pt->parsed()) return cmd_prop_test(runs["prop-test"], force);
  } catch (const ConfigError& e) {
    std::cerr << "ppc: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "ppc: numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "ppc: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "ppc: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
