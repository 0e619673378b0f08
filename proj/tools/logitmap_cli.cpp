// Command-line front end for the logitmap pipeline.
//
// Every subcommand rebuilds its state from the config and the files named on
// the command line, so steps can be run one at a time or all at once with
// `run-all`. Exit codes: 0 success, 1 other failure, 2 config error,
// 3 oracle failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "logitmap/config_io.hpp"

namespace fs = std::filesystem;
using namespace logitmap;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitOracle = 3;

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::optional<std::size_t> budget_cap;
};

ExperimentConfig resolve_config(const GlobalOptions& g) {
  ExperimentConfig c = g.config.empty() ? config_from_json(Json::object()) : load_config(g.config);
  if (g.seed) {
    c.seed = *g.seed;
    c.data.seed = *g.seed;
  }
  if (!g.out_dir.empty()) c.out_dir = g.out_dir;
  if (g.budget_cap) c.budget_cap = *g.budget_cap;
  detail::ensure_dir(c.out_dir);
  return c;
}

fs::path artifact(const ExperimentConfig& c, const std::string& override_path, const char* name) {
  const fs::path p = override_path.empty() ? fs::path(c.out_dir) / name : fs::path(override_path);
  if (!fs::exists(p)) throw Error(Errc::kMissingArtifacts, fmt::format("missing artifact '{}'", p.string()));
  return p;
}

Json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::kIoError, fmt::format("cannot open '{}'", path.string()));
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw Error(Errc::kParseError, fmt::format("{}: {}", path.string(), e.what()));
  }
}

void write_json_file(const Json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::kIoError, fmt::format("cannot write '{}'", path.string()));
  out << j.dump(2) << '\n';
}

Json thresholds_to_json(const SelectionThresholds& th) {
  return Json{{"metric", metric_name(th.metric)}, {"tau_in", th.tau_in}, {"tau_out", th.tau_out}};
}

SelectionThresholds thresholds_from_json(const Json& j) {
  try {
    SelectionThresholds th;
    th.metric = parse_metric(j.at("metric").get<std::string>());
    th.tau_in = j.at("tau_in").get<double>();
    th.tau_out = j.at("tau_out").get<double>();
    return th;
  } catch (const Json::exception& e) {
    throw Error(Errc::kParseError, e.what());
  }
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw Error(Errc::kConfigError, fmt::format("'{}' is not a number", item));
    }
  }
  if (out.empty()) throw Error(Errc::kConfigError, "empty list");
  return out;
}

void print_ledger(std::string_view label, const ApiLedger& ledger) {
  const auto s = ledger.snapshot();
  fmt::print("{}: {} unique / {} requests, fraction {:.4f}\n", label, s.unique, s.total, usage_fraction(s));
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_gen_data(const ExperimentConfig& c, const std::string& format) {
  const Splits s = load_or_generate(c);
  const std::string ext = format == "csv" ? "csv" : "jsonl";
  const fs::path train = fs::path(c.out_dir) / ("train." + ext);
  const fs::path test = fs::path(c.out_dir) / ("test." + ext);
  save_dataset(s.train, train);
  save_dataset(s.test, test);
  fmt::print("wrote {} ({} rows) and {} ({} rows)\n", train.string(), s.train.size(), test.string(), s.test.size());
}

void cmd_calibrate(const ExperimentConfig& c) {
  const Splits s = load_or_generate(c);
  const ProxyParams minus = prepare_minus(c, s.train);
  const SelectionThresholds th = resolve_thresholds(c, s.train, minus);
  Json j = thresholds_to_json(th);
  j["percentile"] = c.selection.percentile;
  const fs::path out = fs::path(c.out_dir) / "thresholds.json";
  write_json_file(j, out);
  fmt::print("tau_in={} tau_out={} ({}), wrote {}\n", th.tau_in, th.tau_out, metric_name(th.metric), out.string());
}

void cmd_select(const ExperimentConfig& c, const std::string& strategy, const std::string& thresholds_path,
                std::optional<std::size_t> limit) {
  const Splits s = load_or_generate(c);
  const ProxyParams minus = prepare_minus(c, s.train);
  CandidateSet cands;
  if (strategy == "random") {
    cands = random_select(s.train, limit.value_or(random_budget(c, s.train.size())), c.seed + 7);
  } else if (strategy == "filter") {
    const SelectionThresholds th = thresholds_path.empty() ? resolve_thresholds(c, s.train, minus)
                                                           : thresholds_from_json(read_json_file(thresholds_path));
    SelectionOptions opt;
    opt.max_selected = limit.value_or(filter_cap(c, s.train.size()));
    cands = filter_select(s.train, minus, th, opt);
  } else {
    throw Error(Errc::kConfigError, fmt::format("unknown strategy '{}'", strategy));
  }
  const fs::path dir = c.out_dir;
  write_candidates_jsonl(cands, dir / "candidates.jsonl");

  const OracleHandle handle = make_backend(c, s.train);
  Oracle oracle(handle.backend);
  ApiLedger ledger(s.train.size(), c.budget_cap);
  ledger.set_phase("select");
  const LogitMapSet pairs = build_logitmap(cands, s.train, oracle, ledger);
  write_logitmap_jsonl(pairs, dir / "logitmap.jsonl");
  oracle.cache()->save(dir / "oracle_cache.jsonl");
  write_json_file(ledger_to_json(ledger), dir / "ledger_select.json");
  fmt::print("selected {} candidates{}\n", cands.candidates.size(), cands.truncated ? " (truncated)" : "");
  print_ledger("oracle usage", ledger);
}

void cmd_fit_gp(const ExperimentConfig& c, const std::string& pairs_path) {
  const LogitMapSet pairs = read_logitmap_jsonl(artifact(c, pairs_path, "logitmap.jsonl"));
  const GPPosterior gp = fit_from_config(c, pairs);
  const Splits s = load_or_generate(c);
  const GateConfig gate = calibrate_gate_threshold(gp, embeddings_of(s.train), c.gate_percentile);
  const fs::path dir = c.out_dir;
  std::ofstream(dir / "gp_posterior.json") << posterior_to_json(gp).dump() << '\n';
  write_json_file(gate_to_json(gate), dir / "gate.json");
  fmt::print("fitted GP on {} pairs: lengthscale={} signal_variance={} theta={}\n", pairs.size(),
             gp.kernel().lengthscale, gp.kernel().signal_variance, gate.threshold);
}

void cmd_train(const ExperimentConfig& c, const std::string& objective_name, const std::string& pairs_path,
               const std::string& posterior_path, const std::string& gate_path) {
  const Objective objective = parse_objective(objective_name);
  const Splits s = load_or_generate(c);
  const ProxyParams minus = prepare_minus(c, s.train);
  TrainConfig tc;
  tc.sgd = train_sgd(c);
  tc.objective = objective;
  tc.alpha = c.alpha;

  std::optional<OracleHandle> handle;
  std::optional<Oracle> oracle;
  ApiLedger ledger(s.train.size(), c.budget_cap);
  std::optional<GPPosterior> gp;
  if (objective != Objective::kPlainFt) {
    handle = make_backend(c, s.train);
    oracle.emplace(handle->backend);
  }
  if (objective == Objective::kGpGated) {
    gp = posterior_from_json(read_json_file(artifact(c, posterior_path, "gp_posterior.json")));
    tc.gate = gate_from_json(read_json_file(artifact(c, gate_path, "gate.json")));
    // The pairs were paid for during selection; count them and serve them from cache.
    ledger.set_phase("select");
    const LogitMapSet pairs = read_logitmap_jsonl(artifact(c, pairs_path, "logitmap.jsonl"));
    for (const auto& p : pairs.pairs()) {
      oracle->cache()->insert(p.example_id, p.oracle_logits);
      ledger.record(p.example_id);
    }
    ledger.set_phase("gate");
  } else if (objective == Objective::kCpt) {
    ledger.set_phase("train");
  }

  const TrainResult tr = train_proxy(tc, s.train, minus, gp ? &*gp : nullptr, oracle ? &*oracle : nullptr, &ledger);
  const std::string tag(objective_name);
  const fs::path dir = c.out_dir;
  std::ofstream(dir / fmt::format("checkpoint_{}.json", tag))
      << checkpoint_to_json(tr.params, tc.sgd.seed, config_hash(c)).dump() << '\n';
  write_metrics_csv(tr.metrics, dir / fmt::format("metrics_{}.csv", tag));
  write_json_file(ledger_to_json(ledger), dir / fmt::format("ledger_{}.json", tag));
  write_ledger_timeline_csv(ledger.timeline(), dir / fmt::format("ledger_timeline_{}.csv", tag));
  if (!tr.metrics.empty()) {
    fmt::print("{}: final loss {:.4f}, train accuracy {:.4f}\n", tag, tr.metrics.back().loss, tr.metrics.back().train_acc);
  }
  if (objective == Objective::kGpGated) {
    fmt::print("gate: {} GP signals, {} oracle fallbacks\n", tr.gate.gp_signals, tr.gate.oracle_signals);
  }
  print_ledger("training oracle usage", ledger);
}

void cmd_evaluate(const ExperimentConfig& c, const std::string& method, const std::string& checkpoint_path,
                  std::optional<double> alpha) {
  const Splits s = load_or_generate(c);
  const ProxyParams minus = prepare_minus(c, s.train);
  std::optional<ProxyParams> plus;
  if (method == "proxy" || method == "ensemble") {
    plus = checkpoint_from_json(read_json_file(artifact(c, checkpoint_path, "checkpoint_gp_gated.json")));
  }
  std::optional<OracleHandle> handle;
  std::optional<Oracle> oracle;
  ApiLedger ledger(s.test.size());
  if (method == "ensemble" || method == "oracle") {
    handle = make_backend(c, s.train);
    oracle.emplace(handle->backend);
  }
  Predictor predictor;
  if (method == "pretrain") predictor = proxy_predictor(minus);
  else if (method == "proxy") predictor = proxy_predictor(*plus);
  else if (method == "oracle") predictor = oracle_predictor(*oracle, ledger);
  else if (method == "ensemble") predictor = ensemble_predictor(*plus, minus, *oracle, ledger, alpha.value_or(c.alpha.alpha_test));
  else throw Error(Errc::kConfigError, fmt::format("unknown evaluation method '{}'", method));

  const EvaluationResult ev = evaluate(predictor, s.test, &ledger);
  const fs::path dir = c.out_dir;
  std::ofstream preds(dir / fmt::format("predictions_{}.csv", method));
  write_predictions_header(preds);
  write_predictions_rows(preds, ev.predictions, method);
  write_json_file(Json{{"method", method}, {"accuracy", ev.accuracy}, {"inference", ledger_to_json(ledger)}},
                  dir / fmt::format("evaluation_{}.json", method));
  fmt::print("{}: accuracy {:.4f} on {} examples\n", method, ev.accuracy, s.test.size());
  print_ledger("inference oracle usage", ledger);
}

void cmd_run_all(const ExperimentConfig& c) {
  const ExperimentResult r = run_experiment(c);
  fmt::print("{:<12} {:>9} {:>10} {:>10}  {}\n", "method", "accuracy", "train_api", "infer_api", "status");
  for (const auto& m : r.reports) {
    fmt::print("{:<12} {:>9.4f} {:>10.4f} {:>10.4f}  {}\n", m.method, m.accuracy, m.training_fraction, m.inference_fraction,
               m.failed ? "failed: " + m.error : "ok");
  }
  if (r.teacher_test_accuracy) fmt::print("teacher (oracle ceiling) test accuracy {:.4f}\n", *r.teacher_test_accuracy);
  fmt::print("artifacts in {}\n", c.out_dir);
}

void cmd_sweep_alpha(const ExperimentConfig& c, const std::string& train_grid, const std::string& test_grid) {
  const SweepResult r = sweep_alpha(c, parse_list(train_grid), parse_list(test_grid));
  const fs::path out = fs::path(c.out_dir) / "alpha_sweep.csv";
  write_sweep_csv(r, out);
  std::ifstream in(out);
  std::cout << in.rdbuf();
  fmt::print("Full-FT accuracy {:.4f}; wrote {}\n", r.full_ft_accuracy, out.string());
}

void cmd_export_diag(const ExperimentConfig& c, const std::string& dir_override, const std::string& timeline_path,
                     const std::string& budgets) {
  const GPPosterior gp = posterior_from_json(read_json_file(artifact(c, "", "gp_posterior.json")));
  const GateConfig gate = gate_from_json(read_json_file(artifact(c, "", "gate.json")));
  const auto timeline = read_ledger_timeline_csv(artifact(c, timeline_path, "ledger_timeline_GP-filter.csv"));
  const Splits s = load_or_generate(c);
  const OracleHandle handle = make_backend(c, s.train);
  Oracle oracle(handle.backend);

  DiagnosticInputs in;
  in.gp = &gp;
  in.train = &s.train;
  in.test = &s.test;
  in.gate = gate;
  in.oracle = &oracle;
  in.timeline = timeline;
  const fs::path dir = dir_override.empty() ? fs::path(c.out_dir) / "diagnostics" : fs::path(dir_override);
  const DiagnosticSummary sum = export_diagnostics(in, dir);
  fmt::print("uncertainty rows {} ({} above theta), GP-vs-oracle MAE {:.4f}, timeline rows {}\n", sum.uncertainty_rows,
             sum.above_threshold, sum.logits_mae, sum.timeline_rows);
  if (!budgets.empty()) {
    std::vector<std::size_t> sizes;
    for (double v : parse_list(budgets)) {
      if (!(v >= 1.0)) throw Error(Errc::kConfigError, "budgets must be positive pair counts");
      sizes.push_back(static_cast<std::size_t>(v));
    }
    const auto points = budget_sweep(c, sizes);
    write_budget_csv(points, dir / "budget_sweep.csv");
    for (const auto& p : points) {
      fmt::print("|D'|={:<5} MAE {:.4f} accuracy {:.4f} fraction {:.4f}\n", p.pairs, p.logits_mae, p.accuracy,
                 p.training_fraction);
    }
  }
  fmt::print("wrote diagnostics to {}\n", dir.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Budget-constrained black-box tuning with a GP surrogate"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config, "Experiment config (.toml or .json)")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Override the experiment and data seeds");
  app.add_option("--out-dir", g.out_dir, "Output directory (default from config)");
  app.add_option("--budget-cap", g.budget_cap, "Cap on unique training-time oracle queries");

  std::string format = "jsonl";
  auto* gen = app.add_subcommand("gen-data", "Write the train/test splits");
  gen->add_option("--format", format, "jsonl or csv")->check(CLI::IsMember({"jsonl", "csv"}));

  auto* cal = app.add_subcommand("calibrate-thresholds", "Calibrate the selection thresholds");

  std::string strategy = "filter", thresholds_path;
  std::optional<std::size_t> limit;
  auto* sel = app.add_subcommand("select", "Choose LogitMap pairs and query the oracle for them");
  sel->add_option("--strategy", strategy, "filter or random")->check(CLI::IsMember({"filter", "random"}));
  sel->add_option("--thresholds", thresholds_path, "thresholds.json from calibrate-thresholds");
  sel->add_option("--limit", limit, "Maximum number of pairs");

  std::string pairs_path;
  auto* fit = app.add_subcommand("fit-gp", "Fit the GP surrogate and calibrate the gate");
  fit->add_option("--pairs", pairs_path, "LogitMap pairs (default <out-dir>/logitmap.jsonl)");

  std::string objective = "gp_gated", posterior_path, gate_path;
  auto* train = app.add_subcommand("train", "Train the proxy");
  train->add_option("--objective", objective, "plain_ft, cpt or gp_gated")
      ->check(CLI::IsMember({"plain_ft", "cpt", "gp_gated"}));
  train->add_option("--pairs", pairs_path, "LogitMap pairs (default <out-dir>/logitmap.jsonl)");
  train->add_option("--posterior", posterior_path, "GP posterior (default <out-dir>/gp_posterior.json)");
  train->add_option("--gate", gate_path, "Gate threshold (default <out-dir>/gate.json)");

  std::string method = "ensemble", checkpoint_path;
  std::optional<double> alpha;
  auto* eval = app.add_subcommand("evaluate", "Evaluate on the test split");
  eval->add_option("--method", method, "ensemble, proxy, pretrain or oracle")
      ->check(CLI::IsMember({"ensemble", "proxy", "pretrain", "oracle"}));
  eval->add_option("--checkpoint", checkpoint_path, "Proxy checkpoint (default <out-dir>/checkpoint_gp_gated.json)");
  eval->add_option("--alpha", alpha, "Ensemble weight (default alpha.test)");

  auto* run_all = app.add_subcommand("run-all", "Run the six-method comparison");

  std::string train_grid = "0,0.4,0.8,1.2,1.6", test_grid = "0,0.4,0.8,1.2,1.6";
  auto* sweep = app.add_subcommand("sweep-alpha", "GP-filter accuracy over an alpha grid");
  sweep->add_option("--train-grid", train_grid, "Comma-separated alpha_train values");
  sweep->add_option("--test-grid", test_grid, "Comma-separated alpha_test values");

  std::string diag_dir, timeline_path, budgets;
  auto* diag = app.add_subcommand("export-diag", "Export uncertainty, logits and ledger diagnostics");
  diag->add_option("--dir", diag_dir, "Output directory (default <out-dir>/diagnostics)");
  diag->add_option("--timeline", timeline_path, "Ledger timeline (default <out-dir>/ledger_timeline_GP-filter.csv)");
  diag->add_option("--budgets", budgets, "Also sweep these |D'| sizes, e.g. 2,10,50,200");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    const ExperimentConfig c = resolve_config(g);
    if (*gen) cmd_gen_data(c, format);
    else if (*cal) cmd_calibrate(c);
    else if (*sel) cmd_select(c, strategy, thresholds_path, limit);
    else if (*fit) cmd_fit_gp(c, pairs_path);
    else if (*train) cmd_train(c, objective, pairs_path, posterior_path, gate_path);
    else if (*eval) cmd_evaluate(c, method, checkpoint_path, alpha);
    else if (*run_all) cmd_run_all(c);
    else if (*sweep) cmd_sweep_alpha(c, train_grid, test_grid);
    else if (*diag) cmd_export_diag(c, diag_dir, timeline_path, budgets);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    switch (e.code()) {
      case Errc::kConfigError:
      case Errc::kInvalidSpec:
        return kExitConfig;
      case Errc::kOracleUnavailable:
      case Errc::kBudgetExceeded:
        return kExitOracle;
      default:
        return kExitFailure;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return EXIT_SUCCESS;
}
