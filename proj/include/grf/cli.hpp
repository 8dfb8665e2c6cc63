#pragma once

// The `grf` command-line front end: train, sample, reconstruct, eval,
// latent-grid and selfcheck.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "grf/checkpoint.hpp"
#include "grf/chem.hpp"
#include "grf/error.hpp"
#include "grf/flow.hpp"
#include "grf/graph.hpp"
#include "grf/inversion.hpp"
#include "grf/likelihood.hpp"
#include "grf/linalg.hpp"
#include "grf/selfcheck.hpp"
#include "grf/training.hpp"
#include "json.hpp"

namespace grf {

inline constexpr const char* invalid_marker = "[invalid]";

// Config file: {"model": {...}, "train": {...}}; missing keys keep defaults.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

inline RunConfig load_run_config(const std::string& path) {
  RunConfig rc;
  if (path.empty()) return rc;
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("config '" + path + "': " + e.what());
  }
  if (j.contains("model")) rc.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) rc.train = train_config_from_json(j.at("train"));
  return rc;
}

// A dataset is either SMILES lines or graph JSON lines (*.jsonl).
inline std::vector<DatasetEntry> load_molecules(const std::string& path) {
  if (path.size() < 6 || path.substr(path.size() - 6) != ".jsonl") return load_dataset(path);
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path + "'");
  std::vector<DatasetEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      Molecule m = molecule_from_json(nlohmann::json::parse(line));
      std::string smi = detail::is_connected(m) && !m.atoms.empty() ? write_smiles(m) : "";
      out.push_back({smi, std::move(m), lineno});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::string sample_smiles(const Molecule& m, const ValenceTable& table) {
  return check_validity(m, table) ? canonical_smiles(m) : invalid_marker;
}

// Output sink: a file when a path is given, otherwise the provided stream.
class Sink {
 public:
  Sink(const std::string& path, std::ostream& fallback) : fallback_(fallback) {
    if (!path.empty()) {
      file_.open(path, std::ios::binary);
      if (!file_) throw DataError("cannot write '" + path + "'");
    }
  }
  std::ostream& get() { return file_.is_open() ? file_ : fallback_; }

 private:
  std::ofstream file_;
  std::ostream& fallback_;
};

inline std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

struct CliOptions {
  std::string config, dataset, ckpt, out, valence_table, query;
  std::uint64_t seed = 0;
  int iterations = 100;
  std::size_t count = 100;
  double tx = 0.65, ta = 0.69;
  int threads = 1;
  int epochs = -1;
  int grid_size = 5;
  double grid_step = 0.5;
  std::size_t instances = 1000;
  double inject_sigma = 0.0;
  std::size_t pca_molecules = 100;
  int series_terms = 20;
  int hutchinson_samples = 1;
};

inline ValenceTable valence_table_for(const CliOptions& o, const AtomVocabulary& vocab) {
  ValenceTable t = o.valence_table.empty() ? ValenceTable() : ValenceTable::load(o.valence_table);
  if (!t.covers(vocab)) throw DataError("valence table does not cover every atom type of the model");
  return t;
}

inline GrfModel require_model(const CliOptions& o) {
  if (o.ckpt.empty()) throw UsageError("--ckpt is required");
  GrfModel m = load_checkpoint(o.ckpt).state.model;
  m.for_each_block([](const ResidualBlock& b) { require_contractive(b, "checkpoint"); });
  return m;
}

inline std::vector<DatasetEntry> require_dataset(const CliOptions& o) {
  if (o.dataset.empty()) throw UsageError("--dataset is required");
  auto d = load_molecules(o.dataset);
  if (d.empty()) throw DataError("dataset '" + o.dataset + "' has no molecules");
  return d;
}

// ---------------------------------------------------------------------------

inline int cmd_train(const CliOptions& o, std::ostream& log) {
  if (o.out.empty()) throw UsageError("train: --out <directory> is required");
  const auto entries = require_dataset(o);
  RunConfig rc = load_run_config(o.config);
  TrainState state;
  if (!o.ckpt.empty()) {
    Checkpoint c = load_checkpoint(o.ckpt);
    state = std::move(c.state);
    rc.train = c.train_config;
    rc.model = state.model.config;
  } else {
    rc.model.lipschitz_budget = rc.train.lipschitz_budget;
    rc.model.init_seed = derive_seed(o.seed, {stream::init});
    state.model = make_model(rc.model);
  }
  rc.train.rng_seed = o.seed;
  if (o.epochs >= 0) rc.train.epochs = o.epochs;
  rc.train.threads = o.threads;
  const auto data = pad_dataset(entries, rc.model.vocab, rc.model.n_max, rc.model.n_bond_types);

  namespace fs = std::filesystem;
  fs::create_directories(o.out);
  const fs::path dir(o.out);
  const TrainConfig cfg = rc.train;
  auto on_epoch = [&](const TrainState& s) {
    const TrainRecord& last = s.history.back();
    log << "epoch " << s.epochs_done << " step " << last.step << " nll " << format_double(last.nll) << '\n';
    if (cfg.checkpoint_every > 0 && s.epochs_done % cfg.checkpoint_every == 0) {
      char name[64];
      std::snprintf(name, sizeof name, "checkpoint_epoch%04d.json", s.epochs_done);
      save_checkpoint((dir / name).string(), s, cfg);
    }
  };
  state = train(std::move(state), data, cfg, on_epoch);
  save_checkpoint((dir / "checkpoint.json").string(), state, cfg);
  std::ofstream csv(dir / "loss.csv", std::ios::binary);
  if (!csv) throw DataError("cannot write loss.csv");
  csv << "epoch,step,nll,logdet_mean,prior_mean\n";
  for (const TrainRecord& r : state.history) {
    csv << r.epoch << ',' << r.step << ',' << format_double(r.nll) << ',' << format_double(r.logdet_mean) << ','
        << format_double(r.prior_mean) << '\n';
  }
  return 0;
}

inline int cmd_sample(const CliOptions& o, std::ostream& out, std::ostream& log) {
  const GrfModel model = require_model(o);
  const ValenceTable table = valence_table_for(o, model.config.vocab);
  std::unordered_set<std::string> training;
  if (!o.dataset.empty()) training = canonical_set(load_molecules(o.dataset));
  const InversionConfig inv{o.iterations, 1e-8, 5};
  const auto graphs = generate(model, o.count, o.tx, o.ta, inv, o.seed, o.threads);
  Sink sink(o.out, out);
  for (const MolGraph& g : graphs) sink.get() << sample_smiles(unpad_graph(g, model.config.vocab), table) << '\n';
  const MetricsReport m = compute_metrics(graphs, model.config.vocab, table, training);
  nlohmann::json metrics = m.to_json();
  metrics["t_x"] = o.tx;
  metrics["t_a"] = o.ta;
  metrics["seed"] = o.seed;
  metrics["novelty_reference"] = o.dataset.empty() ? "none" : "dataset";
  if (o.out.empty()) {
    log << metrics.dump() << '\n';
  } else {
    std::ofstream side(o.out + ".metrics.json", std::ios::binary);
    if (!side) throw DataError("cannot write metrics sidecar");
    side << metrics.dump(2) << '\n';
  }
  return 0;
}

// Normalised L2 distance between two dequantised graphs.
inline double normalized_l2(const DequantGraph& got, const DequantGraph& want) {
  double num = 0.0, den = 0.0;
  auto acc = [&](std::span<const double> a, std::span<const double> b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      num += (a[i] - b[i]) * (a[i] - b[i]);
      den += b[i] * b[i];
    }
  };
  acc(got.adjacency_c.flat(), want.adjacency_c.flat());
  acc(got.features_c.flat(), want.features_c.flat());
  return std::sqrt(num) / std::max(1e-300, std::sqrt(den));
}

inline std::vector<int> iteration_schedule(int max_iterations) {
  std::vector<int> s;
  for (int k : {1, 2, 5, 10, 20, 30, 50, 100, 200, 500, 1000})
    if (k < max_iterations) s.push_back(k);
  s.push_back(max_iterations);
  return s;
}

inline int cmd_reconstruct(const CliOptions& o, std::ostream& out) {
  const GrfModel model = require_model(o);
  if (o.iterations < 1) throw UsageError("--iterations must be >= 1");
  auto entries = require_dataset(o);
  if (o.count < entries.size()) entries.resize(o.count);
  const auto data = pad_dataset(entries, model.config.vocab, model.config.n_max, model.config.n_bond_types);
  const auto schedule = iteration_schedule(o.iterations);
  std::vector<std::vector<double>> err(schedule.size(), std::vector<double>(data.size()));
  std::vector<std::vector<char>> exact(schedule.size(), std::vector<char>(data.size()));
  parallel_for(data.size(), o.threads, [&](std::size_t i) {
    const DequantGraph deq =
        dequantize(data[i], model.config.noise_scale, derive_seed(o.seed, {stream::dequant, i}));
    const LatentPoint z = encode(model, deq, data[i]);
    for (std::size_t k = 0; k < schedule.size(); ++k) {
      const DecodedGraph d = invert_flow(model, z, InversionConfig{schedule[k], 0.0, 5});
      err[k][i] = normalized_l2(d.continuous, deq);
      exact[k][i] = d.graph == data[i];
    }
  });
  Sink sink(o.out, out);
  sink.get() << "iterations,mean_normalized_l2,max_normalized_l2,exact_rate\n";
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    double mean = 0.0, worst = 0.0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      mean += err[k][i] / static_cast<double>(data.size());
      worst = std::max(worst, err[k][i]);
      ok += exact[k][i] ? 1 : 0;
    }
    sink.get() << schedule[k] << ',' << format_double(mean) << ',' << format_double(worst) << ','
               << format_double(static_cast<double>(ok) / static_cast<double>(data.size())) << '\n';
  }
  return 0;
}

inline int cmd_eval(const CliOptions& o, std::ostream& out) {
  const GrfModel model = require_model(o);
  const auto entries = require_dataset(o);
  const auto data = pad_dataset(entries, model.config.vocab, model.config.n_max, model.config.n_bond_types);
  LogDetEstimatorConfig est{o.series_terms, o.hutchinson_samples, ProbeKind::Rademacher, o.seed};
  std::vector<FlowTrace> traces(data.size());
  parallel_for(data.size(), o.threads,
               [&](std::size_t i) { traces[i] = full_logp(model, data[i], est, derive_seed(o.seed, {i})); });
  Sink sink(o.out, out);
  for (std::size_t i = 0; i < data.size(); ++i) {
    nlohmann::json j = traces[i].to_json();
    j["index"] = i;
    j["smiles"] = entries[i].smiles;
    j["nll"] = -traces[i].total_logp;
    sink.get() << j.dump() << '\n';
  }
  return 0;
}

// Top-2 principal directions of the latent codes via the Gram matrix (the
// codes outnumber the molecules).
inline std::pair<std::vector<double>, std::vector<double>> principal_plane(
    const std::vector<std::vector<double>>& codes) {
  const std::size_t n = codes.size(), d = codes.front().size();
  if (n < 3) throw DataError("latent-grid: need at least 3 molecules for PCA");
  std::vector<double> mean(d, 0.0);
  for (const auto& c : codes)
    for (std::size_t k = 0; k < d; ++k) mean[k] += c[k] / static_cast<double>(n);
  Matrix zc(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < d; ++k) zc(i, k) = codes[i][k] - mean[k];
  const SymmetricEigen eig = sym_eigen(matmul_nt(zc, zc));
  std::vector<std::vector<double>> dirs;
  for (std::size_t t = 0; t < 2; ++t) {
    const std::size_t col = n - 1 - t;  // ascending order
    std::vector<double> dir(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < d; ++k) dir[k] += eig.vectors(i, col) * zc(i, k);
    const double nrm = norm2(dir);
    if (!(nrm > 0.0)) throw NumericalError("latent-grid: degenerate principal direction");
    // Fix the sign so the largest-magnitude component is positive.
    const auto big = std::max_element(dir.begin(), dir.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
    const double sign = *big < 0.0 ? -1.0 : 1.0;
    for (double& x : dir) x *= sign / nrm;
    dirs.push_back(std::move(dir));
  }
  return {dirs[0], dirs[1]};
}

inline int cmd_latent_grid(const CliOptions& o, std::ostream& out) {
  const GrfModel model = require_model(o);
  const ValenceTable table = valence_table_for(o, model.config.vocab);
  auto entries = require_dataset(o);
  if (entries.size() > o.pca_molecules) entries.resize(o.pca_molecules);
  const auto data = pad_dataset(entries, model.config.vocab, model.config.n_max, model.config.n_bond_types);
  std::vector<std::vector<double>> codes(data.size());
  parallel_for(data.size(), o.threads, [&](std::size_t i) {
    const DequantGraph deq =
        dequantize(data[i], model.config.noise_scale, derive_seed(o.seed, {stream::dequant, i}));
    codes[i] = encode(model, deq, data[i]).concat();
  });
  const auto [d1, d2] = principal_plane(codes);

  std::vector<double> center;
  if (o.query.empty()) {
    center = codes.front();
  } else {
    const MolGraph q =
        pad_graph(parse_smiles(o.query), model.config.vocab, model.config.n_max, model.config.n_bond_types);
    const DequantGraph deq = dequantize(q, model.config.noise_scale, derive_seed(o.seed, {stream::dequant, 1u << 20}));
    center = encode(model, deq, q).concat();
  }
  const int k = o.grid_size;
  if (k < 0) throw UsageError("--grid-size must be >= 0");
  const std::size_t side = static_cast<std::size_t>(2 * k + 1);
  std::vector<std::string> cells(side * side);
  parallel_for(cells.size(), o.threads, [&](std::size_t c) {
    const double a = (static_cast<int>(c / side) - k) * o.grid_step;
    const double b = (static_cast<int>(c % side) - k) * o.grid_step;
    std::vector<double> z = center;
    for (std::size_t t = 0; t < z.size(); ++t) z[t] += a * d1[t] + b * d2[t];
    const MolGraph g = invert_flow(model, LatentPoint::split(z, model.shape()), InversionConfig{o.iterations}).graph;
    cells[c] = sample_smiles(unpad_graph(g, model.config.vocab), table);
  });
  Sink sink(o.out, out);
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const int i = static_cast<int>(c / side) - k, j = static_cast<int>(c % side) - k;
    nlohmann::json row{{"i", i}, {"j", j}, {"x", i * o.grid_step}, {"y", j * o.grid_step},
                       {"smiles", cells[c]}, {"valid", cells[c] != invalid_marker}};
    sink.get() << row.dump() << '\n';
  }
  return 0;
}

inline int cmd_selfcheck(const CliOptions& o, std::ostream& out) {
  std::optional<GrfModel> model;
  if (!o.ckpt.empty()) model = load_checkpoint(o.ckpt).state.model;
  SelfcheckOptions opt;
  opt.instances = o.instances;
  opt.seed = o.seed;
  opt.inject_sigma = o.inject_sigma;
  opt.model = model ? &*model : nullptr;
  const auto rows = run_selfcheck(opt);
  Sink sink(o.out, out);
  std::ostream& s = sink.get();
  s << std::left << std::setw(28) << "check" << std::setw(10) << "instances" << std::setw(11) << "violations"
    << std::setw(24) << "worst" << "result\n";
  bool ok = true;
  for (const SelfcheckRow& r : rows) {
    s << std::left << std::setw(28) << r.name << std::setw(10) << r.instances << std::setw(11) << r.violations
      << std::setw(24) << format_double(r.worst) << (r.pass() ? "PASS" : "FAIL") << '\n';
    ok = ok && r.pass();
  }
  return ok ? 0 : static_cast<int>(ExitCode::Numerical);
}

// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Graph residual flow for molecular graphs", "grf"};
  app.require_subcommand(1, 1);
  CliOptions o;

  auto common = [&](CLI::App* c) {
    c->add_option("--seed", o.seed, "RNG seed");
    c->add_option("--out", o.out, "Output path");
    c->add_option("--threads", o.threads, "Worker threads")->check(CLI::PositiveNumber);
  };
  auto* train = app.add_subcommand("train", "Train a model on a SMILES dataset");
  common(train);
  train->add_option("--config", o.config, "JSON config with model/train sections");
  train->add_option("--dataset", o.dataset, "Training molecules")->required();
  train->add_option("--ckpt", o.ckpt, "Resume from checkpoint");
  train->add_option("--epochs", o.epochs, "Override the configured epoch count");

  auto* sample = app.add_subcommand("sample", "Draw molecules from the prior");
  common(sample);
  sample->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  sample->add_option("--count", o.count, "Number of samples");
  sample->add_option("--tx", o.tx, "Feature temperature");
  sample->add_option("--ta", o.ta, "Adjacency temperature");
  sample->add_option("--iterations", o.iterations, "Fixed-point iterations per layer");
  sample->add_option("--dataset", o.dataset, "Training set for novelty");
  sample->add_option("--valence-table", o.valence_table, "JSON symbol -> max valence");

  auto* recon = app.add_subcommand("reconstruct", "Encode and invert dataset molecules");
  common(recon);
  recon->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  recon->add_option("--dataset", o.dataset, "Molecules")->required();
  recon->add_option("--iterations", o.iterations, "Largest fixed-point iteration count");
  recon->add_option("--count", o.count, "Use at most this many molecules");

  auto* eval = app.add_subcommand("eval", "Per-molecule log-likelihood traces");
  common(eval);
  eval->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  eval->add_option("--dataset", o.dataset, "Molecules")->required();
  eval->add_option("--series-terms", o.series_terms, "Power-series terms");
  eval->add_option("--probes", o.hutchinson_samples, "Hutchinson probes per block");

  auto* grid = app.add_subcommand("latent-grid", "Decode a 2-D grid in the top principal plane");
  common(grid);
  grid->add_option("--ckpt", o.ckpt, "Checkpoint")->required();
  grid->add_option("--dataset", o.dataset, "Molecules for PCA")->required();
  grid->add_option("--query", o.query, "Centre molecule (default: first dataset entry)");
  grid->add_option("--grid-size", o.grid_size, "Half-width in steps");
  grid->add_option("--grid-step", o.grid_step, "Step length");
  grid->add_option("--iterations", o.iterations, "Fixed-point iterations per layer");
  grid->add_option("--valence-table", o.valence_table, "JSON symbol -> max valence");

  auto* check = app.add_subcommand("selfcheck", "Randomised checks of the contraction guarantees");
  common(check);
  check->add_option("--instances", o.instances, "Instances per check");
  check->add_option("--ckpt", o.ckpt, "Also check this model's blocks");
  check->add_option("--inject-over-budget", o.inject_sigma, "Test hook: force one weight per block to this norm")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : static_cast<int>(ExitCode::Usage);
  }
  if (o.count < 1 && !check->parsed()) {
    err << "error: --count must be >= 1\n";
    return static_cast<int>(ExitCode::Usage);
  }
  try {
    if (train->parsed()) return cmd_train(o, err);
    if (sample->parsed()) return cmd_sample(o, out, err);
    if (recon->parsed()) return cmd_reconstruct(o, out);
    if (eval->parsed()) return cmd_eval(o, out);
    if (grid->parsed()) return cmd_latent_grid(o, out);
    if (check->parsed()) return cmd_selfcheck(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::Usage);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::Numerical);
  }
  return static_cast<int>(ExitCode::Usage);
}

}  // namespace grf
