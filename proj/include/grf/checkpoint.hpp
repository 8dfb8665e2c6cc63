#pragma once

// JSON serialisation of configurations, models and training state. Doubles are
// written with max_digits10 so a save/load cycle is bit-exact.

#include <fstream>
#include <sstream>
#include <string>

#include "grf/error.hpp"
#include "grf/flow.hpp"
#include "grf/training.hpp"
#include "json.hpp"

namespace grf {

inline constexpr int checkpoint_version = 1;

using nlohmann::json;

inline json to_json(const Matrix& m) { return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.values()}}; }

inline Matrix matrix_from_json(const json& j) {
  try {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                  j.at("data").get<std::vector<double>>());
  } catch (const json::exception& e) {
    throw DataError(std::string("matrix: ") + e.what());
  }
}

namespace detail {

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline json to_json(const ModelConfig& c) {
  return {{"atom_types", c.vocab.symbols()},
          {"n_max", c.n_max},
          {"n_bond_types", c.n_bond_types},
          {"gcn_blocks", c.gcn_blocks},
          {"gcn_layers", c.gcn_layers},
          {"mlp_blocks", c.mlp_blocks},
          {"mlp_layers", c.mlp_layers},
          {"adjacency_layout", to_string(c.adjacency_layout)},
          {"gcn_mode", to_string(c.gcn_mode)},
          {"adjacency_rank", c.adjacency_rank},
          {"bias", c.bias},
          {"lipschitz_budget", c.lipschitz_budget},
          {"noise_scale", c.noise_scale},
          {"init_gain", c.init_gain},
          {"init_seed", c.init_seed}};
}

// Missing keys keep their defaults.
inline ModelConfig model_config_from_json(const json& j, ModelConfig c = {}) {
  try {
    if (j.contains("atom_types")) c.vocab = AtomVocabulary(j.at("atom_types").get<std::vector<std::string>>());
    detail::read_opt(j, "n_max", c.n_max);
    detail::read_opt(j, "n_bond_types", c.n_bond_types);
    detail::read_opt(j, "gcn_blocks", c.gcn_blocks);
    detail::read_opt(j, "gcn_layers", c.gcn_layers);
    detail::read_opt(j, "mlp_blocks", c.mlp_blocks);
    detail::read_opt(j, "mlp_layers", c.mlp_layers);
    if (j.contains("adjacency_layout"))
      c.adjacency_layout = adjacency_layout_from_string(j.at("adjacency_layout").get<std::string>());
    if (j.contains("gcn_mode")) c.gcn_mode = gcn_mode_from_string(j.at("gcn_mode").get<std::string>());
    detail::read_opt(j, "adjacency_rank", c.adjacency_rank);
    detail::read_opt(j, "bias", c.bias);
    detail::read_opt(j, "lipschitz_budget", c.lipschitz_budget);
    detail::read_opt(j, "noise_scale", c.noise_scale);
    detail::read_opt(j, "init_gain", c.init_gain);
    detail::read_opt(j, "init_seed", c.init_seed);
  } catch (const json::exception& e) {
    throw DataError(std::string("model config: ") + e.what());
  }
  if (c.n_max < 1) throw DataError("model config: n_max must be >= 1");
  if (c.adjacency_rank < 0) throw DataError("model config: adjacency_rank must be >= 0");
  if (!(c.noise_scale > 0.0 && c.noise_scale < 1.0)) throw DataError("model config: noise_scale must lie in (0, 1)");
  return c;
}

inline json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"epochs", c.epochs},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"lipschitz_budget", c.lipschitz_budget},
          {"series_terms", c.series_terms},
          {"hutchinson_samples", c.hutchinson_samples},
          {"probe", to_string(c.probe)},
          {"rng_seed", c.rng_seed},
          {"checkpoint_every", c.checkpoint_every},
          {"sn_iterations", c.sn_iterations}};
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  try {
    detail::read_opt(j, "batch_size", c.batch_size);
    detail::read_opt(j, "learning_rate", c.learning_rate);
    detail::read_opt(j, "epochs", c.epochs);
    detail::read_opt(j, "beta1", c.beta1);
    detail::read_opt(j, "beta2", c.beta2);
    detail::read_opt(j, "epsilon", c.epsilon);
    detail::read_opt(j, "lipschitz_budget", c.lipschitz_budget);
    detail::read_opt(j, "series_terms", c.series_terms);
    detail::read_opt(j, "hutchinson_samples", c.hutchinson_samples);
    if (j.contains("probe")) c.probe = probe_kind_from_string(j.at("probe").get<std::string>());
    detail::read_opt(j, "rng_seed", c.rng_seed);
    detail::read_opt(j, "checkpoint_every", c.checkpoint_every);
    detail::read_opt(j, "sn_iterations", c.sn_iterations);
  } catch (const json::exception& e) {
    throw DataError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

inline json to_json(const Weight& w) {
  json j{{"budget", w.budget},
         {"sn", {{"u", w.sn.u}, {"v", w.sn.v}, {"sigma", w.sn.sigma_estimate},
                 {"iterations_per_step", w.sn.iterations_per_step}}}};
  if (w.low_rank()) {
    j["u"] = to_json(w.u);
    j["v"] = to_json(w.v);
  } else {
    j["full"] = to_json(w.full);
  }
  return j;
}

inline Weight weight_from_json(const json& j) {
  Weight w;
  w.budget = j.at("budget").get<double>();
  if (j.contains("full")) {
    w.full = matrix_from_json(j.at("full"));
  } else {
    w.u = matrix_from_json(j.at("u"));
    w.v = matrix_from_json(j.at("v"));
  }
  const json& sn = j.at("sn");
  w.sn.u = sn.at("u").get<std::vector<double>>();
  w.sn.v = sn.at("v").get<std::vector<double>>();
  w.sn.sigma_estimate = sn.at("sigma").get<double>();
  w.sn.iterations_per_step = sn.at("iterations_per_step").get<int>();
  return w;
}

inline json to_json(const ResidualBlock& b) {
  json layers = json::array();
  for (const Layer& l : b.layers) {
    json ws = json::array();
    for (const Weight& w : l.weights) ws.push_back(to_json(w));
    json jl{{"weights", ws}};
    if (!l.bias.empty()) jl["bias"] = to_json(l.bias);
    layers.push_back(jl);
  }
  return {{"kind", b.kind == LayerKind::Graph ? "graph" : "dense"},
          {"lipschitz_budget", b.lipschitz_budget},
          {"layers", layers}};
}

inline ResidualBlock block_from_json(const json& j) {
  ResidualBlock b;
  b.kind = j.at("kind").get<std::string>() == "graph" ? LayerKind::Graph : LayerKind::Dense;
  b.lipschitz_budget = j.at("lipschitz_budget").get<double>();
  for (const json& jl : j.at("layers")) {
    Layer l;
    for (const json& jw : jl.at("weights")) l.weights.push_back(weight_from_json(jw));
    if (jl.contains("bias")) l.bias = matrix_from_json(jl.at("bias"));
    b.layers.push_back(std::move(l));
  }
  return b;
}

inline json to_json(const GrfModel& m) {
  json fb = json::array(), ab = json::array();
  for (const auto& b : m.feature_blocks) fb.push_back(to_json(b));
  for (const auto& b : m.adjacency_blocks) ab.push_back(to_json(b));
  return {{"config", to_json(m.config)}, {"feature_blocks", fb}, {"adjacency_blocks", ab}};
}

inline GrfModel model_from_json(const json& j) {
  GrfModel m;
  try {
    m.config = model_config_from_json(j.at("config"));
    for (const json& b : j.at("feature_blocks")) m.feature_blocks.push_back(block_from_json(b));
    for (const json& b : j.at("adjacency_blocks")) m.adjacency_blocks.push_back(block_from_json(b));
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint model: ") + e.what());
  }
  // The architecture must match the stored config.
  if (count_parameters(m) != count_parameters(m.config) ||
      m.feature_blocks.size() != static_cast<std::size_t>(m.config.gcn_blocks) ||
      m.adjacency_blocks.size() != static_cast<std::size_t>(m.config.mlp_blocks)) {
    throw DataError("checkpoint model: weights do not match the stored configuration");
  }
  return m;
}

inline json to_json(const TrainState& s, const TrainConfig& cfg) {
  json m = json::array(), v = json::array(), hist = json::array();
  for (const Matrix& x : s.adam.m) m.push_back(to_json(x));
  for (const Matrix& x : s.adam.v) v.push_back(to_json(x));
  for (const TrainRecord& r : s.history) {
    hist.push_back({r.epoch, r.step, r.nll, r.logdet_mean, r.prior_mean});
  }
  return {{"format", "grf-checkpoint"},
          {"version", checkpoint_version},
          {"model", to_json(s.model)},
          {"train_config", to_json(cfg)},
          {"epochs_done", s.epochs_done},
          {"global_step", s.global_step},
          {"adam", {{"step", s.adam.step}, {"m", m}, {"v", v}}},
          {"history", hist}};
}

struct Checkpoint {
  TrainState state;
  TrainConfig train_config;
};

inline Checkpoint checkpoint_from_json(const json& j) {
  if (j.value("format", "") != "grf-checkpoint") throw DataError("not a grf checkpoint");
  const int version = j.value("version", -1);
  if (version != checkpoint_version) {
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                    std::to_string(checkpoint_version) + ")");
  }
  Checkpoint c;
  c.state.model = model_from_json(j.at("model"));
  try {
    if (j.contains("train_config")) c.train_config = train_config_from_json(j.at("train_config"));
    c.state.epochs_done = j.value("epochs_done", 0);
    c.state.global_step = j.value("global_step", 0L);
    if (j.contains("adam")) {
      const json& a = j.at("adam");
      c.state.adam.step = a.at("step").get<long>();
      for (const json& x : a.at("m")) c.state.adam.m.push_back(matrix_from_json(x));
      for (const json& x : a.at("v")) c.state.adam.v.push_back(matrix_from_json(x));
    }
    if (j.contains("history")) {
      for (const json& r : j.at("history")) {
        c.state.history.push_back({r.at(0).get<int>(), r.at(1).get<long>(), r.at(2).get<double>(),
                                   r.at(3).get<double>(), r.at(4).get<double>()});
      }
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  return c;
}

inline void save_checkpoint(const std::string& path, const TrainState& s, const TrainConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint '" + path + "'");
  out << to_json(s, cfg).dump() << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("checkpoint '" + path + "' is not valid JSON: " + e.what());
  }
  return checkpoint_from_json(j);
}

}  // namespace grf
