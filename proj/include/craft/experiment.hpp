#pragma once

// Experiment configs (YAML, dotted or nested keys), mode dispatch and artifacts.

#include "craft/io.hpp"
#include "craft/pimh.hpp"
#include "craft/training.hpp"

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace craft {

struct TargetSpec {
  std::string name = "gaussian";
  int dim = 2;
  std::vector<double> mean;   // empty: zeros; one value: broadcast
  std::vector<double> scale;  // empty: ones; one value: broadcast
  double log_z = 0.0;
  std::vector<double> mixture_weights;
  std::vector<std::vector<double>> mixture_means;
  std::vector<double> mixture_scales;
  Phi4Config phi4;
  LgcpConfig lgcp;
  std::string lgcp_counts_file;
};

struct FlowSpec {
  std::string family = "identity";
  int num_pairs = 1;
  int hidden = 8;
  int kernel = 3;
};

struct TrainerSpec {
  std::string algorithm = "none";
  int iterations = 0;
  OptimizerConfig optimizer = OptimizerConfig::craft_default();
  int validation_particles = 0;  // aft_practical; 0 means sampler.num_particles
  int test_particles = 0;
};

struct SamplerSpec {
  int num_particles = 1000;
  ResampleConfig resample;
  HmcConfig hmc;
};

struct PimhSpec {
  long steps = 1000;
  int num_particles = 0;  // 0 means sampler.num_particles
  int chains = 1;
  double max_seconds = 0.0;
  int num_batches = 20;
};

struct GoldSpec {
  int num_temperatures = 90;
  int num_particles = 2000;
  int runs = 1;
};

struct BaselineSpec {
  std::vector<std::string> algorithms{"snf", "vi", "aft_simple", "hmc"};
  long hmc_steps = 10000;
  long hmc_burn_in = 100;
  double hmc_max_seconds = 0.0;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::string mode = "deploy";
  std::optional<std::uint64_t> seed;
  std::string output_dir;
  std::string checkpoint;
  TargetSpec target;
  double base_scale = 1.0;
  int num_temperatures = 4;
  std::vector<double> betas;  // empty: uniform
  FlowSpec flow;
  TrainerSpec trainer;
  SamplerSpec sampler;
  PimhSpec pimh;
  GoldSpec gold;
  int calibrate_runs = 50;
  BaselineSpec baselines;
  std::vector<std::pair<std::string, std::string>> desk_scale;  // key, YAML value text

  std::string base_dir;  // resolves relative paths; not serialized
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> errors) : std::runtime_error(join(errors)), errors_(std::move(errors)) {}
  const std::vector<std::string>& errors() const noexcept { return errors_; }

 private:
  static std::string join(const std::vector<std::string>& e) {
    std::string s = "invalid config:";
    for (const auto& x : e) s += "\n  " + x;
    return s;
  }
  std::vector<std::string> errors_;
};

struct ParseOptions {
  std::string base_dir;
  bool desk_scale = false;
  std::vector<std::pair<std::string, std::string>> overrides;  // applied last
};

namespace config_detail {

inline const std::set<std::string>& modes() {
  static const std::set<std::string> s{"train", "deploy", "pimh", "baselines", "gold-standard", "calibrate"};
  return s;
}
inline const std::set<std::string>& algorithms() {
  static const std::set<std::string> s{"craft", "aft_simple", "aft_practical", "snf", "vi", "none"};
  return s;
}
inline const std::set<std::string>& targets() {
  static const std::set<std::string> s{"gaussian", "mixture", "phi4", "lgcp"};
  return s;
}
inline const std::set<std::string>& families() {
  static const std::set<std::string> s{"identity", "diag_affine", "coupling", "conv_coupling"};
  return s;
}
inline const std::set<std::string>& baseline_names() {
  static const std::set<std::string> s{"snf", "vi", "aft_simple", "smc", "hmc"};
  return s;
}

inline YAML::Node to_node(double v) { return YAML::Node(format_double(v)); }
inline YAML::Node to_node(int v) { return YAML::Node(v); }
inline YAML::Node to_node(long v) { return YAML::Node(v); }
inline YAML::Node to_node(std::uint64_t v) { return YAML::Node(v); }
inline YAML::Node to_node(bool v) { return YAML::Node(v ? "true" : "false"); }
inline YAML::Node to_node(const std::string& v) { return YAML::Node(v); }

template <class T>
YAML::Node to_node(const std::vector<T>& v) {
  YAML::Node n(YAML::NodeType::Sequence);
  for (const auto& x : v) n.push_back(to_node(x));
  n.SetStyle(YAML::EmitterStyle::Flow);
  return n;
}

template <class T>
T from_node(const YAML::Node& n) {
  if constexpr (std::is_same_v<T, std::string>) {
    if (n.IsNull()) return {};
    if (!n.IsScalar()) throw std::invalid_argument("expected a string");
    return n.Scalar();
  } else if constexpr (std::is_arithmetic_v<T>) {
    if (!n.IsScalar()) throw std::invalid_argument("expected a scalar");
    try {
      return n.as<T>();
    } catch (const YAML::Exception&) {
      throw std::invalid_argument(std::is_same_v<T, bool> ? "expected true or false"
                                  : std::is_floating_point_v<T> ? "expected a number"
                                                                : "expected an integer");
    }
  } else {
    using E = typename T::value_type;
    T out;
    if (n.IsNull()) return out;
    if (n.IsScalar()) {
      out.push_back(from_node<E>(n));
      return out;
    }
    if (!n.IsSequence()) throw std::invalid_argument("expected a list");
    for (const auto& e : n) out.push_back(from_node<E>(e));
    return out;
  }
}

struct Field {
  std::string key;
  std::function<void(const YAML::Node&, ExperimentConfig&)> set;
  std::function<YAML::Node(const ExperimentConfig&)> get;
};

template <class T, class Access>
Field bind(std::string key, Access access) {
  return {std::move(key), [access](const YAML::Node& n, ExperimentConfig& c) { access(c) = from_node<T>(n); },
          [access](const ExperimentConfig& c) { return to_node(access(const_cast<ExperimentConfig&>(c))); }};
}

template <class Access>
Field choice(std::string key, const std::set<std::string>& allowed, Access access) {
  return {key,
          [key, &allowed, access](const YAML::Node& n, ExperimentConfig& c) {
            const auto v = from_node<std::string>(n);
            if (!allowed.count(v)) {
              std::string opts;
              for (const auto& a : allowed) opts += (opts.empty() ? "" : ", ") + a;
              throw std::invalid_argument("'" + v + "' is not one of " + opts);
            }
            access(c) = v;
          },
          [access](const ExperimentConfig& c) { return to_node(access(const_cast<ExperimentConfig&>(c))); }};
}

#define CRAFT_FIELD(T, key, member) bind<T>(key, [](ExperimentConfig& c) -> T& { return c.member; })

inline const std::vector<Field>& fields() {
  using S = std::string;
  using VD = std::vector<double>;
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back(CRAFT_FIELD(S, "name", name));
    v.push_back(choice("mode", modes(), [](ExperimentConfig& c) -> S& { return c.mode; }));
    v.push_back({"seed", [](const YAML::Node& n, ExperimentConfig& c) { c.seed = from_node<std::uint64_t>(n); },
                 [](const ExperimentConfig& c) { return c.seed ? to_node(*c.seed) : YAML::Node(); }});
    v.push_back(CRAFT_FIELD(S, "output_dir", output_dir));
    v.push_back(CRAFT_FIELD(S, "checkpoint", checkpoint));

    v.push_back(choice("target.name", targets(), [](ExperimentConfig& c) -> S& { return c.target.name; }));
    v.push_back(CRAFT_FIELD(int, "target.dim", target.dim));
    v.push_back(CRAFT_FIELD(VD, "target.mean", target.mean));
    v.push_back(CRAFT_FIELD(VD, "target.scale", target.scale));
    v.push_back(CRAFT_FIELD(double, "target.log_z", target.log_z));
    v.push_back(CRAFT_FIELD(VD, "target.mixture.weights", target.mixture_weights));
    v.push_back(CRAFT_FIELD(std::vector<VD>, "target.mixture.means", target.mixture_means));
    v.push_back(CRAFT_FIELD(VD, "target.mixture.scales", target.mixture_scales));
    v.push_back(CRAFT_FIELD(int, "target.phi4.lattice_side", target.phi4.lattice_side));
    v.push_back(CRAFT_FIELD(double, "target.phi4.coupling", target.phi4.coupling));
    v.push_back(CRAFT_FIELD(double, "target.phi4.mass_squared", target.phi4.mass_squared));
    v.push_back(CRAFT_FIELD(int, "target.lgcp.lattice_side", target.lgcp.lattice_side));
    v.push_back(CRAFT_FIELD(double, "target.lgcp.kernel_variance", target.lgcp.kernel_variance));
    v.push_back(CRAFT_FIELD(double, "target.lgcp.kernel_lengthscale", target.lgcp.kernel_lengthscale));
    v.push_back(CRAFT_FIELD(double, "target.lgcp.mean_offset", target.lgcp.mean_offset));
    v.push_back(CRAFT_FIELD(std::vector<int>, "target.lgcp.counts", target.lgcp.counts));
    v.push_back(CRAFT_FIELD(S, "target.lgcp.counts_file", target.lgcp_counts_file));

    v.push_back(CRAFT_FIELD(double, "base.scale", base_scale));
    v.push_back(CRAFT_FIELD(int, "schedule.num_temperatures", num_temperatures));
    v.push_back(CRAFT_FIELD(VD, "schedule.betas", betas));

    v.push_back(choice("flow.family", families(), [](ExperimentConfig& c) -> S& { return c.flow.family; }));
    v.push_back(CRAFT_FIELD(int, "flow.num_pairs", flow.num_pairs));
    v.push_back(CRAFT_FIELD(int, "flow.hidden", flow.hidden));
    v.push_back(CRAFT_FIELD(int, "flow.kernel", flow.kernel));

    v.push_back(choice("trainer.algorithm", algorithms(), [](ExperimentConfig& c) -> S& { return c.trainer.algorithm; }));
    v.push_back(CRAFT_FIELD(int, "trainer.iterations", trainer.iterations));
    v.push_back(CRAFT_FIELD(VD, "trainer.step_sizes", trainer.optimizer.step_sizes));
    v.push_back(CRAFT_FIELD(std::vector<int>, "trainer.switch_iterations", trainer.optimizer.switch_iterations));
    v.push_back(CRAFT_FIELD(double, "trainer.beta1", trainer.optimizer.beta1));
    v.push_back(CRAFT_FIELD(double, "trainer.beta2", trainer.optimizer.beta2));
    v.push_back(CRAFT_FIELD(double, "trainer.epsilon", trainer.optimizer.epsilon));
    v.push_back(CRAFT_FIELD(int, "trainer.validation_particles", trainer.validation_particles));
    v.push_back(CRAFT_FIELD(int, "trainer.test_particles", trainer.test_particles));

    v.push_back(CRAFT_FIELD(int, "sampler.num_particles", sampler.num_particles));
    v.push_back(CRAFT_FIELD(double, "sampler.resample_threshold", sampler.resample.threshold_fraction));
    v.push_back(CRAFT_FIELD(int, "sampler.hmc.num_leapfrog_steps", sampler.hmc.num_leapfrog_steps));
    v.push_back(CRAFT_FIELD(int, "sampler.hmc.steps_per_temperature", sampler.hmc.steps_per_temperature));
    v.push_back(CRAFT_FIELD(VD, "sampler.hmc.step_points", sampler.hmc.step_points));
    v.push_back(CRAFT_FIELD(VD, "sampler.hmc.step_values", sampler.hmc.step_values));

    v.push_back(CRAFT_FIELD(long, "pimh.steps", pimh.steps));
    v.push_back(CRAFT_FIELD(int, "pimh.num_particles", pimh.num_particles));
    v.push_back(CRAFT_FIELD(int, "pimh.chains", pimh.chains));
    v.push_back(CRAFT_FIELD(double, "pimh.max_seconds", pimh.max_seconds));
    v.push_back(CRAFT_FIELD(int, "pimh.num_batches", pimh.num_batches));

    v.push_back(CRAFT_FIELD(int, "gold.num_temperatures", gold.num_temperatures));
    v.push_back(CRAFT_FIELD(int, "gold.num_particles", gold.num_particles));
    v.push_back(CRAFT_FIELD(int, "gold.runs", gold.runs));

    v.push_back(CRAFT_FIELD(int, "calibrate.runs", calibrate_runs));

    v.push_back(CRAFT_FIELD(std::vector<S>, "baselines.algorithms", baselines.algorithms));
    v.push_back(CRAFT_FIELD(long, "baselines.hmc_steps", baselines.hmc_steps));
    v.push_back(CRAFT_FIELD(long, "baselines.hmc_burn_in", baselines.hmc_burn_in));
    v.push_back(CRAFT_FIELD(double, "baselines.hmc_max_seconds", baselines.hmc_max_seconds));
    return v;
  }();
  return f;
}

#undef CRAFT_FIELD

inline const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return &f;
  return nullptr;
}

inline std::string emit(const YAML::Node& n) {
  YAML::Emitter e;
  e.SetSeqFormat(YAML::Flow);
  e << n;
  return e.c_str();
}

/// Nested maps become dotted keys; sequences and scalars are leaves.
inline void flatten(const YAML::Node& n, const std::string& prefix, std::vector<std::pair<std::string, YAML::Node>>& out) {
  if (n.IsMap()) {
    for (auto it = n.begin(); it != n.end(); ++it) {
      const std::string k = it->first.Scalar();
      flatten(it->second, prefix.empty() ? k : prefix + "." + k, out);
    }
  } else {
    out.emplace_back(prefix, n);
  }
}

inline void apply(const std::string& key, const YAML::Node& value, ExperimentConfig& cfg, std::vector<std::string>& errors) {
  const Field* f = find_field(key);
  if (!f) {
    errors.push_back(key + ": unknown key");
    return;
  }
  try {
    f->set(value, cfg);
  } catch (const std::exception& e) {
    errors.push_back(key + ": " + e.what());
  }
}

inline std::string resolve(const std::string& base, const std::string& p) {
  if (p.empty() || base.empty() || std::filesystem::path(p).is_absolute()) return p;
  return (std::filesystem::path(base) / p).string();
}

inline std::vector<int> read_counts_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read counts file " + path);
  std::vector<int> counts;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line[0] == '#') continue;
    for (char& ch : line)
      if (ch == ',') ch = ' ';
    std::istringstream ls(line);
    int c;
    while (ls >> c) counts.push_back(c);
    if (!ls.eof()) throw std::runtime_error("counts file " + path + ": non-integer entry");
  }
  return counts;
}

inline void check(bool ok, std::vector<std::string>& errors, std::string message) {
  if (!ok) errors.push_back(std::move(message));
}

template <class Fn>
void check_throws(Fn fn, std::vector<std::string>& errors, const std::string& key) {
  try {
    fn();
  } catch (const std::exception& e) {
    errors.push_back(key + ": " + e.what());
  }
}

inline bool is_lattice(const ExperimentConfig& c) { return c.target.name == "phi4" || c.target.name == "lgcp"; }

inline int target_dim(const ExperimentConfig& c) {
  if (c.target.name == "phi4") return c.target.phi4.lattice_side * c.target.phi4.lattice_side;
  if (c.target.name == "lgcp") return c.target.lgcp.lattice_side * c.target.lgcp.lattice_side;
  return c.target.dim;
}

inline void check_threshold(double a, int n, const std::string& where, std::vector<std::string>& errors) {
  if (n < 1) return;
  const double lo = 1.0 / n;
  if (!(a >= lo - 1e-15 && a < 1.0))
    errors.push_back("sampler.resample_threshold: must lie in [1/N, 1) = [" + format_double(lo) + ", 1) for " + where +
                     ", got " + format_double(a));
}

inline void validate(const ExperimentConfig& c, std::vector<std::string>& e) {
  check(c.seed.has_value(), e, "seed: missing (runs are seeded explicitly)");
  check(!c.name.empty(), e, "name: must not be empty");
  const auto& t = c.target;
  const int d = target_dim(c);
  if (t.name == "gaussian" || t.name == "mixture") check(t.dim >= 1, e, "target.dim: must be >= 1");
  if (t.name == "gaussian") {
    check(t.mean.size() <= 1 || static_cast<int>(t.mean.size()) == t.dim, e, "target.mean: need 0, 1 or target.dim values");
    check(t.scale.size() <= 1 || static_cast<int>(t.scale.size()) == t.dim, e, "target.scale: need 0, 1 or target.dim values");
    for (double s : t.scale) check(s > 0.0, e, "target.scale: values must be positive");
  }
  if (t.name == "mixture") {
    check(!t.mixture_weights.empty(), e, "target.mixture.weights: need at least one component");
    for (double w : t.mixture_weights) check(w > 0.0, e, "target.mixture.weights: values must be positive");
    check(t.mixture_means.size() == t.mixture_weights.size(), e, "target.mixture.means: need one mean per weight");
    for (const auto& m : t.mixture_means)
      check(static_cast<int>(m.size()) == t.dim, e, "target.mixture.means: each mean needs target.dim values");
    check(t.mixture_scales.size() == t.mixture_weights.size(), e, "target.mixture.scales: need one scale per weight");
    for (double s : t.mixture_scales) check(s > 0.0, e, "target.mixture.scales: values must be positive");
  }
  if (t.name == "phi4") check_throws([&] { t.phi4.validate(); }, e, "target.phi4");
  if (t.name == "lgcp") {
    check(t.lgcp.lattice_side >= 1, e, "target.lgcp.lattice_side: must be >= 1");
    if (!t.lgcp_counts_file.empty()) {
      check(t.lgcp.counts.empty(), e, "target.lgcp.counts: give either counts or counts_file, not both");
      const auto p = resolve(c.base_dir, t.lgcp_counts_file);
      check_throws(
          [&] {
            LgcpConfig l = t.lgcp;
            l.counts = read_counts_file(p);
            l.validate();
          },
          e, "target.lgcp.counts_file");
    } else {
      check_throws([&] { t.lgcp.validate(); }, e, "target.lgcp");
    }
  }
  check(c.base_scale > 0.0, e, "base.scale: must be positive");

  check(c.num_temperatures >= 1, e, "schedule.num_temperatures: must be >= 1");
  if (!c.betas.empty()) {
    check(static_cast<int>(c.betas.size()) == c.num_temperatures + 1, e,
          "schedule.betas: need schedule.num_temperatures + 1 values");
    check_throws([&] { AnnealedPath(DiagGaussian::standard(1), LogDensity(DiagGaussian::standard(1)), c.betas); }, e,
                 "schedule.betas");
  }

  check(c.flow.num_pairs >= 1, e, "flow.num_pairs: must be >= 1");
  check(c.flow.hidden >= 1, e, "flow.hidden: must be >= 1");
  check(c.flow.kernel >= 1 && c.flow.kernel % 2 == 1, e, "flow.kernel: must be odd and >= 1");
  if (c.flow.family == "coupling") check(d >= 2, e, "flow.family: coupling needs dimension >= 2");
  if (c.flow.family == "conv_coupling") {
    check(is_lattice(c), e, "flow.family: conv_coupling needs a lattice target (phi4 or lgcp)");
    const int side = c.target.name == "phi4" ? t.phi4.lattice_side : t.lgcp.lattice_side;
    check(side % 2 == 0, e, "flow.family: conv_coupling needs an even lattice side");
  }

  check(c.trainer.iterations >= 0, e, "trainer.iterations: must be >= 0");
  check_throws([&] { c.trainer.optimizer.validate(); }, e, "trainer");
  check(c.trainer.validation_particles >= 0, e, "trainer.validation_particles: must be >= 0");
  check(c.trainer.test_particles >= 0, e, "trainer.test_particles: must be >= 0");

  const int n = c.sampler.num_particles;
  check(n >= 1, e, "sampler.num_particles: must be >= 1");
  check_threshold(c.sampler.resample.threshold_fraction, n, "sampler.num_particles = " + std::to_string(n), e);
  check_throws([&] { c.sampler.hmc.validate(); }, e, "sampler.hmc");

  check(c.pimh.steps >= 1, e, "pimh.steps: must be >= 1");
  check(c.pimh.num_particles >= 0, e, "pimh.num_particles: must be >= 0");
  check(c.pimh.chains >= 1, e, "pimh.chains: must be >= 1");
  check(c.pimh.max_seconds >= 0.0, e, "pimh.max_seconds: must be >= 0");
  check(c.pimh.num_batches >= 2, e, "pimh.num_batches: must be >= 2");
  check(c.gold.num_temperatures >= 1, e, "gold.num_temperatures: must be >= 1");
  check(c.gold.num_particles >= 1, e, "gold.num_particles: must be >= 1");
  check(c.gold.runs >= 1, e, "gold.runs: must be >= 1");
  check(c.calibrate_runs >= 2, e, "calibrate.runs: must be >= 2");
  for (const auto& b : c.baselines.algorithms) check(baseline_names().count(b) > 0, e, "baselines.algorithms: unknown '" + b + "'");
  check(c.baselines.hmc_steps >= 1, e, "baselines.hmc_steps: must be >= 1");
  check(c.baselines.hmc_burn_in >= 0, e, "baselines.hmc_burn_in: must be >= 0");

  if (c.mode == "pimh" && c.pimh.num_particles > 0)
    check_threshold(c.sampler.resample.threshold_fraction, c.pimh.num_particles, "pimh.num_particles", e);
  if (c.mode == "gold-standard")
    check_threshold(c.sampler.resample.threshold_fraction, c.gold.num_particles, "gold.num_particles", e);
  if (c.trainer.algorithm == "aft_practical") {
    if (c.trainer.validation_particles > 0)
      check_threshold(c.sampler.resample.threshold_fraction, c.trainer.validation_particles, "trainer.validation_particles", e);
    if (c.trainer.test_particles > 0)
      check_threshold(c.sampler.resample.threshold_fraction, c.trainer.test_particles, "trainer.test_particles", e);
  }
  if (!c.checkpoint.empty())
    check(std::filesystem::exists(resolve(c.base_dir, c.checkpoint)), e, "checkpoint: file not found: " + c.checkpoint);
}

}  // namespace config_detail

/// Parses a YAML document. All problems are collected and thrown together as ConfigError.
inline ExperimentConfig parse_config(const std::string& text, const ParseOptions& opts = {}) {
  using namespace config_detail;
  std::vector<std::string> errors;
  ExperimentConfig cfg;
  cfg.base_dir = opts.base_dir;

  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& ex) {
    throw ConfigError({std::string("syntax: ") + ex.what()});
  }
  if (!root.IsNull() && !root.IsMap()) throw ConfigError({"document must be a mapping of keys to values"});

  std::vector<std::pair<std::string, YAML::Node>> flat;
  if (root.IsMap()) flatten(root, "", flat);
  std::set<std::string> seen;
  const std::string overlay = "desk_scale.";
  for (const auto& [key, value] : flat) {
    if (!seen.insert(key).second) {
      errors.push_back(key + ": given more than once");
      continue;
    }
    if (key.rfind(overlay, 0) == 0) {
      const std::string inner = key.substr(overlay.size());
      if (!find_field(inner)) errors.push_back(key + ": unknown key");
      else cfg.desk_scale.emplace_back(inner, emit(value));
      continue;
    }
    apply(key, value, cfg, errors);
  }
  if (opts.desk_scale)
    for (const auto& [key, text_value] : cfg.desk_scale) apply(key, YAML::Load(text_value), cfg, errors);
  for (const auto& [key, text_value] : opts.overrides) {
    try {
      apply(key, YAML::Load(text_value), cfg, errors);
    } catch (const YAML::Exception& ex) {
      errors.push_back(key + ": " + ex.what());
    }
  }
  validate(cfg, errors);
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path, ParseOptions opts = {}) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  if (opts.base_dir.empty()) opts.base_dir = std::filesystem::path(path).parent_path().string();
  return parse_config(ss.str(), opts);
}

/// Flat dotted-key YAML; parse_config(to_text(c)) reproduces c.
inline std::string to_text(const ExperimentConfig& cfg) {
  using namespace config_detail;
  std::string out;
  for (const auto& f : fields()) {
    const YAML::Node n = f.get(cfg);
    if (n.IsNull()) continue;
    out += f.key + ": " + emit(n) + "\n";
  }
  for (const auto& [key, value] : cfg.desk_scale) out += "desk_scale." + key + ": " + value + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Construction from a config

inline LogDensity build_target(const ExperimentConfig& cfg) {
  const auto& t = cfg.target;
  auto broadcast = [&](const std::vector<double>& v, double dflt) {
    if (v.empty()) return Vec::Constant(t.dim, dflt).eval();
    if (v.size() == 1) return Vec::Constant(t.dim, v[0]).eval();
    return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())).eval();
  };
  if (t.name == "gaussian") return LogDensity(DiagGaussian{broadcast(t.mean, 0.0), broadcast(t.scale, 1.0), t.log_z}, "gaussian");
  if (t.name == "mixture") {
    std::vector<Gaussian> comps;
    for (std::size_t i = 0; i < t.mixture_means.size(); ++i) {
      const auto& m = t.mixture_means[i];
      const double s = t.mixture_scales[i];
      comps.emplace_back(Eigen::Map<const Vec>(m.data(), static_cast<Eigen::Index>(m.size())),
                         Mat::Identity(t.dim, t.dim) * (s * s));
    }
    return LogDensity(GaussianMixture(t.mixture_weights, std::move(comps), t.log_z), "mixture");
  }
  if (t.name == "phi4") return LogDensity(Phi4Target{t.phi4}, "phi4");
  LgcpConfig l = t.lgcp;
  if (!t.lgcp_counts_file.empty()) l.counts = config_detail::read_counts_file(config_detail::resolve(cfg.base_dir, t.lgcp_counts_file));
  return LogDensity(LgcpTarget(std::move(l)), "lgcp");
}

inline AnnealedPath build_path(const ExperimentConfig& cfg, int num_temperatures = 0) {
  const LogDensity target = build_target(cfg);
  const int d = target.dim();
  const DiagGaussian base{Vec::Zero(d), Vec::Constant(d, cfg.base_scale), 0.0};
  if (num_temperatures > 0) return AnnealedPath(base, target, num_temperatures);
  if (!cfg.betas.empty()) return AnnealedPath(base, target, cfg.betas);
  return AnnealedPath(base, target, cfg.num_temperatures);
}

inline Flow build_flow(const ExperimentConfig& cfg, int dim, Rng& rng) {
  const auto& f = cfg.flow;
  if (f.family == "identity") return Flow::identity(dim);
  if (f.family == "diag_affine") return Flow::diag_affine(dim);
  std::vector<Flow> pairs;
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(dim))));
  for (int p = 0; p < f.num_pairs; ++p)
    pairs.push_back(f.family == "coupling" ? coupling_pair(dim, f.hidden, rng) : conv_coupling_pair(side, f.kernel, f.hidden, rng));
  return compose(std::span<const Flow>(pairs));
}

/// One flow per transition; transition k draws its parameters from key.child(kFlowInit).child(k).
inline std::vector<Flow> initial_flows(const ExperimentConfig& cfg, const AnnealedPath& path, const RngKey& key) {
  std::vector<Flow> flows;
  for (int k = 1; k <= path.num_temperatures(); ++k) {
    Rng rng = key.child(stream_tag::kFlowInit).child(static_cast<std::uint64_t>(k)).stream();
    flows.push_back(build_flow(cfg, path.dim(), rng));
  }
  return flows;
}

inline std::vector<Observable> observables_for(const ExperimentConfig& cfg) {
  if (cfg.target.name == "phi4") return phi4_observables();
  return {{"mean_0", [](CRef x) { return x[0]; }}, {"second_moment_0", [](CRef x) { return x[0] * x[0]; }}};
}

// ---------------------------------------------------------------------------
// Running

namespace mode_tag {
inline constexpr std::uint64_t kTrain = 101;
inline constexpr std::uint64_t kDeploy = 102;
inline constexpr std::uint64_t kPimh = 103;
inline constexpr std::uint64_t kGold = 104;
inline constexpr std::uint64_t kCalibrate = 105;
inline constexpr std::uint64_t kBaseline = 106;
}  // namespace mode_tag

struct RunResult {
  int status = 0;
  std::string error;
  std::filesystem::path output_dir;
  nlohmann::json summary;
};

inline std::filesystem::path output_dir_for(const ExperimentConfig& cfg) {
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  const char* root = std::getenv("CRAFT_OUTPUT_ROOT");
  return std::filesystem::path(root && *root ? root : "runs") / cfg.name;
}

namespace run_detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

inline std::vector<std::string> indexed(const std::string& stem, int K) {
  std::vector<std::string> v;
  for (int k = 1; k <= K; ++k) v.push_back(stem + "_" + std::to_string(k));
  return v;
}

inline std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline const std::vector<std::string> kTraceColumns{"step", "beta", "log_z", "log_z_increment", "ess_fraction", "resampled",
                                                   "acceptance_rate", "step_size"};

inline std::vector<double> trace_row(const StepTrace& t, const AnnealedPath& path) {
  return {double(t.step), path.beta(t.step), t.log_z, t.log_z_increment, t.ess_fraction, t.resampled ? 1.0 : 0.0,
          t.acceptance_rate, t.step_size};
}

inline nlohmann::json trace_stats(const std::vector<StepTrace>& trace) {
  double acc = 0.0, min_ess = 1.0;
  int resamples = 0;
  for (const auto& t : trace) {
    acc += t.acceptance_rate / static_cast<double>(trace.size());
    min_ess = std::min(min_ess, t.ess_fraction);
    resamples += t.resampled ? 1 : 0;
  }
  return {{"mean_acceptance_rate", acc}, {"min_ess_fraction", min_ess}, {"num_resamples", resamples}};
}

class Runner {
 public:
  Runner(const ExperimentConfig& cfg, std::filesystem::path out, std::ostream* log)
      : cfg_(cfg), out_(std::move(out)), log_(log), key_(*cfg.seed), path_(build_path(cfg)), obs_(observables_for(cfg)) {}

  nlohmann::json run() {
    summary_["name"] = cfg_.name;
    summary_["mode"] = cfg_.mode;
    summary_["seed"] = *cfg_.seed;
    summary_["dim"] = path_.dim();
    summary_["num_temperatures"] = path_.num_temperatures();
    {
      ExperimentConfig echo = cfg_;
      echo.output_dir.clear();
      std::ofstream os(out_ / "config.yaml");
      os << to_text(echo);
    }
    if (cfg_.mode == "train") train();
    else if (cfg_.mode == "deploy") deploy();
    else if (cfg_.mode == "pimh") pimh();
    else if (cfg_.mode == "baselines") baselines();
    else if (cfg_.mode == "gold-standard") gold();
    else calibrate();
    return summary_;
  }

 private:
  std::string file(const std::string& name) const { return (out_ / name).string(); }

  void note(const std::string& s) const {
    if (log_) *log_ << "[" << cfg_.name << "] " << s << std::endl;
  }

  std::vector<double> observe(const ParticleEnsemble& e) const {
    std::vector<double> v;
    for (const auto& o : obs_) v.push_back(weighted_observable(o, e));
    return v;
  }

  std::vector<std::string> obs_names() const {
    std::vector<std::string> v;
    for (const auto& o : obs_) v.push_back(o.name);
    return v;
  }

  /// Trains per trainer.algorithm; writes train.csv, timing.csv and flows.ckpt.
  std::vector<Flow> train_flows(const RngKey& key, const std::string& prefix = "") {
    const auto& tr = cfg_.trainer;
    const int K = path_.num_temperatures();
    const int N = cfg_.sampler.num_particles;
    const auto& rcfg = cfg_.sampler.resample;
    const auto& hcfg = cfg_.sampler.hmc;
    auto inits = initial_flows(cfg_, path_, key_);
    const auto t0 = Clock::now();
    nlohmann::json js;
    js["algorithm"] = tr.algorithm;
    js["iterations"] = tr.iterations;
    std::vector<Flow> flows;
    if (tr.algorithm == "none") {
      flows = std::move(inits);
    } else if (tr.algorithm == "craft") {
      MetricsWriter m(file(prefix + "train.csv"), "craft-train",
                      concat(concat(concat(concat({"iteration", "log_z", "total_loss"}, indexed("loss", K)), indexed("ess", K)),
                                    indexed("resampled", K)),
                             indexed("acceptance", K)));
      MetricsWriter timing(file(prefix + "timing.csv"), "craft-train-timing", {"iteration", "seconds"});
      const auto st = craft_train(path_, std::move(inits), N, tr.iterations, tr.optimizer, rcfg, hcfg, key, [&](const PassRecord& r) {
        std::vector<double> row{double(r.iteration), r.log_z, r.total_loss};
        row.insert(row.end(), r.losses.begin(), r.losses.end());
        for (const auto& t : r.trace) row.push_back(t.ess_fraction);
        for (const auto& t : r.trace) row.push_back(t.resampled ? 1.0 : 0.0);
        for (const auto& t : r.trace) row.push_back(t.acceptance_rate);
        m.row(row);
        timing.row({double(r.iteration), seconds_since(t0)});
      });
      flows = st.flows;
      if (!st.metrics.empty()) {
        js["final_log_z"] = st.metrics.back().log_z;
        js["final_total_loss"] = st.metrics.back().total_loss;
      }
    } else if (tr.algorithm == "aft_simple" || tr.algorithm == "aft_practical") {
      const bool practical = tr.algorithm == "aft_practical";
      const auto res = practical
                           ? aft_practical_train(path_, std::move(inits), N, tr.validation_particles ? tr.validation_particles : N,
                                                 tr.test_particles ? tr.test_particles : N, tr.iterations, tr.optimizer, rcfg,
                                                 hcfg, key)
                           : aft_simple_train(path_, std::move(inits), N, tr.iterations, tr.optimizer, rcfg, hcfg, key);
      std::vector<std::string> cols = concat(kTraceColumns, {"train_loss"});
      if (practical) cols = concat(cols, {"validation_loss", "selected_step"});
      MetricsWriter m(file(prefix + "train.csv"), tr.algorithm + "-train", cols);
      for (std::size_t k = 0; k < res.outputs.trace.size(); ++k) {
        auto row = trace_row(res.outputs.trace[k], path_);
        row.push_back(res.train_losses.at(k));
        if (practical) {
          const int s = res.selected_step.at(k);
          row.push_back(res.validation_losses.at(k).at(static_cast<std::size_t>(s)));
          row.push_back(double(s));
        }
        m.row(row);
      }
      flows = res.flows;
      js["final_log_z"] = res.outputs.log_z;
    } else {
      MetricsWriter m(file(prefix + "train.csv"), tr.algorithm + "-train", {"iteration", "elbo", "log_z", "acceptance_rate"});
      MetricsWriter timing(file(prefix + "timing.csv"), tr.algorithm + "-train-timing", {"iteration", "seconds"});
      const auto cb = [&](const ElboRecord& r) {
        m.row({double(r.iteration), r.elbo, r.log_z, r.acceptance_rate});
        timing.row({double(r.iteration), seconds_since(t0)});
      };
      if (tr.algorithm == "snf") {
        flows = snf_train(path_, std::move(inits), N, tr.iterations, tr.optimizer, hcfg, key, cb).flows;
      } else {
        flows = {vi_train(path_, compose(std::span<const Flow>(inits)), N, tr.iterations, tr.optimizer, key, cb).flow};
      }
    }
    js["seconds"] = seconds_since(t0);
    save_flows(file(prefix + "flows.ckpt"), flows);
    summary_[prefix + "training"] = js;
    note("training (" + tr.algorithm + ") done in " + format_double(js["seconds"].get<double>()) + " s");
    return flows;
  }

  /// Checkpoint if given, otherwise trained (or initial) flows.
  std::vector<Flow> obtain_flows() {
    if (!cfg_.checkpoint.empty()) {
      auto flows = load_flows(config_detail::resolve(cfg_.base_dir, cfg_.checkpoint));
      const int K = path_.num_temperatures();
      if (flows.size() != static_cast<std::size_t>(K) && flows.size() != 1)
        throw std::runtime_error("checkpoint holds " + std::to_string(flows.size()) + " flows, need " + std::to_string(K) + " or 1");
      for (const auto& f : flows)
        if (f.dim() != path_.dim()) throw std::runtime_error("checkpoint flow dimension does not match the target");
      summary_["checkpoint"] = cfg_.checkpoint;
      return flows;
    }
    return train_flows(key_.child(mode_tag::kTrain));
  }

  ProposalRunner proposal(const std::vector<Flow>& flows, int N) const {
    if (flows.size() == 1 && path_.num_temperatures() != 1) {
      return [flow = flows[0], path = path_, N](const RngKey& k) { return vi_proposal(flow, path, N, k); };
    }
    return [flows, path = path_, N, r = cfg_.sampler.resample, h = cfg_.sampler.hmc](const RngKey& k) {
      return craft_deploy(flows, path, N, r, h, k);
    };
  }

  void train() { train_flows(key_.child(mode_tag::kTrain)); }

  void deploy() {
    const auto flows = obtain_flows();
    const auto t0 = Clock::now();
    const auto out = proposal(flows, cfg_.sampler.num_particles)(key_.child(mode_tag::kDeploy));
    const double secs = seconds_since(t0);
    MetricsWriter m(file("deploy.csv"), "deploy", kTraceColumns);
    for (const auto& t : out.trace) m.row(trace_row(t, path_));
    MetricsWriter o(file("observables.csv"), "deploy-observables", concat({"log_z"}, obs_names()));
    o.row(concat_values(out.log_z, observe(out.ensemble)));
    summary_["log_z"] = out.log_z;
    summary_["runtime_seconds"] = secs;
    summary_["acceptance"] = trace_stats(out.trace);
    summary_["observables"] = named(observe(out.ensemble));
    note("deploy log_z = " + format_double(out.log_z));
  }

  void pimh() {
    const auto flows = obtain_flows();
    const int N = cfg_.pimh.num_particles ? cfg_.pimh.num_particles : cfg_.sampler.num_particles;
    const auto runner = proposal(flows, N);
    const auto names = obs_names();
    std::vector<std::string> running;
    for (const auto& n : names) running.push_back("running_" + n);
    nlohmann::json chains = nlohmann::json::array();
    for (int c = 0; c < cfg_.pimh.chains; ++c) {
      const std::string id = std::to_string(c);
      MetricsWriter m(file("pimh_chain_" + id + ".csv"), "pimh", concat(concat({"step", "accepted", "log_z"}, names), running));
      MetricsWriter timing(file("pimh_timing_" + id + ".csv"), "pimh-timing", {"step", "seconds"});
      const auto t0 = Clock::now();
      const auto res = pimh_chain(
          cfg_.pimh.steps, runner, obs_, key_.child(mode_tag::kPimh).child(static_cast<std::uint64_t>(c)),
          [&](const PimhRecord& r) {
            auto row = concat_values(double(r.step), {r.accepted ? 1.0 : 0.0, r.log_z});
            row.insert(row.end(), r.values.begin(), r.values.end());
            row.insert(row.end(), r.running_means.begin(), r.running_means.end());
            m.row(row);
            timing.row({double(r.step), r.seconds});
          },
          cfg_.pimh.max_seconds, cfg_.pimh.num_batches);
      nlohmann::json jc;
      jc["chain"] = c;
      jc["steps"] = res.steps;
      jc["acceptance_rate"] = res.acceptance_rate();
      jc["failures"] = res.failures;
      jc["runtime_seconds"] = seconds_since(t0);
      for (std::size_t o = 0; o < names.size(); ++o)
        jc["estimates"][names[o]] = {{"mean", res.estimates[o].mean}, {"std_error", res.estimates[o].std_error}};
      chains.push_back(jc);
      note("pimh chain " + id + ": " + std::to_string(res.steps) + " steps, acceptance " + format_double(res.acceptance_rate()));
    }
    summary_["chains"] = chains;
  }

  void baselines() {
    const int K = path_.num_temperatures();
    const int N = cfg_.sampler.num_particles;
    const auto& tr = cfg_.trainer;
    const auto& hcfg = cfg_.sampler.hmc;
    const RngKey bkey = key_.child(mode_tag::kBaseline);
    nlohmann::json all;
    for (std::size_t b = 0; b < cfg_.baselines.algorithms.size(); ++b) {
      const std::string& name = cfg_.baselines.algorithms[b];
      const RngKey key = bkey.child(static_cast<std::uint64_t>(b));
      const auto t0 = Clock::now();
      nlohmann::json js;
      if (name == "snf" || name == "vi") {
        MetricsWriter m(file("baseline_" + name + ".csv"), name + "-train", {"iteration", "elbo", "log_z", "acceptance_rate"});
        const auto cb = [&](const ElboRecord& r) { m.row({double(r.iteration), r.elbo, r.log_z, r.acceptance_rate}); };
        auto inits = initial_flows(cfg_, path_, key_);
        std::vector<Flow> flows;
        if (name == "snf") flows = snf_train(path_, std::move(inits), N, tr.iterations, tr.optimizer, hcfg, key, cb).flows;
        else flows = {vi_train(path_, compose(std::span<const Flow>(inits)), N, tr.iterations, tr.optimizer, key, cb).flow};
        save_flows(file("baseline_" + name + ".ckpt"), flows);
        const SnfPass eval = name == "snf" ? snf_forward(flows, path_, N, hcfg, key.child(stream_tag::kTest), false) : SnfPass{};
        if (name == "snf") {
          js["log_z"] = log_mean_exp(eval.log_w);
          js["elbo"] = eval.log_w.mean();
        } else {
          const auto out = vi_proposal(flows[0], path_, N, key.child(stream_tag::kTest));
          js["log_z"] = out.log_z;
          js["observables"] = named(observe(out.ensemble));
        }
      } else if (name == "aft_simple" || name == "smc") {
        const auto res = name == "aft_simple"
                             ? aft_simple_train(path_, initial_flows(cfg_, path_, key_), N, tr.iterations, tr.optimizer,
                                                cfg_.sampler.resample, hcfg, key)
                             : AftResult{{}, smc_deploy(path_, N, cfg_.sampler.resample, hcfg, key), {}, {}, {}};
        MetricsWriter m(file("baseline_" + name + ".csv"), name, kTraceColumns);
        for (const auto& t : res.outputs.trace) m.row(trace_row(t, path_));
        js["log_z"] = res.outputs.log_z;
        js["observables"] = named(observe(res.outputs.ensemble));
      } else {
        const auto res = direct_hmc_chain(path_, hcfg, obs_, key, cfg_.baselines.hmc_steps, cfg_.baselines.hmc_max_seconds,
                                          cfg_.baselines.hmc_burn_in, cfg_.pimh.num_batches);
        MetricsWriter m(file("baseline_hmc.csv"), "hmc", concat({"sample"}, obs_names()));
        const std::size_t len = res.traces.empty() ? 0 : res.traces[0].size();
        for (std::size_t s = 0; s < len; ++s) {
          std::vector<double> row{double(s)};
          for (const auto& t : res.traces) row.push_back(t[s]);
          m.row(row);
        }
        js["steps"] = res.steps;
        js["acceptance_rate"] = res.acceptance_rate;
        for (std::size_t o = 0; o < obs_.size(); ++o)
          js["estimates"][obs_[o].name] = {{"mean", res.estimates[o].mean}, {"std_error", res.estimates[o].std_error}};
      }
      js["runtime_seconds"] = seconds_since(t0);
      all[name] = js;
      note("baseline " + name + " done");
    }
    summary_["baselines"] = all;
    (void)K;
  }

  void gold() {
    const AnnealedPath gpath = build_path(cfg_, cfg_.gold.num_temperatures);
    const int R = cfg_.gold.runs;
    MetricsWriter m(file("gold.csv"), "gold-standard", concat({"run", "log_z"}, obs_names()));
    std::vector<std::vector<double>> vals(obs_.size());
    std::vector<double> lz;
    const auto t0 = Clock::now();
    for (int r = 0; r < R; ++r) {
      const auto out = smc_deploy(gpath, cfg_.gold.num_particles, cfg_.sampler.resample, cfg_.sampler.hmc,
                                  key_.child(mode_tag::kGold).child(static_cast<std::uint64_t>(r)));
      const auto v = observe(out.ensemble);
      m.row(concat_values(double(r), concat_values(out.log_z, v)));
      lz.push_back(out.log_z);
      for (std::size_t o = 0; o < v.size(); ++o) vals[o].push_back(v[o]);
    }
    summary_["gold_num_temperatures"] = cfg_.gold.num_temperatures;
    summary_["gold_num_particles"] = cfg_.gold.num_particles;
    summary_["runs"] = R;
    summary_["log_z"] = mean_and_error(lz);
    for (std::size_t o = 0; o < obs_.size(); ++o) summary_["estimates"][obs_[o].name] = mean_and_error(vals[o]);
    summary_["runtime_seconds"] = seconds_since(t0);
  }

  void calibrate() {
    const auto flows = obtain_flows();
    const auto runner = proposal(flows, cfg_.sampler.num_particles);
    MetricsWriter m(file("calibrate.csv"), "calibrate", {"run", "log_z"});
    std::vector<double> lz;
    const auto t0 = Clock::now();
    for (int r = 0; r < cfg_.calibrate_runs; ++r) {
      const auto out = runner(key_.child(mode_tag::kCalibrate).child(static_cast<std::uint64_t>(r)));
      m.row({double(r), out.log_z});
      lz.push_back(out.log_z);
    }
    const auto stats = mean_and_error(lz);
    summary_["runs"] = cfg_.calibrate_runs;
    summary_["mean_log_z"] = stats["mean"];
    summary_["std_log_z"] = stats["std"];
    summary_["runtime_seconds"] = seconds_since(t0);
    note("calibrate std(log_z) = " + format_double(stats["std"].get<double>()));
  }

  static std::vector<double> concat_values(double head, std::vector<double> tail) {
    tail.insert(tail.begin(), head);
    return tail;
  }

  nlohmann::json named(const std::vector<double>& v) const {
    nlohmann::json j;
    for (std::size_t o = 0; o < v.size(); ++o) j[obs_[o].name] = v[o];
    return j;
  }

  static nlohmann::json mean_and_error(const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x / n;
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    nlohmann::json j{{"mean", mean}};
    if (v.size() > 1) {
      const double sd = std::sqrt(var / (n - 1));
      j["std"] = sd;
      j["std_error"] = sd / std::sqrt(n);
    }
    return j;
  }

  const ExperimentConfig& cfg_;
  std::filesystem::path out_;
  std::ostream* log_;
  RngKey key_;
  AnnealedPath path_;
  std::vector<Observable> obs_;
  nlohmann::json summary_;
};

}  // namespace run_detail

/// Runs the configured mode and writes config.yaml, metric CSVs, summary.json
/// and checkpoints under the output directory. Failures return status 1 with context.
inline RunResult run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  RunResult res;
  res.output_dir = output_dir_for(cfg);
  const auto t0 = run_detail::Clock::now();
  try {
    if (!cfg.seed) throw std::invalid_argument("config has no seed");
    std::filesystem::create_directories(res.output_dir);
    run_detail::Runner runner(cfg, res.output_dir, log);
    res.summary = runner.run();
    res.summary["total_seconds"] = run_detail::seconds_since(t0);
    std::ofstream os(res.output_dir / "summary.json");
    os << res.summary.dump(2) << '\n';
  } catch (const std::exception& e) {
    res.status = 1;
    res.error = "mode '" + cfg.mode + "' (" + cfg.name + "): " + e.what();
  }
  return res;
}

}  // namespace craft
