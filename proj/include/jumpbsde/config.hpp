// Run configuration: strict JSON parsing (unknown keys rejected, every
// violation reported, not just the first), registries mapping names to model
// coefficients, and assembly of the full model/grid/partition for a run.
#pragma once

#include <cstdint>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "jumpbsde/common.hpp"
#include "jumpbsde/levy.hpp"
#include "jumpbsde/paths.hpp"
#include "jumpbsde/reference.hpp"

namespace jumpbsde {

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> violations)
      : std::runtime_error(join(violations)), violations_(std::move(violations)) {}

  const std::vector<std::string>& violations() const { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s = "invalid config:";
    for (const auto& x : v) s += "\n  - " + x;
    return s;
  }
  std::vector<std::string> violations_;
};

struct RunConfig {
  // model
  std::string levy_kind = "power_law";
  double levy_C = 1.0, levy_alpha = 0.5, levy_lambda = 1.0, r_max = 1.0;
  std::vector<double> fa_breaks, fa_values;  // finite_activity tables
  std::string b_name = "zero";
  double b_scale = 1.0;
  std::string sigma_name = "constant";
  double sigma_value = 0.3;
  std::string beta_name = "identity";
  double beta_scale = 1.0;
  std::string gamma_name = "capped_abs";
  std::string driver_name = "zero";
  double kappa = 0.5;
  std::string terminal_name = "identity";
  double terminal_value = 0.0;
  std::string ustar_name = "exp_sin";
  double x0 = 1.0;
  int zeta = 1;
  // numerics
  double T = 1.0;
  int N = 20;
  double eps = 0.05;
  double h = 0.2;
  double r_work = 0.0;  // 0 -> quantile radius
  int batch = 8192;
  // training
  int epochs = 200;
  double lr = 3e-3;
  int minibatch = 512;
  int hidden = 0;
  int layers = 3;
  bool resample = false;

  std::uint64_t seed = 1;
  std::string out = "out";

  bool finite_activity_shortcut = false;  // eps >= r_max: no jumps survive
  std::vector<std::string> warnings;

  std::uint64_t fingerprint() const {
    nlohmann::json j = canonical();
    return fnv1a(j.dump());
  }

  nlohmann::json canonical() const {
    nlohmann::json j;
    j["model"] = {{"levy", {{"kind", levy_kind}, {"C", levy_C}, {"alpha", levy_alpha},
                            {"lambda", levy_lambda}, {"r_max", r_max},
                            {"breaks", fa_breaks}, {"values", fa_values}}},
                  {"b", b_name}, {"b_scale", b_scale},
                  {"sigma", sigma_name}, {"sigma_value", sigma_value},
                  {"beta", beta_name}, {"beta_scale", beta_scale},
                  {"gamma", gamma_name},
                  {"driver", driver_name}, {"kappa", kappa},
                  {"terminal", terminal_name}, {"terminal_value", terminal_value},
                  {"ustar", ustar_name},
                  {"x0", x0}, {"zeta", zeta}};
    j["numerics"] = {{"T", T}, {"N", N}, {"eps", eps}, {"h", h},
                     {"r_work", r_work}, {"batch", batch}};
    j["training"] = {{"epochs", epochs}, {"lr", lr}, {"minibatch", minibatch},
                     {"hidden", hidden}, {"layers", layers}, {"resample", resample}};
    j["seed"] = seed;
    j["out"] = out;
    return j;
  }
};

namespace detail {

// pulls known keys out of an object, complaining about the rest
class StrictObject {
 public:
  StrictObject(const nlohmann::json& j, std::string path, std::vector<std::string>& errs)
      : j_(j), path_(std::move(path)), errs_(errs) {
    if (!j_.is_object()) errs_.push_back(path_ + ": expected an object");
  }

  ~StrictObject() {
    if (!j_.is_object()) return;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
        errs_.push_back(path_ + ": unknown key '" + it.key() + "'");
  }

  bool has(const std::string& key) {
    return j_.is_object() && j_.contains(key);
  }

  template <typename T>
  void get(const std::string& key, T& dst) {
    seen_.push_back(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    try {
      dst = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      errs_.push_back(path_ + "." + key + ": wrong type");
    }
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.push_back(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

 private:
  const nlohmann::json& j_;
  std::string path_;
  std::vector<std::string>& errs_;
  std::vector<std::string> seen_;
};

inline bool one_of(const std::string& v, std::initializer_list<const char*> opts) {
  for (const char* o : opts)
    if (v == o) return true;
  return false;
}

}  // namespace detail

inline RunConfig parse_config_json(const nlohmann::json& j) {
  RunConfig c;
  std::vector<std::string> errs;
  {
    detail::StrictObject root(j, "config", errs);
    if (const auto* jm = root.child("model")) {
      detail::StrictObject m(*jm, "model", errs);
      if (const auto* jl = m.child("levy")) {
        detail::StrictObject l(*jl, "model.levy", errs);
        l.get("kind", c.levy_kind);
        l.get("C", c.levy_C);
        l.get("alpha", c.levy_alpha);
        l.get("lambda", c.levy_lambda);
        l.get("r_max", c.r_max);
        l.get("breaks", c.fa_breaks);
        l.get("values", c.fa_values);
      }
      m.get("b", c.b_name);
      m.get("b_scale", c.b_scale);
      m.get("sigma", c.sigma_name);
      m.get("sigma_value", c.sigma_value);
      m.get("beta", c.beta_name);
      m.get("beta_scale", c.beta_scale);
      m.get("gamma", c.gamma_name);
      m.get("driver", c.driver_name);
      m.get("kappa", c.kappa);
      m.get("terminal", c.terminal_name);
      m.get("terminal_value", c.terminal_value);
      m.get("ustar", c.ustar_name);
      m.get("x0", c.x0);
      m.get("zeta", c.zeta);
    }
    if (const auto* jn = root.child("numerics")) {
      detail::StrictObject n(*jn, "numerics", errs);
      n.get("T", c.T);
      n.get("N", c.N);
      n.get("eps", c.eps);
      n.get("h", c.h);
      n.get("r_work", c.r_work);
      n.get("batch", c.batch);
    }
    if (const auto* jt = root.child("training")) {
      detail::StrictObject t(*jt, "training", errs);
      t.get("epochs", c.epochs);
      t.get("lr", c.lr);
      t.get("minibatch", c.minibatch);
      t.get("hidden", c.hidden);
      t.get("layers", c.layers);
      t.get("resample", c.resample);
    }
    root.get("seed", c.seed);
    root.get("out", c.out);
  }

  // semantic validation: report everything at once
  if (c.zeta != 0 && c.zeta != 1) errs.push_back("model.zeta: must be 0 or 1");
  if (c.N < 1) errs.push_back("numerics.N: must be >= 1");
  if (!(c.eps > 0.0)) errs.push_back("numerics.eps: must be > 0");
  if (!(c.T > 0.0)) errs.push_back("numerics.T: must be > 0");
  if (!(c.h > 0.0)) errs.push_back("numerics.h: must be > 0");
  if (c.batch < 1) errs.push_back("numerics.batch: must be >= 1");
  if (!(c.r_max > 0.0)) errs.push_back("model.levy.r_max: must be > 0");
  if (!detail::one_of(c.levy_kind, {"power_law", "tempered_power_law", "finite_activity"}))
    errs.push_back("model.levy.kind: unknown name '" + c.levy_kind + "'");
  if (!detail::one_of(c.b_name, {"zero", "constant", "mean_revert"}))
    errs.push_back("model.b: unknown name '" + c.b_name + "'");
  if (!detail::one_of(c.sigma_name, {"constant"}))
    errs.push_back("model.sigma: unknown name '" + c.sigma_name + "'");
  if (!detail::one_of(c.beta_name, {"identity", "scaled"}))
    errs.push_back("model.beta: unknown name '" + c.beta_name + "'");
  if (!detail::one_of(c.gamma_name, {"capped_abs", "identity", "constant"}))
    errs.push_back("model.gamma: unknown name '" + c.gamma_name + "'");
  if (!detail::one_of(c.driver_name, {"zero", "discount", "manufactured"}))
    errs.push_back("model.driver: unknown name '" + c.driver_name + "'");
  if (!detail::one_of(c.terminal_name, {"identity", "constant", "ustar"}))
    errs.push_back("model.terminal: unknown name '" + c.terminal_name + "'");
  if (!detail::one_of(c.ustar_name, {"exp_sin", "gauss_bump"}))
    errs.push_back("model.ustar: unknown name '" + c.ustar_name + "'");
  if ((c.driver_name == "manufactured") != (c.terminal_name == "ustar"))
    errs.push_back("model: driver 'manufactured' and terminal 'ustar' must be used together");
  if (c.epochs < 0) errs.push_back("training.epochs: must be >= 0");
  if (c.minibatch < 1) errs.push_back("training.minibatch: must be >= 1");
  if (c.layers < 2) errs.push_back("training.layers: must be >= 2");
  if (!errs.empty()) throw ConfigError(std::move(errs));

  if (c.eps >= c.r_max) {
    c.finite_activity_shortcut = true;
    c.warnings.push_back("truncation removes all jumps (eps >= r_max); running without a jump part");
  }
  return c;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError({"cannot open config file " + path});
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError({std::string("malformed JSON: ") + e.what()});
  }
  return parse_config_json(j);
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

struct AssembledRun {
  std::shared_ptr<LevyMeasure> measure;
  JumpPartition partition;
  ModelCoefficients coeffs;
  TimeGrid grid;
  VectorXd x0;
  std::shared_ptr<ManufacturedDriver> manufactured;  // set when driver == manufactured
  Smooth1D ustar;                                    // valid when manufactured is set
};

inline std::shared_ptr<LevyMeasure> build_measure(const RunConfig& c) {
  if (c.levy_kind == "power_law")
    return std::make_shared<LevyMeasure>(power_law_measure(c.levy_C, c.levy_alpha, c.r_max));
  if (c.levy_kind == "tempered_power_law")
    return std::make_shared<LevyMeasure>(
        tempered_power_law_measure(c.levy_C, c.levy_alpha, c.levy_lambda, c.r_max));
  return std::make_shared<LevyMeasure>(finite_activity_table(c.fa_breaks, c.fa_values));
}

inline std::function<double(double)> build_gamma(const RunConfig& c) {
  if (c.gamma_name == "identity") return [](double e) { return e; };
  if (c.gamma_name == "constant") return [](double) { return 1.0; };
  return [](double e) { return std::min(1.0, std::fabs(e)); };
}

// D_e gamma(0): identity has slope 1; the even families have a symmetric
// kink or flat top at 0, for which the central value 0 is the natural choice.
inline double gamma_slope0(const RunConfig& c) { return c.gamma_name == "identity" ? 1.0 : 0.0; }

inline Smooth1D build_ustar(const RunConfig& c) {
  Smooth1D u;
  if (c.ustar_name == "gauss_bump") {
    u.u = [](double t, double x) { return std::exp(-t) * std::exp(-0.5 * x * x); };
    u.du_dt = [](double t, double x) { return -std::exp(-t) * std::exp(-0.5 * x * x); };
    u.du_dx = [](double t, double x) { return -x * std::exp(-t) * std::exp(-0.5 * x * x); };
    u.d2u_dx2 = [](double t, double x) {
      return (x * x - 1.0) * std::exp(-t) * std::exp(-0.5 * x * x);
    };
    return u;
  }
  u.u = [](double t, double x) { return std::exp(-t) * std::sin(x); };
  u.du_dt = [](double t, double x) { return -std::exp(-t) * std::sin(x); };
  u.du_dx = [](double t, double x) { return std::exp(-t) * std::cos(x); };
  u.d2u_dx2 = [](double t, double x) { return -std::exp(-t) * std::sin(x); };
  return u;
}

inline AssembledRun assemble(const RunConfig& c) {
  AssembledRun run;
  run.measure = build_measure(c);
  auto gamma = build_gamma(c);
  if (!c.finite_activity_shortcut) {
    run.partition = build_partition(run.measure, c.eps, c.h, c.r_work, gamma);
  } else {
    run.partition.measure = run.measure;
    run.partition.epsilon = 0.0;
    run.partition.total_mass = 0.0;
  }

  ModelCoefficients& m = run.coeffs;
  m.state_dim = 1;
  m.bm_dim = 1;
  m.zeta = c.zeta;
  if (c.b_name == "zero")
    m.b = [](const VectorXd&) { return VectorXd::Zero(1).eval(); };
  else if (c.b_name == "constant")
    m.b = [s = c.b_scale](const VectorXd&) { return VectorXd::Constant(1, s).eval(); };
  else
    m.b = [s = c.b_scale](const VectorXd& x) { return (-s * x).eval(); };
  m.sigma = [v = c.sigma_value](const VectorXd&) { return MatrixXd::Constant(1, 1, v).eval(); };
  double bs = (c.beta_name == "scaled") ? c.beta_scale : 1.0;
  m.jump.beta = [bs](const VectorXd&, double e) { return VectorXd::Constant(1, bs * e).eval(); };
  m.jump.d_beta0 = [bs](const VectorXd&) { return VectorXd::Constant(1, bs).eval(); };
  m.jump.gamma = gamma;
  m.jump.d_gamma0 = gamma_slope0(c);
  m.jump.has_d_gamma0 = true;

  run.grid = TimeGrid::uniform(c.T, c.N);
  run.x0 = VectorXd::Constant(1, c.x0);

  if (c.driver_name == "manufactured") {
    run.ustar = build_ustar(c);
    Generator1D gen;
    gen.measure = run.measure;
    gen.b = [b = m.b](double x) { return b(VectorXd::Constant(1, x))[0]; };
    gen.sigma = [v = c.sigma_value](double) { return v; };
    gen.beta = [bs](double, double e) { return bs * e; };
    gen.zeta = c.zeta;
    gen.eps = c.finite_activity_shortcut ? 0.0 : c.eps;
    run.manufactured = std::make_shared<ManufacturedDriver>(run.ustar, gen, c.kappa);
    m.driver = run.manufactured->driver();
    Smooth1D us = run.ustar;
    double T = c.T;
    m.terminal = [us, T](const VectorXd& x) { return us.u(T, x[0]); };
  } else if (c.driver_name == "discount") {
    m.driver = Driver{};
    m.driver.f = [k = c.kappa](double, const VectorXd&, double y, const VectorXd&, double) {
      return -k * y;
    };
    m.driver.df_dy = [k = c.kappa](double, const VectorXd&, double, const VectorXd&, double) {
      return -k;
    };
  } else {
    m.driver = zero_driver();
  }
  if (c.terminal_name == "identity")
    m.terminal = [](const VectorXd& x) { return x[0]; };
  else if (c.terminal_name == "constant")
    m.terminal = [v = c.terminal_value](const VectorXd&) { return v; };
  // "ustar" was set above

  return run;
}

}  // namespace jumpbsde
