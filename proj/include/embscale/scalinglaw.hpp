#pragma once

// Parametric loss models and their robust fitting.
//
//   chinchilla: L(N, D)    = E + A / N^alpha + B / D^beta
//   modified:   L(S, N, D) = E + (a_d ln D + b_d) / N^alpha
//                              + (a_s (1 - S)^b_s + c_s) / D^beta
//
// N is the non-embedding parameter count, D the data quantity (tokens or
// steps) and S the trainable fraction. Fits minimise a sum of Huber losses on
// log-loss residuals with L-BFGS from every point of an initialisation grid.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "embscale/digest.hpp"
#include "embscale/error.hpp"
#include "embscale/optim.hpp"
#include "embscale/runs.hpp"

namespace embscale {

struct ChinchillaParams {
  double irreducible_loss = 0.0;
  double A = 0.0;
  double B = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  bool operator==(const ChinchillaParams&) const = default;
};

struct ModifiedParams {
  double irreducible_loss = 0.0;
  double a_d = 0.0;
  double b_d = 0.0;
  double alpha = 0.0;
  double a_s = 0.0;
  double b_s = 1.0;
  double c_s = 0.0;
  double beta = 0.0;
  bool operator==(const ModifiedParams&) const = default;
};

using ScalingParams = std::variant<ChinchillaParams, ModifiedParams>;

enum class Formula { chinchilla, modified };

inline const char* to_string(Formula f) { return f == Formula::chinchilla ? "chinchilla" : "modified"; }

inline Formula parse_formula(const std::string& s) {
  if (s == "chinchilla") return Formula::chinchilla;
  if (s == "modified") return Formula::modified;
  throw ValidationError("unknown formula '" + s + "' (expected chinchilla or modified)");
}

inline Formula formula_of(const ScalingParams& p) {
  return std::holds_alternative<ChinchillaParams>(p) ? Formula::chinchilla : Formula::modified;
}

inline double predict_chinchilla(const ChinchillaParams& p, double n, double d) {
  if (!(n > 0.0)) throw DomainError("N must be positive");
  if (!(d > 0.0)) throw DomainError("D must be positive");
  return p.irreducible_loss + p.A * std::pow(n, -p.alpha) + p.B * std::pow(d, -p.beta);
}

inline double predict_modified(const ModifiedParams& p, double s, double n, double d) {
  if (!(s >= 0.0 && s <= 1.0)) throw DomainError("S must lie in [0, 1]");
  if (!(n > 0.0)) throw DomainError("N must be positive");
  if (!(d > 1.0)) throw DomainError("D must exceed 1 so that ln D > 0");
  const double sparsity = s == 1.0 ? 0.0 : std::pow(1.0 - s, p.b_s);
  return p.irreducible_loss + (p.a_d * std::log(d) + p.b_d) * std::pow(n, -p.alpha) +
         (p.a_s * sparsity + p.c_s) * std::pow(d, -p.beta);
}

inline double predict(const ScalingParams& p, double s, double n, double d) {
  if (auto* c = std::get_if<ChinchillaParams>(&p)) return predict_chinchilla(*c, n, d);
  return predict_modified(std::get<ModifiedParams>(p), s, n, d);
}

enum class ResidualSpace { log, linear };
enum class SplitMode { largest_model_holdout, none };

struct FitConfig {
  double huber_delta = 0.001;
  // Initialisation grid, per coefficient. Exponents (alpha, beta, b_s) are
  // absolute values. irreducible_loss is a fraction of the smallest observed
  // loss. The remaining coefficients are multiples of the smallest observed
  // loss in units where N and D are divided by their geometric means, so a
  // multiplier of 1 makes that term comparable to the loss itself.
  // For the modified formula an empty list for a_d, b_d, a_s and c_s means
  // "seed these four by weighted linear least squares at each grid point".
  std::map<std::string, std::vector<double>> init_grid;
  int max_iterations = 2000;
  double convergence_tol = 1e-12;
  ResidualSpace residual_space = ResidualSpace::log;
  SplitMode split = SplitMode::largest_model_holdout;
  int threads = 0;  // 0: hardware concurrency
};

inline std::map<std::string, std::vector<double>> default_init_grid(Formula f) {
  std::map<std::string, std::vector<double>> g;
  g["alpha"] = {0.1, 0.3, 0.5, 1.0};
  g["beta"] = {0.1, 0.3, 0.5, 1.0};
  g["irreducible_loss"] = {0.0, 0.25, 0.5};
  if (f == Formula::chinchilla) {
    g["A"] = {0.1, 1.0, 10.0};
    g["B"] = {0.1, 1.0, 10.0};
  } else {
    g["b_s"] = {0.1, 1.0, 10.0};
    g["a_d"] = {};
    g["b_d"] = {};
    g["a_s"] = {};
    g["c_s"] = {};
  }
  return g;
}

inline std::vector<std::string> coefficient_names(Formula f) {
  if (f == Formula::chinchilla) return {"irreducible_loss", "A", "B", "alpha", "beta"};
  return {"irreducible_loss", "a_d", "b_d", "alpha", "a_s", "b_s", "c_s", "beta"};
}

inline std::vector<double> coefficient_values(const ScalingParams& p) {
  if (auto* c = std::get_if<ChinchillaParams>(&p)) {
    return {c->irreducible_loss, c->A, c->B, c->alpha, c->beta};
  }
  const auto& m = std::get<ModifiedParams>(p);
  return {m.irreducible_loss, m.a_d, m.b_d, m.alpha, m.a_s, m.b_s, m.c_s, m.beta};
}

inline ScalingParams params_from_values(Formula f, std::span<const double> v) {
  if (f == Formula::chinchilla) return ChinchillaParams{v[0], v[1], v[2], v[3], v[4]};
  return ModifiedParams{v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7]};
}

struct FitPoint {
  double s = 1.0;
  double n = 0.0;
  double d = 0.0;
  double loss = 0.0;
};

inline double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? 0.5 * r * r : delta * (a - 0.5 * delta);
}

inline double huber_derivative(double r, double delta) {
  if (std::abs(r) <= delta) return r;
  return r > 0.0 ? delta : -delta;
}

// Sum of Huber penalties over residuals in the configured space.
// Returns +inf when any prediction is non-positive in log space.
inline double fit_objective(const ScalingParams& p, std::span<const FitPoint> pts, double delta,
                            ResidualSpace space = ResidualSpace::log) {
  double total = 0.0;
  for (const auto& q : pts) {
    const double pred = predict(p, q.s, q.n, q.d);
    double r;
    if (space == ResidualSpace::log) {
      if (!(pred > 0.0)) return std::numeric_limits<double>::infinity();
      r = std::log(q.loss) - std::log(pred);
    } else {
      r = q.loss - pred;
    }
    total += huber(r, delta);
  }
  return total;
}

struct FitReport {
  ScalingParams params;
  double train_objective = 0.0;
  std::optional<double> test_rmse_log;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::map<std::string, double> init_used;
  bool converged = false;
  int iterations = 0;
  std::size_t starts_tried = 0;
  std::size_t starts_failed = 0;
  std::string fit_config_digest;
  std::string method;  // method class fitted, or "pooled"
  DataMeasure data_measure = DataMeasure::tokens;
};

inline nlohmann::ordered_json fit_config_to_json(const FitConfig& cfg) {
  nlohmann::ordered_json j;
  j["huber_delta"] = cfg.huber_delta;
  nlohmann::ordered_json grid = nlohmann::ordered_json::object();
  for (const auto& [k, v] : cfg.init_grid) grid[k] = v;
  j["init_grid"] = grid;
  j["max_iterations"] = cfg.max_iterations;
  j["convergence_tol"] = cfg.convergence_tol;
  j["residual_space"] = cfg.residual_space == ResidualSpace::log ? "log" : "linear";
  j["split"] = cfg.split == SplitMode::none ? "none" : "largest-model-holdout";
  return j;
}

namespace detail {

// Internal parameterisation with N and D divided by reference scales.
// Coefficients that must be positive are stored as logarithms.
class NormalizedModel {
 public:
  NormalizedModel(Formula f, double n_ref, double d_ref, ResidualSpace space, double delta)
      : f_(f), n_ref_(n_ref), d_ref_(d_ref), space_(space), delta_(delta) {}

  std::size_t dim() const { return f_ == Formula::chinchilla ? 5 : 8; }

  struct Prepared {
    double lx, ly, one_minus_s, log_loss, loss;
  };

  std::vector<Prepared> prepare(std::span<const FitPoint> pts) const {
    std::vector<Prepared> out;
    out.reserve(pts.size());
    for (const auto& p : pts) {
      out.push_back({std::log(p.n / n_ref_), std::log(p.d / d_ref_), 1.0 - p.s, std::log(p.loss), p.loss});
    }
    return out;
  }

  // Prediction and its gradient with respect to theta.
  double predict(std::span<const double> th, const Prepared& q, std::span<double> dp) const {
    const double E = std::exp(th[0]);
    if (f_ == Formula::chinchilla) {
      const double A = std::exp(th[1]), B = std::exp(th[2]);
      const double al = std::exp(th[3]), be = std::exp(th[4]);
      const double tn = std::exp(-al * q.lx), td = std::exp(-be * q.ly);
      dp[0] = E;
      dp[1] = A * tn;
      dp[2] = B * td;
      dp[3] = -A * tn * q.lx * al;
      dp[4] = -B * td * q.ly * be;
      return E + A * tn + B * td;
    }
    const double ad = th[1], bd = th[2], al = std::exp(th[3]);
    const double as = th[4], bs = std::exp(th[5]), cs = th[6], be = std::exp(th[7]);
    const double tn = std::exp(-al * q.lx), td = std::exp(-be * q.ly);
    const double num_n = ad * q.ly + bd;
    double sp = 0.0, dsp = 0.0;
    if (q.one_minus_s > 0.0) {
      const double l1s = std::log(q.one_minus_s);
      sp = std::exp(bs * l1s);
      dsp = sp * l1s * bs;
    }
    const double num_d = as * sp + cs;
    dp[0] = E;
    dp[1] = q.ly * tn;
    dp[2] = tn;
    dp[3] = -num_n * tn * q.lx * al;
    dp[4] = sp * td;
    dp[5] = as * dsp * td;
    dp[6] = td;
    dp[7] = -num_d * td * q.ly * be;
    return E + num_n * tn + num_d * td;
  }

  double objective(std::span<const double> th, std::span<const Prepared> pts, std::span<double> grad) const {
    std::fill(grad.begin(), grad.end(), 0.0);
    double dp_buf[8];
    std::span<double> dp(dp_buf, dim());
    double total = 0.0;
    for (const auto& q : pts) {
      const double pred = predict(th, q, dp);
      double r, dr_dpred;
      if (space_ == ResidualSpace::log) {
        if (!(pred > 0.0)) return std::numeric_limits<double>::infinity();
        r = q.log_loss - std::log(pred);
        dr_dpred = -1.0 / pred;
      } else {
        r = q.loss - pred;
        dr_dpred = -1.0;
      }
      total += huber(r, delta_);
      const double w = huber_derivative(r, delta_) * dr_dpred;
      for (std::size_t k = 0; k < dim(); ++k) grad[k] += w * dp[k];
    }
    return total;
  }

  ScalingParams to_params(std::span<const double> th) const {
    if (f_ == Formula::chinchilla) {
      const double al = std::exp(th[3]), be = std::exp(th[4]);
      return ChinchillaParams{std::exp(th[0]), std::exp(th[1]) * std::pow(n_ref_, al),
                              std::exp(th[2]) * std::pow(d_ref_, be), al, be};
    }
    const double al = std::exp(th[3]), be = std::exp(th[7]);
    const double nscale = std::pow(n_ref_, al), dscale = std::pow(d_ref_, be);
    ModifiedParams p;
    p.irreducible_loss = std::exp(th[0]);
    p.alpha = al;
    p.beta = be;
    p.a_d = th[1] * nscale;
    p.b_d = th[2] * nscale - p.a_d * std::log(d_ref_);
    p.a_s = th[4] * dscale;
    p.b_s = std::exp(th[5]);
    p.c_s = th[6] * dscale;
    return p;
  }

 private:
  Formula f_;
  double n_ref_, d_ref_;
  ResidualSpace space_;
  double delta_;
};

inline std::vector<double> grid_or_default(const FitConfig& cfg, Formula f, const std::string& key) {
  auto it = cfg.init_grid.find(key);
  if (it != cfg.init_grid.end()) return it->second;
  return default_init_grid(f).at(key);
}

// Weighted least squares for the four linear coefficients of the modified
// formula at fixed (E, alpha, beta, b_s). Weights 1/L approximate log residuals.
inline std::optional<Eigen::Vector4d> seed_linear(std::span<const NormalizedModel::Prepared> pts,
                                                  double E, double al, double be, double bs) {
  const auto n = static_cast<Eigen::Index>(pts.size());
  Eigen::MatrixXd X(n, 4);
  Eigen::VectorXd t(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& q = pts[static_cast<std::size_t>(i)];
    const double tn = std::exp(-al * q.lx), td = std::exp(-be * q.ly);
    const double sp = q.one_minus_s > 0.0 ? std::pow(q.one_minus_s, bs) : 0.0;
    const double w = 1.0 / q.loss;
    X(i, 0) = w * q.ly * tn;
    X(i, 1) = w * tn;
    X(i, 2) = w * sp * td;
    X(i, 3) = w * td;
    t(i) = w * (q.loss - E);
  }
  Eigen::Vector4d sol = X.colPivHouseholderQr().solve(t);
  if (!sol.allFinite()) return std::nullopt;
  return sol;
}

struct StartResult {
  std::vector<double> theta;
  std::vector<double> init_theta;
  double value = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

}  // namespace detail

inline std::vector<FitPoint> fit_points(const std::vector<RunRecord>& records) {
  std::vector<FitPoint> pts;
  pts.reserve(records.size());
  for (const auto& r : records) {
    pts.push_back({r.trainable_fraction, static_cast<double>(r.n_nonembed), r.data_amount(), r.final_loss});
  }
  return pts;
}

namespace detail {

struct FitSetup {
  NormalizedModel model;
  std::vector<NormalizedModel::Prepared> prepared;
  std::vector<std::vector<double>> starts;  // theta vectors
};

inline FitSetup make_fit_setup(std::span<const FitPoint> train, Formula formula, const FitConfig& cfg) {
  if (!(cfg.huber_delta > 0.0)) throw ValidationError("huber_delta must be positive");
  const std::size_t n_coef = formula == Formula::chinchilla ? 5 : 8;
  if (train.size() < n_coef + 2) {
    throw InsufficientDataError("fit needs at least " + std::to_string(n_coef + 2) +
                                " training records, got " + std::to_string(train.size()));
  }
  double log_n = 0.0, log_d = 0.0, min_loss = std::numeric_limits<double>::infinity();
  for (const auto& p : train) {
    if (!(p.loss > 0.0)) throw ValidationError("fit requires positive losses");
    if (!(p.n > 0.0)) throw DomainError("fit requires positive N");
    if (formula == Formula::modified ? !(p.d > 1.0) : !(p.d > 0.0)) {
      throw DomainError(formula == Formula::modified ? "modified formula requires D > 1" : "fit requires positive D");
    }
    if (!(p.s >= 0.0 && p.s <= 1.0)) throw DomainError("trainable fraction must lie in [0, 1]");
    log_n += std::log(p.n);
    log_d += std::log(p.d);
    min_loss = std::min(min_loss, p.loss);
  }
  const double n_ref = std::exp(log_n / static_cast<double>(train.size()));
  const double d_ref = std::exp(log_d / static_cast<double>(train.size()));
  FitSetup setup{NormalizedModel(formula, n_ref, d_ref, cfg.residual_space, cfg.huber_delta), {}, {}};
  const auto& model = setup.model;
  setup.prepared = model.prepare(train);
  const auto& prepared = setup.prepared;
  auto& starts = setup.starts;

  const auto alphas = grid_or_default(cfg, formula, "alpha");
  const auto betas = grid_or_default(cfg, formula, "beta");
  const auto e_fracs = grid_or_default(cfg, formula, "irreducible_loss");
  auto log_pos = [](double v) { return std::log(v); };
  auto e_theta = [&](double frac) { return std::log(std::max(frac, 1e-6) * min_loss); };
  if (formula == Formula::chinchilla) {
    const auto as = grid_or_default(cfg, formula, "A");
    const auto bs = grid_or_default(cfg, formula, "B");
    for (double e : e_fracs)
      for (double a : as)
        for (double b : bs)
          for (double al : alphas)
            for (double be : betas)
              starts.push_back({e_theta(e), log_pos(a * min_loss), log_pos(b * min_loss), log_pos(al), log_pos(be)});
  } else {
    const auto bss = grid_or_default(cfg, formula, "b_s");
    const auto ads = grid_or_default(cfg, formula, "a_d");
    const auto bds = grid_or_default(cfg, formula, "b_d");
    const auto ass = grid_or_default(cfg, formula, "a_s");
    const auto css = grid_or_default(cfg, formula, "c_s");
    const bool seeded = ads.empty() || bds.empty() || ass.empty() || css.empty();
    for (double e : e_fracs)
      for (double bsv : bss)
        for (double al : alphas)
          for (double be : betas) {
            const double E = std::max(e, 1e-6) * min_loss;
            if (seeded) {
              auto lin = seed_linear(prepared, E, al, be, bsv);
              Eigen::Vector4d c = lin ? *lin : Eigen::Vector4d(0.0, min_loss, 0.0, min_loss);
              starts.push_back({std::log(E), c(0), c(1), log_pos(al), c(2), log_pos(bsv), c(3), log_pos(be)});
            } else {
              for (double ad : ads)
                for (double bd : bds)
                  for (double as : ass)
                    for (double cs : css)
                      starts.push_back({std::log(E), ad * min_loss, bd * min_loss, log_pos(al), as * min_loss,
                                        log_pos(bsv), cs * min_loss, log_pos(be)});
            }
          }
  }
  if (starts.empty()) throw ValidationError("initialisation grid is empty");
  return setup;
}

}  // namespace detail

// The grid starting points a fit would use, in the original parameterisation.
inline std::vector<ScalingParams> init_grid_params(std::span<const FitPoint> train, Formula formula,
                                                   const FitConfig& cfg = {}) {
  const auto setup = detail::make_fit_setup(train, formula, cfg);
  std::vector<ScalingParams> out;
  for (const auto& th : setup.starts) out.push_back(setup.model.to_params(th));
  return out;
}

// Fits `formula` to the given points; test points only feed test_rmse_log.
inline FitReport fit_points_report(std::span<const FitPoint> train, std::span<const FitPoint> test,
                                   Formula formula, const FitConfig& cfg) {
  const auto setup = detail::make_fit_setup(train, formula, cfg);
  const auto& model = setup.model;
  const auto& prepared = setup.prepared;
  const auto& starts = setup.starts;

  LbfgsOptions lopt;
  lopt.max_iterations = cfg.max_iterations;
  lopt.gradient_tol = cfg.convergence_tol;

  std::vector<detail::StartResult> results(starts.size());
  auto run_range = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < starts.size(); i += step) {
      auto obj = [&](std::span<const double> th, std::span<double> g) {
        return model.objective(th, prepared, g);
      };
      auto r = lbfgs_minimize(obj, starts[i], lopt);
      results[i].init_theta = starts[i];
      results[i].theta = std::move(r.x);
      results[i].value = r.value;
      results[i].iterations = r.iterations;
      results[i].converged = r.converged;
    }
  };
  std::size_t n_threads = cfg.threads > 0 ? static_cast<std::size_t>(cfg.threads)
                                          : std::max(1u, std::thread::hardware_concurrency());
  n_threads = std::min(n_threads, starts.size());
  if (n_threads <= 1) {
    run_range(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(run_range, t, n_threads);
    for (auto& th : pool) th.join();
  }

  // Order-independent reduction: lowest objective, then lexicographic coefficients.
  FitReport rep;
  rep.starts_tried = starts.size();
  std::optional<std::size_t> best;
  std::vector<double> best_coef;
  for (std::size_t i = 0; i < results.size(); ++i) {
    if (!std::isfinite(results[i].value)) {
      ++rep.starts_failed;
      continue;
    }
    const auto coef = coefficient_values(model.to_params(results[i].theta));
    if (!best || results[i].value < results[*best].value ||
        (results[i].value == results[*best].value && coef < best_coef)) {
      best = i;
      best_coef = coef;
    }
  }
  if (!best) {
    std::string msg = "all " + std::to_string(starts.size()) + " starts diverged; inits tried (theta):";
    for (std::size_t i = 0; i < std::min<std::size_t>(starts.size(), 8); ++i) {
      msg += " [";
      for (double v : starts[i]) msg += std::to_string(v) + " ";
      msg += "]";
    }
    throw FitFailure(msg);
  }

  const auto& win = results[*best];
  rep.params = model.to_params(win.theta);
  rep.train_objective = fit_objective(rep.params, train, cfg.huber_delta, cfg.residual_space);
  rep.converged = win.converged;
  rep.iterations = win.iterations;
  rep.n_train = train.size();
  rep.n_test = test.size();
  const auto names = coefficient_names(formula);
  const auto init_vals = coefficient_values(model.to_params(win.init_theta));
  for (std::size_t k = 0; k < names.size(); ++k) rep.init_used[names[k]] = init_vals[k];
  if (!test.empty()) {
    double ss = 0.0;
    for (const auto& q : test) {
      const double pred = predict(rep.params, q.s, q.n, q.d);
      const double r = pred > 0.0 ? std::log(q.loss) - std::log(pred) : std::numeric_limits<double>::infinity();
      ss += r * r;
    }
    rep.test_rmse_log = std::sqrt(ss / static_cast<double>(test.size()));
  }
  FitConfig effective = cfg;
  for (const auto& [k, v] : default_init_grid(formula)) effective.init_grid.try_emplace(k, v);
  rep.fit_config_digest = digest_hex(fit_config_to_json(effective).dump());
  return rep;
}

// Splits records per the configured holdout and fits. Every record must be of
// a single data measure.
inline FitReport fit(const std::vector<RunRecord>& records, Formula formula, const FitConfig& cfg = {}) {
  if (records.empty()) throw InsufficientDataError("fit: no records");
  const DataMeasure measure = records.front().data_measure;
  for (const auto& r : records) {
    if (r.data_measure != measure) throw ValidationError("fit: records mix tokens and steps data measures");
  }
  std::vector<RunRecord> train, test;
  if (cfg.split == SplitMode::largest_model_holdout) {
    ParamCount largest = 0;
    for (const auto& r : records) largest = std::max(largest, r.n_nonembed);
    for (const auto& r : records) (r.n_nonembed == largest ? test : train).push_back(r);
  } else {
    train = records;
  }
  const auto tr = fit_points(train);
  const auto te = fit_points(test);
  FitReport rep = fit_points_report(tr, te, formula, cfg);
  rep.data_measure = measure;
  return rep;
}

inline std::vector<RunRecord> filter_method(const std::vector<RunRecord>& records, MethodKind k) {
  std::vector<RunRecord> out;
  for (const auto& r : records) {
    if (r.kind() == k) out.push_back(r);
  }
  return out;
}

inline nlohmann::ordered_json params_to_json(const ScalingParams& p) {
  nlohmann::ordered_json c;
  const auto names = coefficient_names(formula_of(p));
  const auto vals = coefficient_values(p);
  for (std::size_t k = 0; k < names.size(); ++k) c[names[k]] = vals[k];
  return c;
}

inline ScalingParams params_from_json(Formula f, const nlohmann::json& coefs) {
  const auto names = coefficient_names(f);
  std::vector<double> vals;
  for (const auto& n : names) {
    if (!coefs.contains(n) || !coefs.at(n).is_number()) {
      throw ValidationError("coefficients lack numeric '" + n + "'");
    }
    vals.push_back(coefs.at(n).get<double>());
  }
  auto p = params_from_values(f, vals);
  if (auto* c = std::get_if<ChinchillaParams>(&p)) {
    if (!(c->irreducible_loss > 0 && c->A > 0 && c->B > 0 && c->alpha > 0 && c->beta > 0)) {
      throw ValidationError("chinchilla coefficients must all be positive");
    }
  } else {
    const auto& m = std::get<ModifiedParams>(p);
    if (!(m.alpha > 0 && m.beta > 0 && m.b_s > 0)) {
      throw ValidationError("modified coefficients alpha, beta and b_s must be positive");
    }
  }
  return p;
}

inline nlohmann::ordered_json report_to_json(const FitReport& r) {
  nlohmann::ordered_json j;
  j["formula"] = to_string(formula_of(r.params));
  j["method"] = r.method;
  j["data_measure"] = to_string(r.data_measure);
  j["coefficients"] = params_to_json(r.params);
  j["fit_config_digest"] = r.fit_config_digest;
  j["train_objective"] = r.train_objective;
  j["test_rmse_log"] = r.test_rmse_log ? nlohmann::ordered_json(*r.test_rmse_log) : nlohmann::ordered_json(nullptr);
  j["n_train"] = r.n_train;
  j["n_test"] = r.n_test;
  nlohmann::ordered_json init = nlohmann::ordered_json::object();
  for (const auto& n : coefficient_names(formula_of(r.params))) init[n] = r.init_used.at(n);
  j["init_used"] = init;
  j["converged"] = r.converged;
  j["iterations"] = r.iterations;
  j["starts_tried"] = r.starts_tried;
  j["starts_failed"] = r.starts_failed;
  return j;
}

// Reads the "formula" + "coefficients" part of a params document.
inline ScalingParams scaling_params_from_json(const nlohmann::json& j) {
  if (!j.contains("formula") || !j.contains("coefficients")) {
    throw ValidationError("params document needs 'formula' and 'coefficients'");
  }
  return params_from_json(parse_formula(j.at("formula").get<std::string>()), j.at("coefficients"));
}

}  // namespace embscale
