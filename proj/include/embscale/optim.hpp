#pragma once

// Limited-memory BFGS with a strong-Wolfe line search.
//
// The objective is any callable `double f(std::span<const double> x,
// std::span<double> grad)` that fills the gradient and returns the value.
// A non-finite value is treated as "outside the domain": the line search
// shrinks the step until it lands back inside.

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace embscale {

struct LbfgsOptions {
  int memory = 10;
  int max_iterations = 2000;
  double gradient_tol = 1e-12;  // on the infinity norm
  double relative_f_tol = 1e-15;
  int max_line_search = 40;
  double c1 = 1e-4;
  double c2 = 0.9;
};

struct LbfgsResult {
  std::vector<double> x;
  double value = std::numeric_limits<double>::infinity();
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string stop_reason;
};

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

inline double inf_norm(std::span<const double> a) {
  double m = 0.0;
  for (double v : a) m = std::max(m, std::abs(v));
  return m;
}

inline bool all_finite(std::span<const double> a) {
  return std::all_of(a.begin(), a.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace detail

template <class Objective>
LbfgsResult lbfgs_minimize(Objective&& f, std::vector<double> x0, const LbfgsOptions& opt = {}) {
  using detail::dot;
  const std::size_t n = x0.size();
  LbfgsResult res;
  std::vector<double> x = std::move(x0), g(n), d(n), xt(n), gt(n);

  double fx = f(std::span<const double>(x), std::span<double>(g));
  ++res.evaluations;
  if (!std::isfinite(fx) || !detail::all_finite(g)) {
    res.x = x;
    res.value = std::numeric_limits<double>::infinity();
    res.stop_reason = "non-finite objective at start";
    return res;
  }

  std::deque<std::vector<double>> S, Y;
  std::deque<double> rho;
  std::vector<double> alpha_buf(static_cast<std::size_t>(opt.memory));

  auto eval_at = [&](double step) {
    for (std::size_t i = 0; i < n; ++i) xt[i] = x[i] + step * d[i];
    ++res.evaluations;
    double v = f(std::span<const double>(xt), std::span<double>(gt));
    if (!std::isfinite(v) || !detail::all_finite(gt)) v = std::numeric_limits<double>::infinity();
    return v;
  };

  for (int iter = 0; iter < opt.max_iterations; ++iter) {
    res.iterations = iter;
    if (detail::inf_norm(g) <= opt.gradient_tol) {
      res.converged = true;
      res.stop_reason = "gradient tolerance";
      break;
    }

    // Two-loop recursion: d = -H g.
    d = g;
    const std::size_t m = S.size();
    for (std::size_t k = m; k-- > 0;) {
      alpha_buf[k] = rho[k] * dot(S[k], d);
      for (std::size_t i = 0; i < n; ++i) d[i] -= alpha_buf[k] * Y[k][i];
    }
    double gamma = 1.0;
    if (m > 0) gamma = dot(S[m - 1], Y[m - 1]) / dot(Y[m - 1], Y[m - 1]);
    for (double& v : d) v *= gamma;
    for (std::size_t k = 0; k < m; ++k) {
      const double beta = rho[k] * dot(Y[k], d);
      for (std::size_t i = 0; i < n; ++i) d[i] += S[k][i] * (alpha_buf[k] - beta);
    }
    for (double& v : d) v = -v;

    double dphi0 = dot(g, d);
    if (!(dphi0 < 0.0)) {
      S.clear();
      Y.clear();
      rho.clear();
      for (std::size_t i = 0; i < n; ++i) d[i] = -g[i];
      dphi0 = dot(g, d);
    }

    double step = 1.0;
    if (m == 0) step = std::min(1.0, 1.0 / std::max(detail::inf_norm(g), 1e-300));

    // Strong-Wolfe search (bracketing phase, then zoom).
    double lo = 0.0, f_lo = fx, dphi_lo = dphi0;
    double hi = 0.0, f_hi = 0.0;
    bool bracketed = false, found = false;
    double f_new = fx;
    std::vector<double> x_new, g_new;
    for (int ls = 0; ls < opt.max_line_search && !found; ++ls) {
      double a;
      if (!bracketed) {
        a = step;
      } else {
        a = 0.5 * (lo + hi);
        if (std::isfinite(f_hi)) {
          // Quadratic through (lo, f_lo, dphi_lo) and (hi, f_hi), safeguarded.
          const double w = hi - lo;
          const double denom = 2.0 * (f_hi - f_lo - dphi_lo * w);
          if (denom > 0.0) {
            const double q = lo - dphi_lo * w * w / denom;
            const double lo_b = std::min(lo, hi) + 0.1 * std::abs(w);
            const double hi_b = std::max(lo, hi) - 0.1 * std::abs(w);
            if (q > lo_b && q < hi_b) a = q;
          }
        }
      }
      const double fa = eval_at(a);
      const double dphi_a = std::isfinite(fa) ? dot(gt, d) : 0.0;
      if (!std::isfinite(fa) || fa > fx + opt.c1 * a * dphi0 || (fa >= f_lo && (bracketed || ls > 0))) {
        hi = a;
        f_hi = fa;
        bracketed = true;
        continue;
      }
      if (std::abs(dphi_a) <= -opt.c2 * dphi0) {
        found = true;
        f_new = fa;
        x_new = xt;
        g_new = gt;
        break;
      }
      if (bracketed) {
        if (dphi_a * (hi - lo) >= 0.0) {
          hi = lo;
          f_hi = f_lo;
        }
      } else if (dphi_a >= 0.0) {
        hi = lo;
        f_hi = f_lo;
        bracketed = true;
      }
      lo = a;
      f_lo = fa;
      dphi_lo = dphi_a;
      x_new = xt;
      g_new = gt;
      if (!bracketed) step = a * 2.0;
    }
    if (!found) {
      // Accept the best sufficient-decrease point seen, if any.
      if (lo > 0.0 && f_lo < fx && !x_new.empty()) {
        f_new = f_lo;
      } else {
        res.stop_reason = "line search failed";
        res.converged = detail::inf_norm(g) <= 1e3 * opt.gradient_tol;
        break;
      }
    }

    std::vector<double> s(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = x_new[i] - x[i];
      y[i] = g_new[i] - g[i];
    }
    const double sy = dot(s, y);
    const double f_old = fx;
    x = std::move(x_new);
    g = std::move(g_new);
    fx = f_new;
    if (sy > 1e-16 * std::sqrt(dot(s, s) * dot(y, y))) {
      if (static_cast<int>(S.size()) == opt.memory) {
        S.pop_front();
        Y.pop_front();
        rho.pop_front();
      }
      S.push_back(std::move(s));
      Y.push_back(std::move(y));
      rho.push_back(1.0 / sy);
    }
    res.iterations = iter + 1;
    if (std::abs(f_old - fx) <= opt.relative_f_tol * std::max({std::abs(f_old), std::abs(fx), 1e-300})) {
      res.converged = true;
      res.stop_reason = "relative function tolerance";
      break;
    }
  }
  if (res.stop_reason.empty()) res.stop_reason = "iteration limit";
  res.x = std::move(x);
  res.value = fx;
  return res;
}

}  // namespace embscale
