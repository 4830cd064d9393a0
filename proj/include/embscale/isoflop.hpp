#pragma once

// IsoFLOP profiles, optimal-size power laws, and the compute-optimal frontier.
//
// Model size throughout is the non-embedding parameter count, the same N the
// scaling-law fits use. Budgets are bucketed jointly over every record passed
// in, so profiles built for different methods from one run set share labels.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "embscale/costmodel.hpp"
#include "embscale/error.hpp"
#include "embscale/runs.hpp"

namespace embscale {

struct ProfileOptions {
  double grouping_tolerance = 0.05;
  // Nominal budgets. Empty means clusters are found from the data.
  std::vector<double> budgets;
};

struct ProfilePoint {
  double budget = 0.0;  // bucket label
  ParamCount size = 0;  // n_nonembed
  std::string model_name;
  double loss = 0.0;
  std::optional<ParamCount> hyper;  // winning rank or frozen block count
  double trainable_fraction = 1.0;
  std::size_t n_runs = 0;
};

struct IsoflopProfile {
  MethodKind method = MethodKind::full;
  std::vector<ProfilePoint> points;  // sorted by (budget, size)
  double grouping_tolerance = 0.05;
  std::vector<std::string> warnings;

  std::vector<double> budgets() const {
    std::vector<double> b;
    for (const auto& p : points)
      if (b.empty() || b.back() != p.budget) b.push_back(p.budget);
    return b;
  }
};

struct PowerLawFit {
  double slope = 0.0;
  double intercept = 0.0;
  double ln_x_min = 0.0;
  double ln_x_max = 0.0;
  double r_squared = 1.0;
  std::size_t n_points = 0;

  double eval_ln(double ln_x) const { return intercept + slope * ln_x; }
  double eval(double x) const { return std::exp(eval_ln(std::log(x))); }
  bool in_domain(double x) const {
    const double l = std::log(x);
    return l >= ln_x_min - 1e-12 && l <= ln_x_max + 1e-12;
  }
};

// Least squares on (ln x, ln y).
inline PowerLawFit fit_power_law(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw ValidationError("fit_power_law: length mismatch");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!(xs[i] > 0.0) || !(ys[i] > 0.0)) throw DomainError("power-law fit needs positive values");
    lx.push_back(std::log(xs[i]));
    ly.push_back(std::log(ys[i]));
  }
  const auto n = static_cast<double>(lx.size());
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / n;
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / n;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (lx.size() < 2 || sxx == 0.0) throw InsufficientDataError("power-law fit needs at least 2 distinct x values");
  PowerLawFit f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.ln_x_min = *std::min_element(lx.begin(), lx.end());
  f.ln_x_max = *std::max_element(lx.begin(), lx.end());
  f.n_points = lx.size();
  if (syy == 0.0) {
    f.r_squared = 1.0;
  } else {
    double ss_res = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
      const double r = ly[i] - f.eval_ln(lx[i]);
      ss_res += r * r;
    }
    f.r_squared = std::clamp(1.0 - ss_res / syy, 0.0, 1.0);
  }
  return f;
}

// ln C where two ln-loss lines meet; none when they are parallel.
inline std::optional<double> crossover_ln(const PowerLawFit& a, const PowerLawFit& b) {
  if (std::abs(a.slope - b.slope) < 1e-12) return std::nullopt;
  return (b.intercept - a.intercept) / (a.slope - b.slope);
}

struct BucketAssignment {
  std::vector<std::optional<std::size_t>> bucket;  // per input value
  std::vector<double> labels;                      // ascending
};

// Groups positive values into buckets. With nominal values each input joins
// the nearest nominal (log distance) when within `tol` relative; otherwise
// sorted inputs are clustered greedily, a cluster spanning at most a factor
// (1 + tol) from its smallest member, and labelled by its geometric mean.
inline BucketAssignment bucket_values(std::span<const double> values, double tol,
                                      std::span<const double> nominal = {}) {
  if (!(tol >= 0.0)) throw ValidationError("grouping tolerance must be >= 0");
  BucketAssignment out;
  out.bucket.assign(values.size(), std::nullopt);
  if (!nominal.empty()) {
    std::vector<double> labels(nominal.begin(), nominal.end());
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    for (double b : labels)
      if (!(b > 0.0)) throw ValidationError("nominal budgets must be positive");
    out.labels = labels;
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::optional<std::size_t> best;
      double best_dist = std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < labels.size(); ++k) {
        const double dist = std::abs(std::log(values[i] / labels[k]));
        if (dist < best_dist) {
          best_dist = dist;
          best = k;
        }
      }
      if (best && std::abs(values[i] - labels[*best]) / labels[*best] <= tol) out.bucket[i] = best;
    }
    return out;
  }
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::size_t i = 0;
  while (i < order.size()) {
    const double first = values[order[i]];
    std::size_t j = i;
    double log_sum = 0.0;
    while (j < order.size() && values[order[j]] <= first * (1.0 + tol)) {
      log_sum += std::log(values[order[j]]);
      out.bucket[order[j]] = out.labels.size();
      ++j;
    }
    const double last = values[order[j - 1]];
    double label = first;
    if (first != last) {
      // Ten significant digits hide rounding noise in recomputed FLOP counts;
      // clamping keeps the label inside its own cluster.
      const double g = std::exp(log_sum / static_cast<double>(j - i));
      const double scale = std::pow(10.0, std::floor(std::log10(g)) - 9.0);
      label = std::clamp(std::round(g / scale) * scale, first, last);
    }
    out.labels.push_back(label);
    i = j;
  }
  return out;
}

namespace detail {

inline std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline std::optional<ParamCount> hyper_of(const RunRecord& r) {
  if (r.kind() == MethodKind::lora || r.kind() == MethodKind::freeze) return method_hyper(r.method);
  return std::nullopt;
}

// Order used for every argmin: lower loss, then smaller size, then smaller
// hyperparameter, then the remaining fields so the choice never depends on
// input order.
inline bool better_run(const RunRecord& a, const RunRecord& b) {
  const auto ha = hyper_of(a).value_or(-1), hb = hyper_of(b).value_or(-1);
  return std::tie(a.final_loss, a.n_nonembed, ha, a.model_name, a.replicate, a.flop) <
         std::tie(b.final_loss, b.n_nonembed, hb, b.model_name, b.replicate, b.flop);
}

}  // namespace detail

// Profiles for every method present in `records`, keyed by method kind.
inline std::map<MethodKind, IsoflopProfile> build_all_profiles(std::span<const RunRecord> records,
                                                               const ProfileOptions& opt = {}) {
  std::vector<double> flops;
  for (const auto& r : records) flops.push_back(r.flop);
  const auto buckets = bucket_values(flops, opt.grouping_tolerance, opt.budgets);

  std::map<MethodKind, IsoflopProfile> out;
  std::map<std::tuple<MethodKind, std::size_t, ParamCount>, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto& prof = out[records[i].kind()];
    prof.method = records[i].kind();
    prof.grouping_tolerance = opt.grouping_tolerance;
    if (!buckets.bucket[i]) {
      prof.warnings.push_back("run " + records[i].model_name + " " + to_string(records[i].method) + " at " +
                              detail::fmt_g(records[i].flop) + " FLOP matches no budget within " +
                              detail::fmt_g(100.0 * opt.grouping_tolerance) + "%; excluded");
      continue;
    }
    cells[{records[i].kind(), *buckets.bucket[i], records[i].n_nonembed}].push_back(i);
  }
  for (const auto& [key, idx] : cells) {
    const auto& [kind, bucket, size] = key;
    std::size_t best = idx.front();
    for (std::size_t i : idx)
      if (detail::better_run(records[i], records[best])) best = i;
    const auto& r = records[best];
    out[kind].points.push_back({buckets.labels[bucket], size, r.model_name, r.final_loss, detail::hyper_of(r),
                                r.trainable_fraction, idx.size()});
  }
  // std::map iteration already yields (budget bucket, size) order per method.
  return out;
}

inline IsoflopProfile build_profiles(std::span<const RunRecord> records, MethodKind method,
                                     const ProfileOptions& opt = {}) {
  auto all = build_all_profiles(records, opt);
  auto it = all.find(method);
  if (it == all.end()) {
    throw InsufficientDataError(std::string("no runs for method '") + to_string(method) + "'");
  }
  return std::move(it->second);
}

struct SizeArgmin {
  double budget = 0.0;
  ParamCount size = 0;
  std::string model_name;
  double loss = 0.0;
  std::optional<ParamCount> hyper;
};

// Best point over sizes at each budget; ties go to the smaller size.
inline std::vector<SizeArgmin> best_per_budget(const IsoflopProfile& prof, std::size_t min_sizes = 1) {
  std::vector<SizeArgmin> out;
  std::size_t i = 0;
  while (i < prof.points.size()) {
    std::size_t j = i, best = i;
    while (j < prof.points.size() && prof.points[j].budget == prof.points[i].budget) {
      const auto& p = prof.points[j];
      const auto& b = prof.points[best];
      if (p.loss < b.loss || (p.loss == b.loss && p.size < b.size)) best = j;
      ++j;
    }
    if (j - i >= min_sizes) {
      const auto& b = prof.points[best];
      out.push_back({b.budget, b.size, b.model_name, b.loss, b.hyper});
    }
    i = j;
  }
  return out;
}

struct SizeFit {
  PowerLawFit fit;
  std::vector<SizeArgmin> argmins;
};

// Power law of the loss-minimising size against budget. Budgets with fewer
// than two sizes carry no information about the optimum and are skipped.
inline SizeFit optimal_size_fit(const IsoflopProfile& prof) {
  SizeFit out;
  out.argmins = best_per_budget(prof, 2);
  if (out.argmins.size() < 2) {
    throw InsufficientDataError("optimal size fit needs at least 2 budgets with 2 or more sizes each");
  }
  std::vector<double> c, n;
  for (const auto& a : out.argmins) {
    c.push_back(a.budget);
    n.push_back(static_cast<double>(a.size));
  }
  out.fit = fit_power_law(c, n);
  return out;
}

struct Crossover {
  double budget = 0.0;
  MethodKind before = MethodKind::full;
  MethodKind after = MethodKind::full;
};

struct MethodFrontier {
  PowerLawFit fit;  // ln(best loss) against ln(budget)
  std::vector<SizeArgmin> best;
};

struct Frontier {
  std::map<MethodKind, MethodFrontier> methods;
  std::vector<Crossover> crossovers;  // ascending budget
  std::vector<std::string> warnings;

  // Method whose line is lowest at `budget`; ties go to the earlier kind.
  std::optional<MethodKind> designated(double budget) const {
    return designated_ln(std::log(budget));
  }

  std::optional<MethodKind> designated_ln(double ln_c) const {
    std::optional<MethodKind> best;
    double best_v = std::numeric_limits<double>::infinity();
    for (const auto& [k, m] : methods) {
      const double v = m.fit.eval_ln(ln_c);
      if (v < best_v) {
        best_v = v;
        best = k;
      }
    }
    return best;
  }
};

// Envelope transitions between the given lines.
inline std::vector<Crossover> envelope_crossovers(const Frontier& f) {
  std::vector<double> cand;
  for (auto a = f.methods.begin(); a != f.methods.end(); ++a) {
    for (auto b = std::next(a); b != f.methods.end(); ++b) {
      // Crossings whose budget would overflow or underflow a double are dropped.
      if (auto x = crossover_ln(a->second.fit, b->second.fit); x && std::abs(*x) < 700.0) cand.push_back(*x);
    }
  }
  std::sort(cand.begin(), cand.end());
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  std::vector<Crossover> out;
  if (cand.empty()) return out;
  std::vector<double> probes;
  probes.push_back(cand.front() - 1.0);
  for (std::size_t i = 0; i + 1 < cand.size(); ++i) probes.push_back(0.5 * (cand[i] + cand[i + 1]));
  probes.push_back(cand.back() + 1.0);
  for (std::size_t i = 0; i < cand.size(); ++i) {
    const auto lo = f.designated_ln(probes[i]);
    const auto hi = f.designated_ln(probes[i + 1]);
    if (lo && hi && *lo != *hi) out.push_back({std::exp(cand[i]), *lo, *hi});
  }
  return out;
}

inline Frontier frontier(const std::vector<IsoflopProfile>& profiles) {
  Frontier f;
  for (const auto& p : profiles) {
    auto best = best_per_budget(p);
    if (best.size() < 2) {
      f.warnings.push_back(std::string("method '") + to_string(p.method) + "' has fewer than 2 budgets; left out");
      continue;
    }
    std::vector<double> c, l;
    for (const auto& b : best) {
      c.push_back(b.budget);
      l.push_back(b.loss);
    }
    f.methods[p.method] = {fit_power_law(c, l), std::move(best)};
  }
  if (f.methods.empty()) throw InsufficientDataError("frontier needs a profile with at least 2 budgets");
  f.crossovers = envelope_crossovers(f);
  return f;
}

struct DataGroup {
  double tokens = 0.0;  // bucket label
  RunRecord winner;
  std::size_t n_runs = 0;
  ParamCount largest_size = 0;
  bool largest_wins = false;
};

struct DataConstrainedProfile {
  std::vector<DataGroup> groups;
  bool largest_model_always_wins = true;
};

// Best configuration per (bucketed) token count.
inline DataConstrainedProfile data_constrained_profile(std::span<const RunRecord> records, double tol = 0.05) {
  if (records.empty()) throw InsufficientDataError("data-constrained profile needs at least one run");
  std::vector<double> tokens;
  for (const auto& r : records) {
    if (!(r.tokens > 0.0)) throw DomainError("data-constrained profile needs positive token counts");
    tokens.push_back(r.tokens);
  }
  const auto buckets = bucket_values(tokens, tol);
  DataConstrainedProfile out;
  out.groups.resize(buckets.labels.size());
  std::vector<std::optional<std::size_t>> best(buckets.labels.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const std::size_t b = *buckets.bucket[i];
    auto& g = out.groups[b];
    ++g.n_runs;
    g.largest_size = std::max(g.largest_size, records[i].n_nonembed);
    if (!best[b] || detail::better_run(records[i], records[*best[b]])) best[b] = i;
  }
  for (std::size_t b = 0; b < out.groups.size(); ++b) {
    auto& g = out.groups[b];
    g.tokens = buckets.labels[b];
    g.winner = records[*best[b]];
    g.largest_wins = g.winner.n_nonembed == g.largest_size;
    out.largest_model_always_wins = out.largest_model_always_wins && g.largest_wins;
  }
  return out;
}

// ---- export ----

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string profile_to_csv(const IsoflopProfile& p) {
  std::string out = "budget,size,loss,hyper\n";
  for (const auto& pt : p.points) {
    out += format_real(pt.budget) + "," + std::to_string(pt.size) + "," + format_real(pt.loss) + "," +
           (pt.hyper ? std::to_string(*pt.hyper) : std::string()) + "\n";
  }
  return out;
}

inline nlohmann::ordered_json power_law_to_json(const PowerLawFit& f) {
  nlohmann::ordered_json j;
  j["slope"] = f.slope;
  j["intercept"] = f.intercept;
  j["r2"] = f.r_squared;
  j["domain_ln"] = {f.ln_x_min, f.ln_x_max};
  j["n_points"] = f.n_points;
  return j;
}

inline PowerLawFit power_law_from_json(const nlohmann::json& j) {
  PowerLawFit f;
  f.slope = j.at("slope").get<double>();
  f.intercept = j.at("intercept").get<double>();
  f.r_squared = j.value("r2", 1.0);
  if (j.contains("domain_ln")) {
    f.ln_x_min = j.at("domain_ln").at(0).get<double>();
    f.ln_x_max = j.at("domain_ln").at(1).get<double>();
  }
  f.n_points = j.value("n_points", std::size_t{0});
  if (!std::isfinite(f.slope) || !std::isfinite(f.intercept)) throw ValidationError("power-law fit must be finite");
  return f;
}

inline nlohmann::ordered_json profile_to_json(const IsoflopProfile& p) {
  nlohmann::ordered_json j;
  j["method"] = to_string(p.method);
  j["grouping_tolerance"] = p.grouping_tolerance;
  auto pts = nlohmann::ordered_json::array();
  for (const auto& pt : p.points) {
    nlohmann::ordered_json q;
    q["budget"] = pt.budget;
    q["size"] = pt.size;
    q["model_name"] = pt.model_name;
    q["loss"] = pt.loss;
    q["hyper"] = pt.hyper ? nlohmann::ordered_json(*pt.hyper) : nlohmann::ordered_json(nullptr);
    q["n_runs"] = pt.n_runs;
    pts.push_back(q);
  }
  j["points"] = pts;
  j["warnings"] = p.warnings;
  return j;
}

inline nlohmann::ordered_json argmins_to_json(const std::vector<SizeArgmin>& v) {
  auto a = nlohmann::ordered_json::array();
  for (const auto& b : v) {
    nlohmann::ordered_json q;
    q["budget"] = b.budget;
    q["size"] = b.size;
    q["model_name"] = b.model_name;
    q["loss"] = b.loss;
    q["hyper"] = b.hyper ? nlohmann::ordered_json(*b.hyper) : nlohmann::ordered_json(nullptr);
    a.push_back(q);
  }
  return a;
}

inline std::vector<SizeArgmin> argmins_from_json(const nlohmann::json& a) {
  std::vector<SizeArgmin> out;
  for (const auto& q : a) {
    SizeArgmin b;
    b.budget = q.at("budget").get<double>();
    b.size = q.at("size").get<ParamCount>();
    b.model_name = q.value("model_name", std::string());
    b.loss = q.at("loss").get<double>();
    if (q.contains("hyper") && !q.at("hyper").is_null()) b.hyper = q.at("hyper").get<ParamCount>();
    out.push_back(std::move(b));
  }
  return out;
}

inline nlohmann::ordered_json frontier_to_json(const Frontier& f) {
  nlohmann::ordered_json j;
  auto fits = nlohmann::ordered_json::array();
  for (const auto& [k, m] : f.methods) {
    auto q = power_law_to_json(m.fit);
    nlohmann::ordered_json row;
    row["method"] = to_string(k);
    for (auto& [key, val] : q.items()) row[key] = val;
    row["best"] = argmins_to_json(m.best);
    fits.push_back(row);
  }
  j["fits"] = fits;
  auto xs = nlohmann::ordered_json::array();
  for (const auto& c : f.crossovers) {
    xs.push_back({{"budget", c.budget}, {"before", to_string(c.before)}, {"after", to_string(c.after)}});
  }
  j["crossovers"] = xs;
  j["warnings"] = f.warnings;
  return j;
}

inline Frontier frontier_from_json(const nlohmann::json& j) {
  Frontier f;
  for (const auto& row : j.at("fits")) {
    MethodFrontier m;
    m.fit = power_law_from_json(row);
    if (row.contains("best")) m.best = argmins_from_json(row.at("best"));
    f.methods[parse_method_kind(row.at("method").get<std::string>())] = std::move(m);
  }
  f.crossovers = envelope_crossovers(f);
  return f;
}

}  // namespace embscale
