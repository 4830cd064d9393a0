#pragma once

// The budget-to-plan recipe: full fine-tuning up to a threshold budget, LoRA
// above it, with model size, data quantity and method hyperparameters looked
// up from planner artifacts.
//
// Artifacts come either from the published constants (default_artifacts) or
// from a run set (artifacts_from_runs). Model size is read from the observed
// per-budget argmin when the budget falls on an observed bucket, and from the
// fitted size power law otherwise.

#include <cfloat>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "embscale/costmodel.hpp"
#include "embscale/digest.hpp"
#include "embscale/error.hpp"
#include "embscale/isoflop.hpp"
#include "embscale/registry.hpp"
#include "embscale/runs.hpp"

namespace embscale {

inline constexpr double kDefaultThreshold = 9.06e16;
inline constexpr ParamCount kDefaultLoraRank = 128;

struct TableEntry {
  double size = 0.0;    // n_nonembed
  double budget = 0.0;  // FLOP
  double value = 0.0;   // LoRA rank, or active-block fraction
  bool operator==(const TableEntry&) const = default;
};

struct PlannerArtifacts {
  Frontier frontier;
  std::map<MethodKind, PowerLawFit> size_fits;
  std::vector<TableEntry> rank_table;
  std::optional<std::vector<TableEntry>> freeze_table;
  std::vector<ModelArch> registry;
  double method_threshold = kDefaultThreshold;
  double grouping_tolerance = 0.05;
  std::string origin = "default";
  std::vector<std::string> notes;
};

struct Advisory {
  ParamCount batch_size = 1024;
  ParamCount context_len = 75;
  double temperature = 0.025;
  double warmup_fraction = 0.1;
  std::string peak_lr_rule = "pre-training peak / 10";
};

struct Plan {
  double budget = 0.0;
  FineTuneMethod method = FullFineTune{};
  ModelArch model;
  double predicted_n = 0.0;
  double tokens = 0.0;
  double flop = 0.0;
  std::optional<double> predicted_loss;
  std::string size_source;
  std::vector<std::string> flags;
  Advisory advisory;
  std::string artifacts_digest;
};

// ---- defaults ----

inline std::vector<double> reference_budgets() { return {1.5e15, 6e15, 2.4e16, 9.6e16, 3.8e17, 1.5e18}; }

inline PlannerArtifacts default_artifacts() {
  PlannerArtifacts a;
  a.origin = "default";
  a.registry = pythia_registry();
  const auto budgets = reference_budgets();
  const double lo = std::log(budgets.front()), hi = std::log(budgets.back());
  auto line = [&](double m, double b) {
    PowerLawFit f;
    f.slope = m;
    f.intercept = b;
    f.ln_x_min = lo;
    f.ln_x_max = hi;
    f.r_squared = 1.0;
    f.n_points = budgets.size();
    return f;
  };
  a.frontier.methods[MethodKind::full].fit = line(-0.21, 8.39);
  a.frontier.methods[MethodKind::lora].fit = line(-0.22, 8.93);
  a.frontier.crossovers = envelope_crossovers(a.frontier);
  a.method_threshold = kDefaultThreshold;
  // No numeric size trend is published; this placeholder grows the
  // optimal non-embedding size as the square root of the budget.
  const PowerLawFit size = line(0.5, std::log(0.5));
  a.size_fits[MethodKind::full] = size;
  a.size_fits[MethodKind::lora] = size;
  a.size_fits[MethodKind::freeze] = size;
  a.notes.push_back("frontier lines are the published rounded fits; they cross near e^54 FLOP, so the "
                    "published 9.06e16 FLOP threshold is used for the method switch");
  a.notes.push_back("size fits are a placeholder (N = 0.5 * C^0.5); fitted artifacts should replace them");
  a.notes.push_back("rank table is empty; LoRA rank defaults to 128");
  // Active-block fraction: all blocks for models up to 160M parameters,
  // about two thirds for 410M, half from 1B up.
  std::vector<TableEntry> freeze;
  for (const auto& m : a.registry) {
    const auto c = count_params(m).counts;
    const double frac = c.n_total <= 200'000'000 ? 1.0 : c.n_total <= 500'000'000 ? 2.0 / 3.0 : 0.5;
    for (double b : budgets) freeze.push_back({static_cast<double>(c.n_nonembed), b, frac});
  }
  a.freeze_table = freeze;
  return a;
}

// ---- derived from runs ----

namespace detail {

inline std::optional<SizeArgmin> observed_at(const std::vector<SizeArgmin>& best, double budget, double tol) {
  std::optional<SizeArgmin> hit;
  double best_dist = std::numeric_limits<double>::infinity();
  for (const auto& b : best) {
    const double dist = std::abs(std::log(budget / b.budget));
    if (std::abs(budget - b.budget) / b.budget <= tol && dist < best_dist) {
      best_dist = dist;
      hit = b;
    }
  }
  return hit;
}

// Threshold between full fine-tuning and LoRA. Observed per-budget winners
// decide inside the observed range; the fitted lines place the switch inside
// the boundary interval when they agree, and decide outside the range.
inline double derive_threshold(const Frontier& f, double tol, std::vector<std::string>& notes) {
  const auto full_it = f.methods.find(MethodKind::full);
  const auto lora_it = f.methods.find(MethodKind::lora);
  if (full_it == f.methods.end() && lora_it == f.methods.end()) {
    notes.push_back("no full or LoRA frontier; threshold left at the published 9.06e16 FLOP");
    return kDefaultThreshold;
  }
  if (lora_it == f.methods.end()) {
    notes.push_back("no LoRA frontier; full fine-tuning at every budget");
    return DBL_MAX;
  }
  if (full_it == f.methods.end()) {
    notes.push_back("no full fine-tuning frontier; LoRA at every budget");
    return DBL_MIN;
  }
  const auto& full = full_it->second;
  const auto& lora = lora_it->second;
  const auto x = crossover_ln(full.fit, lora.fit);
  const bool full_below = x && full.fit.slope > lora.fit.slope;  // lines put full first, LoRA after
  const double line_c = x ? std::exp(*x) : 0.0;

  // Observed winners per budget label.
  std::map<double, std::pair<double, double>> by_budget;  // budget -> (full loss, lora loss)
  const double inf = std::numeric_limits<double>::infinity();
  for (const auto& b : full.best) by_budget.try_emplace(b.budget, inf, inf).first->second.first = b.loss;
  for (const auto& b : lora.best) by_budget.try_emplace(b.budget, inf, inf).first->second.second = b.loss;
  std::vector<std::pair<double, bool>> wins;  // (budget, lora wins)
  for (const auto& [c, l] : by_budget) wins.emplace_back(c, l.second < l.first);

  std::optional<std::size_t> first_lora;
  for (std::size_t i = 0; i < wins.size(); ++i) {
    if (wins[i].second) {
      first_lora = i;
      break;
    }
  }
  if (!first_lora) {
    const double max_c = wins.empty() ? 0.0 : wins.back().first;
    if (full_below && std::isfinite(line_c)) {
      notes.push_back("full fine-tuning wins every observed budget; fitted lines place LoRA above the crossover");
      return std::max(line_c, max_c * (1.0 + tol));
    }
    notes.push_back("full fine-tuning wins every observed budget and the fitted lines never favour LoRA above it");
    return DBL_MAX;
  }
  if (*first_lora == 0) {
    const double min_c = wins.front().first;
    const double below_min = std::nextafter(min_c / (1.0 + tol), 0.0);
    if (full_below && std::isfinite(line_c)) {
      notes.push_back("LoRA wins every observed budget; fitted lines place full fine-tuning below the crossover");
      return std::min(line_c, below_min);
    }
    notes.push_back("LoRA wins every observed budget and the fitted lines never favour full fine-tuning below it");
    return DBL_MIN;
  }
  const double last_full = wins[*first_lora - 1].first;
  const double first_lora_c = wins[*first_lora].first;
  bool monotone = true;
  for (std::size_t i = *first_lora; i < wins.size(); ++i) monotone = monotone && wins[i].second;
  if (!monotone) notes.push_back("observed winners switch method more than once; threshold placed at the first switch");
  if (full_below && line_c >= last_full * (1.0 + tol) && line_c < first_lora_c / (1.0 + tol)) {
    notes.push_back("threshold from the fitted line crossover");
    return line_c;
  }
  notes.push_back("threshold at the geometric midpoint of the observed switch interval");
  return std::sqrt(last_full * first_lora_c);
}

inline double active_fraction(const ProfilePoint& p, const std::vector<ModelArch>& registry) {
  if (const auto* a = find_arch(registry, p.model_name); a && p.hyper) {
    return static_cast<double>(a->n_layers - *p.hyper) / static_cast<double>(a->n_layers);
  }
  return p.trainable_fraction;
}

}  // namespace detail

inline PlannerArtifacts artifacts_from_runs(std::span<const RunRecord> records, std::vector<ModelArch> registry,
                                            const ProfileOptions& opt = {}) {
  if (registry.empty()) throw ConfigError("model registry is empty");
  PlannerArtifacts a;
  a.origin = "fitted";
  a.registry = std::move(registry);
  a.grouping_tolerance = opt.grouping_tolerance;
  const auto profiles = build_all_profiles(records, opt);
  std::vector<IsoflopProfile> list;
  for (const auto& [k, p] : profiles) {
    list.push_back(p);
    for (const auto& w : p.warnings) a.notes.push_back(w);
  }
  a.frontier = frontier(list);
  for (const auto& w : a.frontier.warnings) a.notes.push_back(w);
  for (const auto& [k, p] : profiles) {
    try {
      a.size_fits[k] = optimal_size_fit(p).fit;
    } catch (const InsufficientDataError& e) {
      a.notes.push_back(std::string("no size fit for '") + to_string(k) + "': " + e.what());
    }
  }
  if (auto it = profiles.find(MethodKind::lora); it != profiles.end()) {
    for (const auto& p : it->second.points) {
      a.rank_table.push_back({static_cast<double>(p.size), p.budget, static_cast<double>(*p.hyper)});
    }
  }
  if (auto it = profiles.find(MethodKind::freeze); it != profiles.end()) {
    std::vector<TableEntry> t;
    for (const auto& p : it->second.points) {
      t.push_back({static_cast<double>(p.size), p.budget, detail::active_fraction(p, a.registry)});
    }
    a.freeze_table = std::move(t);
  }
  a.method_threshold = detail::derive_threshold(a.frontier, opt.grouping_tolerance, a.notes);
  return a;
}

// ---- serialization ----

inline nlohmann::ordered_json table_to_json(const std::vector<TableEntry>& t) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : t) arr.push_back({{"size", e.size}, {"budget", e.budget}, {"value", e.value}});
  return arr;
}

inline std::vector<TableEntry> table_from_json(const nlohmann::json& j) {
  std::vector<TableEntry> t;
  for (const auto& e : j) {
    TableEntry x{e.at("size").get<double>(), e.at("budget").get<double>(), e.at("value").get<double>()};
    if (!(x.size > 0.0) || !(x.budget > 0.0)) throw ValidationError("table entries need positive size and budget");
    t.push_back(x);
  }
  return t;
}

inline nlohmann::ordered_json artifacts_to_json(const PlannerArtifacts& a) {
  nlohmann::ordered_json j;
  j["origin"] = a.origin;
  j["method_threshold"] = a.method_threshold;
  j["grouping_tolerance"] = a.grouping_tolerance;
  const auto fr = frontier_to_json(a.frontier);
  j["fits"] = fr.at("fits");
  j["crossovers"] = fr.at("crossovers");
  nlohmann::ordered_json sf = nlohmann::ordered_json::object();
  for (const auto& [k, f] : a.size_fits) sf[to_string(k)] = power_law_to_json(f);
  j["size_fits"] = sf;
  j["rank_table"] = table_to_json(a.rank_table);
  j["freeze_table"] = a.freeze_table ? table_to_json(*a.freeze_table) : nlohmann::ordered_json(nullptr);
  j["registry"] = registry_to_json(a.registry);
  j["notes"] = a.notes;
  return j;
}

inline PlannerArtifacts artifacts_from_json(const nlohmann::json& j) {
  PlannerArtifacts a;
  try {
    a.origin = j.value("origin", std::string("file"));
    a.method_threshold = j.at("method_threshold").get<double>();
    a.grouping_tolerance = j.value("grouping_tolerance", 0.05);
    a.frontier = frontier_from_json(j);
    if (j.contains("size_fits")) {
      for (const auto& [k, v] : j.at("size_fits").items()) a.size_fits[parse_method_kind(k)] = power_law_from_json(v);
    }
    if (j.contains("rank_table")) a.rank_table = table_from_json(j.at("rank_table"));
    if (j.contains("freeze_table") && !j.at("freeze_table").is_null()) a.freeze_table = table_from_json(j.at("freeze_table"));
    a.registry = j.contains("registry") ? registry_from_json(j.at("registry")) : pythia_registry();
    if (j.contains("notes")) a.notes = j.at("notes").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed planner artifacts: ") + e.what());
  }
  if (!(a.method_threshold > 0.0)) throw ConfigError("method_threshold must be positive");
  if (a.registry.empty()) throw ConfigError("model registry is empty");
  return a;
}

inline std::string artifacts_digest(const PlannerArtifacts& a) { return digest_hex(artifacts_to_json(a).dump()); }

// ---- planning ----

// Registry entry nearest `n` (non-embedding count) in log space; ties go to the smaller model.
inline const ModelArch& snap_to_registry(const std::vector<ModelArch>& registry, double n) {
  if (registry.empty()) throw ConfigError("model registry is empty");
  if (!(n > 0.0)) throw DomainError("predicted size must be positive");
  const ModelArch* best = nullptr;
  double best_dist = std::numeric_limits<double>::infinity();
  ParamCount best_size = 0;
  for (const auto& m : registry) {
    const ParamCount size = count_params(m).counts.n_nonembed;
    const double dist = std::abs(std::log(static_cast<double>(size)) - std::log(n));
    if (dist < best_dist || (dist == best_dist && size < best_size)) {
      best = &m;
      best_dist = dist;
      best_size = size;
    }
  }
  return *best;
}

namespace detail {

struct Lookup {
  double value = 0.0;
  bool exact = false;
};

// Nearest entry in (ln size, ln budget); exact when both lie within tolerance.
inline std::optional<Lookup> nearest_entry(const std::vector<TableEntry>& t, double size, double budget, double tol) {
  if (t.empty()) return std::nullopt;
  const TableEntry* best = nullptr;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& e : t) {
    const double ds = std::log(size / e.size), db = std::log(budget / e.budget);
    const double d = ds * ds + db * db;
    if (d < best_d || (d == best_d && best && std::tie(e.size, e.budget, e.value) < std::tie(best->size, best->budget, best->value))) {
      best_d = d;
      best = &e;
    }
  }
  const double lt = std::log1p(tol);
  const bool exact = std::abs(std::log(size / best->size)) <= lt && std::abs(std::log(budget / best->budget)) <= lt;
  return Lookup{best->value, exact};
}

inline bool inside_table(const std::vector<TableEntry>& t, double size, double budget, double tol) {
  if (t.empty()) return false;
  double smin = t.front().size, smax = smin, bmin = t.front().budget, bmax = bmin;
  for (const auto& e : t) {
    smin = std::min(smin, e.size);
    smax = std::max(smax, e.size);
    bmin = std::min(bmin, e.budget);
    bmax = std::max(bmax, e.budget);
  }
  return size >= smin / (1.0 + tol) && size <= smax * (1.0 + tol) && budget >= bmin / (1.0 + tol) &&
         budget <= bmax * (1.0 + tol);
}

struct SizeChoice {
  const ModelArch* model = nullptr;
  double predicted_n = 0.0;
  std::string source;
};

inline SizeChoice choose_size(double budget, MethodKind kind, const PlannerArtifacts& a, std::vector<std::string>& flags) {
  SizeChoice out;
  std::optional<PowerLawFit> fit;
  if (auto it = a.size_fits.find(kind); it != a.size_fits.end()) {
    fit = it->second;
  } else if (auto full = a.size_fits.find(MethodKind::full); full != a.size_fits.end()) {
    fit = full->second;
    flags.push_back(std::string("no size fit for '") + to_string(kind) + "'; using the full fine-tuning size fit");
  }
  if (fit) out.predicted_n = fit->eval(budget);

  if (auto it = a.frontier.methods.find(kind); it != a.frontier.methods.end()) {
    if (auto hit = observed_at(it->second.best, budget, a.grouping_tolerance)) {
      const ModelArch* m = find_arch(a.registry, hit->model_name);
      out.model = m ? m : &snap_to_registry(a.registry, static_cast<double>(hit->size));
      out.source = "observed-argmin";
      if (!fit) out.predicted_n = static_cast<double>(hit->size);
      return out;
    }
  }
  if (!fit) throw ConfigError(std::string("no size fit available for '") + to_string(kind) + "'");
  if (!fit->in_domain(budget)) flags.push_back("budget outside the size fit's domain; extrapolated");
  out.model = &snap_to_registry(a.registry, out.predicted_n);
  out.source = "size-fit";
  return out;
}

inline std::optional<double> frontier_loss(double budget, MethodKind kind, const PlannerArtifacts& a,
                                           std::vector<std::string>& flags) {
  if (auto it = a.frontier.methods.find(kind); it != a.frontier.methods.end()) return it->second.fit.eval(budget);
  if (auto k = a.frontier.designated(budget)) {
    flags.push_back(std::string("no frontier line for '") + to_string(kind) + "'; loss from the envelope");
    return a.frontier.methods.at(*k).fit.eval(budget);
  }
  flags.push_back("no frontier lines; loss not predicted");
  return std::nullopt;
}

inline Plan finish(double budget, FineTuneMethod method, const SizeChoice& sc, const PlannerArtifacts& a,
                   std::vector<std::string> flags) {
  Plan p;
  p.budget = budget;
  p.method = method;
  p.model = *sc.model;
  p.predicted_n = sc.predicted_n;
  p.size_source = sc.source;
  const auto counts = param_counts(p.model, p.method);
  p.tokens = tokens_for_budget(counts, budget);
  p.flop = flop_cost(counts, p.tokens);
  p.predicted_loss = frontier_loss(budget, kind_of(method), a, flags);
  p.flags = std::move(flags);
  p.artifacts_digest = artifacts_digest(a);
  return p;
}

inline void check_plan_inputs(double budget, const PlannerArtifacts& a) {
  if (!(budget > 0.0) || !std::isfinite(budget)) throw DomainError("budget must be a positive finite FLOP count");
  if (a.registry.empty()) throw ConfigError("model registry is empty");
}

}  // namespace detail

inline Plan plan(double budget, const PlannerArtifacts& a) {
  detail::check_plan_inputs(budget, a);
  std::vector<std::string> flags;
  const MethodKind kind = budget <= a.method_threshold ? MethodKind::full : MethodKind::lora;
  const auto sc = detail::choose_size(budget, kind, a, flags);
  FineTuneMethod method = FullFineTune{};
  if (kind == MethodKind::lora) {
    const double size = static_cast<double>(count_params(*sc.model).counts.n_nonembed);
    ParamCount rank = kDefaultLoraRank;
    if (!detail::inside_table(a.rank_table, size, budget, a.grouping_tolerance)) {
      flags.push_back("outside the rank table; LoRA rank defaults to 128");
    } else {
      const auto hit = detail::nearest_entry(a.rank_table, size, budget, a.grouping_tolerance);
      rank = static_cast<ParamCount>(std::llround(hit->value));
      if (!hit->exact) flags.push_back("rank from the nearest table bucket");
    }
    method = LoRA{rank};
  }
  return detail::finish(budget, method, sc, a, std::move(flags));
}

// Block-freezing alternative: same size logic, active-block fraction from the freeze table.
inline Plan plan_freeze(double budget, const PlannerArtifacts& a) {
  detail::check_plan_inputs(budget, a);
  if (!a.freeze_table || a.freeze_table->empty()) throw ConfigError("freeze mode needs a freeze table in the artifacts");
  std::vector<std::string> flags;
  const auto sc = detail::choose_size(budget, MethodKind::freeze, a, flags);
  const double size = static_cast<double>(count_params(*sc.model).counts.n_nonembed);
  const auto hit = detail::nearest_entry(*a.freeze_table, size, budget, a.grouping_tolerance);
  if (!hit->exact) flags.push_back("freeze table miss; nearest-bucket fraction used");
  const ParamCount layers = sc.model->n_layers;
  ParamCount k = layers - static_cast<ParamCount>(std::llround(hit->value * static_cast<double>(layers)));
  if (k >= layers) {
    k = layers - 1;
    flags.push_back("active fraction rounds to zero blocks; one block kept active");
  }
  k = std::max<ParamCount>(k, 0);
  return detail::finish(budget, BlockFreeze{k}, sc, a, std::move(flags));
}

inline nlohmann::ordered_json plan_to_json(const Plan& p) {
  nlohmann::ordered_json j;
  j["budget"] = p.budget;
  j["method"] = to_string(p.method);
  j["method_kind"] = to_string(kind_of(p.method));
  j["hyper"] = kind_of(p.method) == MethodKind::lora || kind_of(p.method) == MethodKind::freeze
                   ? nlohmann::ordered_json(method_hyper(p.method))
                   : nlohmann::ordered_json(nullptr);
  j["model_name"] = p.model.name;
  const auto counts = param_counts(p.model, p.method);
  j["n_total"] = counts.n_total;
  j["n_nonembed"] = counts.n_nonembed;
  j["trainable_fraction"] = counts.trainable_fraction;
  j["predicted_n"] = p.predicted_n;
  j["size_source"] = p.size_source;
  j["tokens"] = p.tokens;
  j["flop"] = p.flop;
  j["predicted_loss"] = p.predicted_loss ? nlohmann::ordered_json(*p.predicted_loss) : nlohmann::ordered_json(nullptr);
  nlohmann::ordered_json adv;
  adv["batch_size"] = p.advisory.batch_size;
  adv["context_len"] = p.advisory.context_len;
  adv["temperature"] = p.advisory.temperature;
  adv["warmup_fraction"] = p.advisory.warmup_fraction;
  adv["peak_lr_rule"] = p.advisory.peak_lr_rule;
  j["advisory"] = adv;
  j["model"] = arch_to_json(p.model);
  j["flags"] = p.flags;
  j["artifacts_digest"] = p.artifacts_digest;
  return j;
}

}  // namespace embscale
