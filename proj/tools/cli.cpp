#include "cli.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "embscale/costmodel.hpp"
#include "embscale/ingest.hpp"
#include "embscale/isoflop.hpp"
#include "embscale/recipe.hpp"
#include "embscale/registry.hpp"
#include "embscale/scalinglaw.hpp"
#include "embscale/stats.hpp"
#include "embscale/synth.hpp"

namespace embscale {
namespace {

using ojson = nlohmann::ordered_json;

// Thrown for argument combinations CLI11 cannot express; maps to exit code 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Table {
  std::vector<std::string> headers;
  std::vector<std::vector<std::string>> rows;
};

std::string cell(const ojson& v) {
  if (v.is_null()) return "";
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

// One-row table from the scalar fields of a JSON object.
Table object_table(const ojson& j) {
  Table t;
  t.rows.emplace_back();
  for (const auto& [k, v] : j.items()) {
    if (v.is_structured()) continue;
    t.headers.push_back(k);
    t.rows.back().push_back(cell(v));
  }
  return t;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::string render(const ojson& j, const Table& t, const std::string& format) {
  std::ostringstream out;
  if (format == "json") {
    out << j.dump(2) << '\n';
  } else if (format == "csv") {
    for (std::size_t i = 0; i < t.headers.size(); ++i) out << (i ? "," : "") << csv_field(t.headers[i]);
    out << '\n';
    for (const auto& r : t.rows) {
      for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << csv_field(r[i]);
      out << '\n';
    }
  } else {
    std::vector<std::size_t> w(t.headers.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = t.headers[i].size();
    for (const auto& r : t.rows)
      for (std::size_t i = 0; i < r.size() && i < w.size(); ++i) w[i] = std::max(w[i], r[i].size());
    auto line = [&](const std::vector<std::string>& r) {
      std::string s;
      for (std::size_t i = 0; i < r.size(); ++i) {
        s += r[i];
        if (i + 1 < r.size()) s += std::string(w[i] - r[i].size() + 2, ' ');
      }
      out << s << '\n';
    };
    line(t.headers);
    for (const auto& r : t.rows) line(r);
  }
  return out.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot write '" + path + "'");
  f << text;
  if (!f) throw ValidationError("failed writing '" + path + "'");
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

std::optional<std::string> suggest(const std::string& arg, const std::vector<std::string>& names) {
  std::optional<std::string> best;
  std::size_t best_d = 4;
  for (const auto& n : names) {
    const std::size_t d = edit_distance(arg, n);
    if (d < best_d) {
      best_d = d;
      best = n;
    }
  }
  return best;
}

std::vector<std::string> long_names(const CLI::App* app) {
  std::vector<std::string> out;
  for (const CLI::App* a = app; a; a = a->get_parent()) {
    for (const auto* o : a->get_options()) {
      for (const auto& n : o->get_lnames()) out.push_back("--" + n);
    }
  }
  return out;
}

// ---- option state ----

struct Global {
  std::string format;
  std::string registry_path;
  std::vector<ModelArch> registry() const { return registry_path.empty() ? default_registry() : load_registry(registry_path); }
  std::vector<ModelArch> planning_registry() const {
    return registry_path.empty() ? pythia_registry() : load_registry(registry_path);
  }
  std::string fmt(const std::string& fallback = "json") const { return format.empty() ? fallback : format; }
};

struct RunsInput {
  std::string path;
  std::string column_map;
  std::string input_format = "auto";

  RunSet load(const Global& g, std::ostream& err) const {
    SchemaOptions opt;
    opt.registry = g.registry();
    if (!column_map.empty()) opt.column_map = load_column_map(column_map);
    opt.format = input_format == "csv" ? InputFormat::csv : input_format == "jsonl" ? InputFormat::jsonl : InputFormat::auto_detect;
    auto set = load_runs(path, opt);
    for (const auto& d : set.rejected) err << "rejected: " << format_diagnostic(d) << '\n';
    for (const auto& d : set.warnings) err << "warning: " << format_diagnostic(d) << '\n';
    return set;
  }

  void attach(CLI::App* sub) {
    sub->add_option("--runs", path, "Run log (CSV or JSON-lines)")->required();
    sub->add_option("--column-map", column_map, "JSON file mapping source columns to canonical names");
    sub->add_option("--input-format", input_format, "Run log format")->check(CLI::IsMember({"auto", "csv", "jsonl"}));
  }
};

ProfileOptions profile_options(double tol, const std::vector<double>& budgets) {
  ProfileOptions opt;
  opt.grouping_tolerance = tol;
  opt.budgets = budgets;
  return opt;
}

void emit(const std::string& text, const std::string& out_path, std::ostream& out, std::ostream& err) {
  if (out_path.empty()) {
    out << text;
  } else {
    write_file(out_path, text);
    err << "wrote " << out_path << '\n';
  }
}

ojson counts_json(const ParamCounts& c) {
  ojson j;
  j["n_total"] = c.n_total;
  j["n_nonembed"] = c.n_nonembed;
  j["n_forward"] = c.n_forward;
  j["n_backward"] = c.n_backward;
  j["n_updated"] = c.n_updated;
  j["trainable_fraction"] = c.trainable_fraction;
  return j;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Compute-optimal planning and analysis for contrastive embedding fine-tuning", "embscale"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--format", g.format, "Output format")->check(CLI::IsMember({"json", "csv", "table"}));
  app.add_option("--registry", g.registry_path, "Model registry JSON (default: built-in)");

  // flops
  std::string arch_name, method_text = "full", out_path;
  double tokens = 0.0, budget = 0.0;
  auto* flops = app.add_subcommand("flops", "Training FLOP for an architecture, method and token count");
  flops->add_option("--arch", arch_name, "Registry name or architecture JSON file")->required();
  flops->add_option("--method", method_text, "full | freeze:k | lora:r | bias");
  flops->add_option("--tokens", tokens, "Training tokens D")->required();

  auto* tok = app.add_subcommand("tokens", "Tokens affordable under a FLOP budget");
  tok->add_option("--arch", arch_name, "Registry name or architecture JSON file")->required();
  tok->add_option("--method", method_text, "full | freeze:k | lora:r | bias");
  tok->add_option("--budget", budget, "FLOP budget C")->required();

  // ingest
  RunsInput runs_in;
  auto* ingest = app.add_subcommand("ingest", "Validate a run log and write canonical JSON-lines");
  runs_in.attach(ingest);
  ingest->add_option("--out", out_path, "Canonical JSON-lines output (default: stdout)");

  // fit
  std::string formula = "modified", holdout = "largest", residual = "log", fit_method, init_grid_path;
  double delta = 0.001;
  bool pooled = false;
  int threads = 0, max_iter = 2000;
  auto* fitc = app.add_subcommand("fit", "Fit a scaling law to a run log");
  runs_in.attach(fitc);
  fitc->add_option("--formula", formula, "Loss formula")->check(CLI::IsMember({"chinchilla", "modified"}));
  fitc->add_option("--delta", delta, "Huber delta on log residuals")->check(CLI::PositiveNumber);
  fitc->add_option("--holdout", holdout, "Test split")->check(CLI::IsMember({"largest", "none"}));
  fitc->add_option("--residual", residual, "Residual space")->check(CLI::IsMember({"log", "linear"}));
  auto* method_opt = fitc->add_option("--method", fit_method, "Fit one method class only");
  auto* pooled_opt = fitc->add_flag("--pooled", pooled, "Fit all methods together");
  method_opt->excludes(pooled_opt);
  fitc->add_option("--init-grid", init_grid_path, "JSON object of initial values per coefficient");
  fitc->add_option("--threads", threads, "Worker threads (0: all cores)")->check(CLI::NonNegativeNumber);
  fitc->add_option("--max-iter", max_iter, "Optimizer iteration cap")->check(CLI::PositiveNumber);
  fitc->add_option("--out", out_path, "Write the fit report here");

  // predict
  std::string params_path;
  double n = 0.0, d = 0.0, s = 1.0;
  auto* pred = app.add_subcommand("predict", "Predict loss from fitted coefficients");
  pred->add_option("--params", params_path, "Fit report or params JSON")->required();
  pred->add_option("--n", n, "Non-embedding parameters N")->required();
  pred->add_option("--d", d, "Training tokens D")->required();
  pred->add_option("--s", s, "Trainable fraction S")->check(CLI::Range(0.0, 1.0));

  // isoflop / frontier
  double tolerance = 0.05;
  std::vector<double> budgets;
  std::string iso_method;
  auto* iso = app.add_subcommand("isoflop", "IsoFLOP profile for one method");
  runs_in.attach(iso);
  iso->add_option("--method", iso_method, "full | freeze | lora | bias")->required();
  iso->add_option("--tolerance", tolerance, "Relative budget grouping tolerance")->check(CLI::NonNegativeNumber);
  iso->add_option("--budgets", budgets, "Nominal budgets (default: clustered from the data)")->delimiter(',');
  iso->add_option("--out", out_path, "Write the profile here");

  auto* front = app.add_subcommand("frontier", "Per-method frontier lines and crossovers");
  runs_in.attach(front);
  front->add_option("--tolerance", tolerance, "Relative budget grouping tolerance")->check(CLI::NonNegativeNumber);
  front->add_option("--budgets", budgets, "Nominal budgets (default: clustered from the data)")->delimiter(',');
  front->add_option("--out", out_path, "Write the frontier here");

  // plan
  std::string artifacts_path, mode = "recipe", save_artifacts;
  auto* planc = app.add_subcommand("plan", "Training plan for a FLOP budget");
  planc->add_option("--budget", budget, "FLOP budget C")->required();
  auto* art_opt = planc->add_option("--artifacts", artifacts_path, "Planner artifacts JSON (default: built-in constants)");
  auto* plan_runs = planc->add_option("--runs", runs_in.path, "Derive artifacts from this run log");
  art_opt->excludes(plan_runs);
  planc->add_option("--tolerance", tolerance, "Budget grouping tolerance when deriving artifacts")->check(CLI::NonNegativeNumber);
  planc->add_option("--mode", mode, "recipe, or freeze for the block-freezing alternative")
      ->check(CLI::IsMember({"recipe", "freeze"}));
  planc->add_option("--save-artifacts", save_artifacts, "Also write the artifacts used");
  planc->add_option("--out", out_path, "Write the plan here");

  // corr
  auto* corr = app.add_subcommand("corr", "Spearman correlation between final loss and downstream score");
  runs_in.attach(corr);

  // synth
  std::string truth_path, models_text;
  std::vector<std::string> method_tokens;
  double sigma = 0.0;
  std::uint64_t seed = 0;
  ParamCount batch = 1024, ctx = 75;
  auto* syn = app.add_subcommand("synth", "Generate synthetic run logs from a known loss formula");
  syn->add_option("--truth", truth_path, "Params JSON with formula and coefficients")->required();
  syn->add_option("--sigma", sigma, "Log-space noise standard deviation")->check(CLI::NonNegativeNumber);
  syn->add_option("--seed", seed, "Random seed");
  syn->add_option("--budgets", budgets, "FLOP budgets (default: six log-spaced from 1.5e15)")->delimiter(',');
  syn->add_option("--models", models_text, "Comma-separated registry names (default: Pythia suite)");
  syn->add_option("--methods", method_tokens, "Method sweep, e.g. full,freeze:1/3,lora:32")->delimiter(',');
  syn->add_option("--batch-size", batch, "Recorded batch size")->check(CLI::PositiveNumber);
  syn->add_option("--context-len", ctx, "Recorded context length")->check(CLI::PositiveNumber);
  syn->add_option("--out", out_path, "JSON-lines output (default: stdout)");

  // Unknown flags are caught before parsing so that they are reported, with
  // a suggestion, ahead of any missing required option.
  const CLI::App* chosen = &app;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (chosen == &app && a.rfind("-", 0) != 0) {
      if (auto* sc = app.get_subcommand_no_throw(a)) chosen = sc;
      continue;
    }
    if (a.rfind("--", 0) != 0 || a == "--") continue;
    const std::string flag = a.substr(0, a.find('='));
    const auto names = long_names(chosen);
    if (std::find(names.begin(), names.end(), flag) != names.end()) continue;
    err << "error: unknown option '" << flag << "'";
    if (chosen != &app) err << " for '" << chosen->get_name() << "'";
    err << '\n';
    if (auto hint = suggest(flag, names)) err << "did you mean '" << *hint << "'?\n";
    err << "run 'embscale --help' for usage\n";
    return 2;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    err << "run 'embscale --help' for usage\n";
    return 2;
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();

    if (name == "flops" || name == "tokens") {
      const auto arch = resolve_arch(arch_name, g.registry());
      const auto method = parse_method(method_text);
      const auto c = param_counts(arch, method);
      ojson j;
      j["arch"] = arch.name;
      j["method"] = to_string(method);
      if (name == "flops") {
        if (!(tokens >= 0.0)) throw ValidationError("--tokens must be >= 0");
        j["tokens"] = tokens;
        j["flop"] = flop_cost(c, tokens);
      } else {
        j["budget"] = budget;
        j["tokens"] = tokens_for_budget(c, budget);
      }
      const auto counts = counts_json(c);
      for (const auto& [k, v] : counts.items()) j[k] = v;
      out << render(j, object_table(j), g.fmt());
      return 0;
    }

    if (name == "ingest") {
      const auto set = runs_in.load(g, err);
      ojson summary;
      summary["records"] = set.records.size();
      summary["rejected"] = set.rejected.size();
      summary["warnings"] = set.warnings.size();
      summary["source_digest"] = set.source_digest;
      summary["schema_version"] = set.schema_version;
      if (out_path.empty()) {
        write_runs_jsonl(set, out);
      } else {
        save_runs(set, out_path);
        out << render(summary, object_table(summary), g.fmt());
      }
      return 0;
    }

    if (name == "fit") {
      const auto set = runs_in.load(g, err);
      FitConfig cfg;
      cfg.huber_delta = delta;
      cfg.split = holdout == "none" ? SplitMode::none : SplitMode::largest_model_holdout;
      cfg.residual_space = residual == "linear" ? ResidualSpace::linear : ResidualSpace::log;
      cfg.threads = threads;
      cfg.max_iterations = max_iter;
      if (!init_grid_path.empty()) {
        const auto grid = read_json_file(init_grid_path);
        if (!grid.is_object()) throw ValidationError("init grid must be a JSON object");
        for (const auto& [k, v] : grid.items()) cfg.init_grid[k] = v.get<std::vector<double>>();
      }
      const Formula f = parse_formula(formula);
      std::map<MethodKind, std::vector<RunRecord>> by_kind;
      for (const auto& r : set.records) by_kind[r.kind()].push_back(r);

      auto fit_one = [&](const std::vector<RunRecord>& recs, const std::string& label) {
        auto rep = fit(recs, f, cfg);
        rep.method = label;
        auto j = report_to_json(rep);
        j["source_digest"] = set.source_digest;
        return j;
      };
      ojson result;
      if (pooled) {
        result = fit_one(set.records, "pooled");
      } else if (!fit_method.empty()) {
        const auto k = parse_method_kind(fit_method);
        if (!by_kind.count(k)) throw InsufficientDataError("no runs for method '" + fit_method + "'");
        result = fit_one(by_kind.at(k), to_string(k));
      } else if (by_kind.size() == 1) {
        result = fit_one(by_kind.begin()->second, to_string(by_kind.begin()->first));
      } else {
        ojson per = ojson::object();
        for (const auto& [k, recs] : by_kind) per[to_string(k)] = fit_one(recs, to_string(k));
        result["per_method"] = per;
      }
      Table t;
      t.headers = {"method", "formula", "coefficient", "value"};
      auto add_rows = [&](const ojson& rep) {
        for (const auto& [c, v] : rep.at("coefficients").items()) {
          t.rows.push_back({rep.at("method").get<std::string>(), rep.at("formula").get<std::string>(), c, cell(v)});
        }
      };
      if (result.contains("per_method")) {
        for (const auto& [k, rep] : result.at("per_method").items()) add_rows(rep);
      } else {
        add_rows(result);
      }
      emit(render(result, t, g.fmt()), out_path, out, err);
      return 0;
    }

    if (name == "predict") {
      const auto doc = read_json_file(params_path);
      ScalingParams p;
      if (doc.contains("per_method")) {
        throw ValidationError("'" + params_path + "' holds per-method fits; refit with --method or --pooled");
      }
      p = scaling_params_from_json(doc);
      ojson j;
      j["formula"] = to_string(formula_of(p));
      j["n"] = n;
      j["d"] = d;
      j["s"] = s;
      j["loss"] = predict(p, s, n, d);
      out << render(j, object_table(j), g.fmt());
      return 0;
    }

    if (name == "isoflop") {
      const auto set = runs_in.load(g, err);
      const auto kind = parse_method_kind(iso_method);
      const auto all = build_all_profiles(set.records, profile_options(tolerance, budgets));
      IsoflopProfile prof;
      prof.method = kind;
      prof.grouping_tolerance = tolerance;
      if (auto it = all.find(kind); it != all.end()) prof = it->second;
      for (const auto& w : prof.warnings) err << "warning: " << w << '\n';
      auto j = profile_to_json(prof);
      j["argmins"] = argmins_to_json(best_per_budget(prof));
      j["size_fit"] = nullptr;
      try {
        j["size_fit"] = power_law_to_json(optimal_size_fit(prof).fit);
      } catch (const InsufficientDataError& e) {
        err << "note: " << e.what() << '\n';
      }
      std::string text;
      if (g.fmt("csv") == "csv") {
        text = profile_to_csv(prof);
      } else {
        Table t;
        t.headers = {"budget", "size", "loss", "hyper"};
        for (const auto& pt : prof.points) {
          t.rows.push_back({format_real(pt.budget), std::to_string(pt.size), format_real(pt.loss),
                            pt.hyper ? std::to_string(*pt.hyper) : std::string()});
        }
        text = render(j, t, g.fmt("csv"));
      }
      emit(text, out_path, out, err);
      return 0;
    }

    if (name == "frontier") {
      const auto set = runs_in.load(g, err);
      std::vector<IsoflopProfile> list;
      for (auto& [k, p] : build_all_profiles(set.records, profile_options(tolerance, budgets))) {
        for (const auto& w : p.warnings) err << "warning: " << w << '\n';
        list.push_back(std::move(p));
      }
      const auto f = frontier(list);
      for (const auto& w : f.warnings) err << "warning: " << w << '\n';
      Table t;
      t.headers = {"method", "slope", "intercept", "r2"};
      for (const auto& [k, m] : f.methods) {
        t.rows.push_back({to_string(k), format_real(m.fit.slope), format_real(m.fit.intercept), format_real(m.fit.r_squared)});
      }
      emit(render(frontier_to_json(f), t, g.fmt()), out_path, out, err);
      return 0;
    }

    if (name == "plan") {
      PlannerArtifacts a;
      if (!artifacts_path.empty()) {
        a = artifacts_from_json(read_json_file(artifacts_path));
      } else if (!runs_in.path.empty()) {
        const auto set = runs_in.load(g, err);
        a = artifacts_from_runs(set.records, g.planning_registry(), profile_options(tolerance, {}));
      } else {
        a = default_artifacts();
        if (!g.registry_path.empty()) a.registry = g.planning_registry();
      }
      if (!save_artifacts.empty()) {
        write_file(save_artifacts, artifacts_to_json(a).dump(2) + "\n");
        err << "wrote " << save_artifacts << '\n';
      }
      const Plan p = mode == "freeze" ? plan_freeze(budget, a) : plan(budget, a);
      for (const auto& fl : p.flags) err << "flag: " << fl << '\n';
      const auto j = plan_to_json(p);
      emit(render(j, object_table(j), g.fmt()), out_path, out, err);
      return 0;
    }

    if (name == "corr") {
      const auto set = runs_in.load(g, err);
      ojson j;
      j["spearman"] = spearman_loss_vs_score(set);
      std::size_t scored = 0;
      for (const auto& r : set.records) scored += r.mteb_score ? 1 : 0;
      j["n"] = scored;
      j["source_digest"] = set.source_digest;
      out << render(j, object_table(j), g.fmt());
      return 0;
    }

    if (name == "synth") {
      SynthSpec spec;
      spec.truth = scaling_params_from_json(read_json_file(truth_path));
      spec.noise_sigma = sigma;
      spec.seed = seed;
      spec.batch_size = batch;
      spec.context_len = ctx;
      spec.budgets = budgets.empty() ? reference_budgets() : budgets;
      if (models_text.empty()) {
        spec.models = g.registry_path.empty() ? pythia_registry() : g.planning_registry();
      } else {
        const auto reg = g.registry();
        std::stringstream ss(models_text);
        for (std::string m; std::getline(ss, m, ',');) spec.models.push_back(resolve_arch(m, reg));
      }
      spec.methods = parse_sweeps(method_tokens.empty()
                                      ? std::vector<std::string>{"full", "freeze:1/3", "freeze:2/3", "lora:8", "lora:32", "lora:128"}
                                      : method_tokens);
      const auto res = generate(spec);
      for (const auto& w : res.runs.warnings) err << "warning: " << w.message << '\n';
      if (out_path.empty()) {
        write_runs_jsonl(res.runs, out);
      } else {
        save_runs(res.runs, out_path);
        out << render(res.provenance, object_table(res.provenance), g.fmt());
      }
      return 0;
    }
    throw UsageError("unknown subcommand '" + name + "'");
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace embscale
