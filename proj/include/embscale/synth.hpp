#pragma once

// Synthetic run logs drawn from a known loss formula over an experiment grid.
//
// Noise is keyed by cell index rather than draw order: cell i draws from a
// SplitMix64 stream seeded with (seed, i) and turns two uniforms into one
// standard normal with the Box-Muller transform. The same seed therefore gives
// the same records on any platform and under any evaluation order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "embscale/costmodel.hpp"
#include "embscale/digest.hpp"
#include "embscale/registry.hpp"
#include "embscale/runs.hpp"
#include "embscale/scalinglaw.hpp"

namespace embscale {

inline constexpr const char* kSynthGenerator = "splitmix64/box-muller";

// One method with its hyperparameter sweep. For LoRA, values are ranks. For
// block freezing, a value below 1 or written as a fraction is the frozen share
// of blocks; an integer value is an absolute block count.
struct MethodSweep {
  MethodKind kind = MethodKind::full;
  std::vector<double> values;
  std::vector<bool> is_fraction;  // parallel to values, freeze only
};

struct SynthSpec {
  ScalingParams truth = ModifiedParams{};
  std::vector<double> budgets;
  std::vector<ModelArch> models;
  std::vector<MethodSweep> methods;
  double noise_sigma = 0.0;
  std::uint64_t seed = 0;
  ParamCount batch_size = 1024;
  ParamCount context_len = 75;
};

struct SynthResult {
  RunSet runs;
  std::vector<double> true_loss;  // noiseless loss per record
  nlohmann::ordered_json provenance;
};

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Standard normal for grid cell `index` under `seed`.
inline double cell_normal(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t state = seed;
  state = splitmix64(state) ^ index;
  const std::uint64_t a = splitmix64(state);
  const std::uint64_t b = splitmix64(state);
  const double u1 = (static_cast<double>(a >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
  const double u2 = static_cast<double>(b >> 11) * 0x1.0p-53;          // [0, 1)
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// "full", "bias", "lora:8", "freeze:3", "freeze:1/3", "freeze:0.5".
inline MethodSweep parse_sweep_token(const std::string& tok) {
  const auto colon = tok.find(':');
  const std::string head = tok.substr(0, colon);
  MethodSweep m;
  m.kind = parse_method_kind(head);
  if (colon == std::string::npos) {
    if (m.kind == MethodKind::lora || m.kind == MethodKind::freeze) {
      throw ValidationError("method '" + head + "' needs a value, e.g. " + head + ":8");
    }
    return m;
  }
  if (m.kind == MethodKind::full || m.kind == MethodKind::bias) {
    throw ValidationError("method '" + head + "' takes no value");
  }
  const std::string v = tok.substr(colon + 1);
  double value = 0.0;
  bool fraction = false;
  try {
    std::size_t used = 0;
    if (const auto slash = v.find('/'); slash != std::string::npos) {
      const double num = std::stod(v.substr(0, slash), &used);
      const double den = std::stod(v.substr(slash + 1));
      if (den == 0.0) throw ValidationError("zero denominator");
      value = num / den;
      fraction = true;
    } else {
      value = std::stod(v, &used);
      if (used != v.size()) throw ValidationError("trailing characters");
      fraction = v.find('.') != std::string::npos;
    }
  } catch (const std::exception&) {
    throw ValidationError("bad sweep value in '" + tok + "'");
  }
  if (m.kind == MethodKind::lora && (fraction || value < 1.0 || value != std::floor(value))) {
    throw ValidationError("LoRA rank must be a positive integer in '" + tok + "'");
  }
  if (m.kind == MethodKind::freeze && (value < 0.0 || (fraction && value >= 1.0))) {
    throw ValidationError("frozen share must lie in [0, 1) in '" + tok + "'");
  }
  m.values.push_back(value);
  m.is_fraction.push_back(fraction);
  return m;
}

// Merges tokens of the same kind into one sweep, keeping first-seen order.
inline std::vector<MethodSweep> parse_sweeps(const std::vector<std::string>& tokens) {
  std::vector<MethodSweep> out;
  for (const auto& t : tokens) {
    auto s = parse_sweep_token(t);
    auto it = std::find_if(out.begin(), out.end(), [&](const MethodSweep& m) { return m.kind == s.kind; });
    if (it == out.end()) {
      out.push_back(std::move(s));
    } else {
      it->values.insert(it->values.end(), s.values.begin(), s.values.end());
      it->is_fraction.insert(it->is_fraction.end(), s.is_fraction.begin(), s.is_fraction.end());
    }
  }
  return out;
}

inline std::vector<std::string> sweep_tokens(const std::vector<MethodSweep>& sweeps) {
  std::vector<std::string> out;
  for (const auto& s : sweeps) {
    if (s.values.empty()) {
      out.emplace_back(to_string(s.kind));
      continue;
    }
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      nlohmann::json v = s.values[i];
      std::string text = s.is_fraction.size() > i && s.is_fraction[i] ? v.dump()
                                                                      : std::to_string(static_cast<long long>(s.values[i]));
      if (s.is_fraction.size() > i && s.is_fraction[i] && text.find('.') == std::string::npos) text += ".0";
      out.push_back(std::string(to_string(s.kind)) + ":" + text);
    }
  }
  return out;
}

// Concrete methods a sweep yields on one architecture. Frozen shares become
// k = round(share * n_layers); values that land outside [0, n_layers) or
// repeat an earlier k are dropped and reported through `skipped`.
inline std::vector<FineTuneMethod> expand_sweep(const MethodSweep& s, const ModelArch& a,
                                                std::vector<std::string>* skipped = nullptr) {
  std::vector<FineTuneMethod> out;
  switch (s.kind) {
    case MethodKind::full:
      out.emplace_back(FullFineTune{});
      break;
    case MethodKind::bias:
      out.emplace_back(BiasOnly{});
      break;
    case MethodKind::lora:
      for (double r : s.values) out.emplace_back(LoRA{static_cast<ParamCount>(r)});
      break;
    case MethodKind::freeze: {
      std::set<ParamCount> seen;
      for (std::size_t i = 0; i < s.values.size(); ++i) {
        const bool frac = i < s.is_fraction.size() ? s.is_fraction[i] : s.values[i] < 1.0;
        const auto k = frac ? static_cast<ParamCount>(std::llround(s.values[i] * static_cast<double>(a.n_layers)))
                            : static_cast<ParamCount>(s.values[i]);
        if (k < 0 || k >= a.n_layers || !seen.insert(k).second) {
          if (skipped) skipped->push_back(a.name + " freeze:" + std::to_string(k));
          continue;
        }
        out.emplace_back(BlockFreeze{k});
      }
      break;
    }
  }
  return out;
}

inline void validate(const SynthSpec& s) {
  if (!(s.noise_sigma >= 0.0) || !std::isfinite(s.noise_sigma)) throw ValidationError("noise_sigma must be >= 0");
  if (s.budgets.empty() || s.models.empty() || s.methods.empty()) throw ValidationError("synth grid is empty");
  for (double b : s.budgets) {
    if (!(b > 0.0) || !std::isfinite(b)) throw ValidationError("synth budgets must be positive");
  }
  if (s.batch_size < 1 || s.context_len < 1) throw ValidationError("batch_size and context_len must be >= 1");
}

inline nlohmann::ordered_json synth_spec_to_json(const SynthSpec& s) {
  nlohmann::ordered_json j;
  j["generator"] = kSynthGenerator;
  j["seed"] = s.seed;
  j["noise_sigma"] = s.noise_sigma;
  j["formula"] = to_string(formula_of(s.truth));
  j["truth"] = params_to_json(s.truth);
  j["budgets"] = s.budgets;
  nlohmann::ordered_json models = nlohmann::ordered_json::array();
  for (const auto& m : s.models) models.push_back(m.name);
  j["models"] = models;
  j["methods"] = sweep_tokens(s.methods);
  j["batch_size"] = s.batch_size;
  j["context_len"] = s.context_len;
  return j;
}

// Cells are enumerated budget-major, then model, then method variant; the
// index of each cell keys its noise draw.
inline SynthResult generate(const SynthSpec& spec) {
  validate(spec);
  SynthResult out;
  const auto spec_json = synth_spec_to_json(spec);
  out.runs.source_digest = digest_hex(spec_json.dump());
  const double tokens_per_step = static_cast<double>(spec.batch_size) * static_cast<double>(spec.context_len);

  std::uint64_t cell = 0;
  std::size_t skipped_cells = 0;
  for (double budget : spec.budgets) {
    for (const auto& arch : spec.models) {
      for (const auto& sweep : spec.methods) {
        std::vector<std::string> dropped;
        const auto variants = expand_sweep(sweep, arch, &dropped);
        if (budget == spec.budgets.front()) {
          for (const auto& d : dropped) out.runs.warnings.push_back({0, "variant skipped: " + d});
        }
        for (const auto& method : variants) {
          const std::uint64_t index = cell++;
          const auto counts = param_counts(arch, method);
          const double tokens = tokens_for_budget(counts, budget);
          const double s = counts.trainable_fraction;
          const double n = static_cast<double>(counts.n_nonembed);
          double truth = 0.0;
          try {
            truth = predict(spec.truth, s, n, tokens);
          } catch (const DomainError& e) {
            ++skipped_cells;
            out.runs.warnings.push_back({0, "cell " + std::to_string(index) + " skipped: " + e.what()});
            continue;
          }
          if (!(truth > 0.0) || !std::isfinite(truth)) {
            ++skipped_cells;
            out.runs.warnings.push_back({0, "cell " + std::to_string(index) + " skipped: non-positive loss"});
            continue;
          }
          const double noise = spec.noise_sigma > 0.0 ? spec.noise_sigma * cell_normal(spec.seed, index) : 0.0;
          RunRecord r;
          r.model_name = arch.name;
          r.n_total = counts.n_total;
          r.n_nonembed = counts.n_nonembed;
          r.method = method;
          r.trainable_fraction = s;
          r.tokens = tokens;
          r.steps = static_cast<ParamCount>(std::llround(tokens / tokens_per_step));
          r.batch_size = spec.batch_size;
          r.context_len = spec.context_len;
          r.flop = flop_cost(counts, tokens);
          r.final_loss = noise == 0.0 ? truth : truth * std::exp(noise);
          r.data_measure = DataMeasure::tokens;
          r.flop_verified = true;
          out.runs.records.push_back(std::move(r));
          out.true_loss.push_back(truth);
        }
      }
    }
  }
  if (out.runs.records.empty()) throw InsufficientDataError("synth grid produced no valid cells");
  out.provenance = spec_json;
  out.provenance["records"] = out.runs.records.size();
  out.provenance["skipped_cells"] = skipped_cells;
  out.provenance["spec_digest"] = out.runs.source_digest;
  return out;
}

}  // namespace embscale
