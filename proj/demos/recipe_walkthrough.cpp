// Plans with the published constants, then with artifacts fitted to a
// noiseless synthetic run grid, and prints both side by side.

#include <cstdio>

#include "embscale/recipe.hpp"
#include "embscale/synth.hpp"

using namespace embscale;

int main() {
  SynthSpec spec;
  spec.truth = ModifiedParams{0.2, -6.0, 250.0, 0.25, 6.0, 1.0, 40.0, 0.3};
  spec.budgets = reference_budgets();
  spec.models = pythia_registry();
  spec.methods = parse_sweeps({"full", "lora:8", "lora:32", "lora:128", "lora:512"});
  const auto runs = generate(spec);

  const auto published = default_artifacts();
  const auto fitted = artifacts_from_runs(runs.runs.records, pythia_registry());
  std::printf("fitted threshold %.3g FLOP (published %.3g)\n\n", fitted.method_threshold, published.method_threshold);

  std::printf("%-10s  %-24s  %-24s\n", "budget", "published", "fitted");
  for (double c : {1e15, 6e15, 3e16, 9.06e16, 2e17, 1.5e18, 1e19}) {
    const auto a = plan(c, published);
    const auto b = plan(c, fitted);
    char left[64], right[64];
    std::snprintf(left, sizeof(left), "%s %s", a.model.name.c_str(), to_string(a.method).c_str());
    std::snprintf(right, sizeof(right), "%s %s", b.model.name.c_str(), to_string(b.method).c_str());
    std::printf("%-10.3g  %-24s  %-24s\n", c, left, right);
  }
}
