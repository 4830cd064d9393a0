#pragma once

#include <random>
#include <string>

#include "embscale/recipe.hpp"
#include "embscale/registry.hpp"
#include "embscale/synth.hpp"

namespace fixtures {

inline embscale::ModifiedParams modified_truth() {
  return embscale::ModifiedParams{0.2, -5.0, 250.0, 0.3, 30.0, 1.5, 20.0, 0.25};
}

inline embscale::ChinchillaParams chinchilla_truth() { return embscale::ChinchillaParams{0.4, 60.0, 45.0, 0.28, 0.22}; }

// 5 budgets x 8 Pythia sizes x 5 method variants = 200 cells.
inline embscale::SynthSpec recovery_spec(double sigma, std::uint64_t seed = 7) {
  embscale::SynthSpec s;
  s.truth = modified_truth();
  s.budgets = {6e15, 2.4e16, 9.6e16, 3.8e17, 1.5e18};
  s.models = embscale::pythia_registry();
  s.methods = embscale::parse_sweeps({"full", "freeze:1/3", "freeze:2/3", "lora:8", "lora:128"});
  s.noise_sigma = sigma;
  s.seed = seed;
  return s;
}

// Under this truth full fine-tuning wins the three smallest budgets and LoRA
// the three largest, while the best size grows from 1B to 2.8B.
inline embscale::ModifiedParams switching_truth() {
  return embscale::ModifiedParams{0.2, -6.0, 250.0, 0.25, 6.0, 1.0, 40.0, 0.3};
}

inline embscale::SynthSpec switching_spec() {
  embscale::SynthSpec s;
  s.truth = switching_truth();
  s.budgets = embscale::reference_budgets();
  s.models = embscale::pythia_registry();
  s.methods = embscale::parse_sweeps({"full", "lora:8", "lora:32", "lora:128", "lora:512"});
  return s;
}

// Valid architecture with every layout switch drawn at random.
inline embscale::ModelArch random_arch(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> layers(1, 40), heads_pow(0, 5), head_dim(1, 96), ff_mult(1, 6),
      vocab(1, 70000), coin(0, 1), kv_pow(0, 3);
  embscale::ModelArch a;
  a.name = "random";
  a.n_layers = layers(rng);
  a.n_heads = 1 << heads_pow(rng);
  a.d_model = a.n_heads * head_dim(rng);
  a.d_ff = a.d_model * ff_mult(rng) + coin(rng);
  a.vocab_size = vocab(rng);
  a.max_seq_len = 128 << coin(rng);
  a.tie_embeddings = coin(rng) == 1;
  a.fused_qkv = coin(rng) == 1;
  a.gated_mlp = coin(rng) == 1;
  a.linear_bias = coin(rng) == 1;
  a.norm_bias = coin(rng) == 1;
  a.learned_positions = coin(rng) == 1;
  const embscale::ParamCount kv = embscale::ParamCount{1} << kv_pow(rng);
  a.n_kv_heads = a.n_heads % kv == 0 ? kv : 0;
  return a;
}

inline embscale::RunRecord run(const std::string& model, embscale::ParamCount size, embscale::FineTuneMethod method,
                               double flop, double loss) {
  embscale::RunRecord r;
  r.model_name = model;
  r.n_nonembed = size;
  r.n_total = size;
  r.method = method;
  r.flop = flop;
  r.tokens = flop / (6.0 * static_cast<double>(size));
  r.final_loss = loss;
  return r;
}

}  // namespace fixtures
