#pragma once

// Parameter accounting for decoder-only transformers under the four
// fine-tuning methods, and the per-token FLOP cost
//
//   C = 2 N_F D + 2 N_B D + 2 N_U D
//
// where N_F, N_B and N_U count non-token-embedding parameters used in the
// forward pass, back-propagated through, and updated, respectively.

#include <algorithm>
#include <cmath>
#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "embscale/error.hpp"

namespace embscale {

using ParamCount = std::int64_t;

struct ModelArch {
  std::string name;
  ParamCount n_layers = 0;
  ParamCount d_model = 0;
  ParamCount d_ff = 0;
  ParamCount n_heads = 0;
  ParamCount vocab_size = 0;
  ParamCount max_seq_len = 0;
  bool tie_embeddings = false;

  // Layout options. Defaults describe a GPT-NeoX block (fused biased QKV,
  // biased dense layers, LayerNorm with bias, rotary positions).
  ParamCount n_kv_heads = 0;  // 0 means n_heads
  bool fused_qkv = true;
  bool gated_mlp = false;
  bool linear_bias = true;
  bool norm_bias = true;
  bool learned_positions = false;

  ParamCount head_dim() const { return d_model / n_heads; }
  ParamCount kv_heads() const { return n_kv_heads == 0 ? n_heads : n_kv_heads; }
  ParamCount kv_dim() const { return kv_heads() * head_dim(); }
};

inline void validate(const ModelArch& a) {
  auto require = [&](bool ok, const char* field, const char* rule) {
    if (!ok) {
      throw ValidationError("invalid architecture '" + a.name + "': " + field + " " + rule);
    }
  };
  require(a.n_layers >= 1, "n_layers", "must be >= 1");
  require(a.d_model >= 1, "d_model", "must be >= 1");
  require(a.d_ff >= 1, "d_ff", "must be >= 1");
  require(a.n_heads >= 1, "n_heads", "must be >= 1");
  require(a.vocab_size >= 1, "vocab_size", "must be >= 1");
  require(a.max_seq_len >= 0, "max_seq_len", "must be >= 0");
  require(a.d_model % a.n_heads == 0, "n_heads", "must divide d_model");
  require(a.n_kv_heads >= 0, "n_kv_heads", "must be >= 0");
  require(a.kv_heads() <= a.n_heads && a.n_heads % a.kv_heads() == 0, "n_kv_heads",
          "must divide n_heads");
}

// Dense (matrix) layers a LoRA adapter can attach to.
enum class DenseRole : unsigned {
  attn_qkv = 1u << 0,
  attn_q = 1u << 1,
  attn_k = 1u << 2,
  attn_v = 1u << 3,
  attn_out = 1u << 4,
  mlp_in = 1u << 5,
  mlp_gate = 1u << 6,
  mlp_out = 1u << 7,
};

class DenseRoleSet {
 public:
  constexpr DenseRoleSet() = default;
  static constexpr DenseRoleSet all() { return DenseRoleSet(0xffu); }
  static constexpr DenseRoleSet none() { return DenseRoleSet(0u); }

  constexpr DenseRoleSet& add(DenseRole r) {
    bits_ |= static_cast<unsigned>(r);
    return *this;
  }
  constexpr bool contains(DenseRole r) const { return (bits_ & static_cast<unsigned>(r)) != 0; }
  constexpr bool empty() const { return bits_ == 0; }
  constexpr unsigned bits() const { return bits_; }
  constexpr bool operator==(const DenseRoleSet&) const = default;

 private:
  constexpr explicit DenseRoleSet(unsigned b) : bits_(b) {}
  unsigned bits_ = 0;
};

inline const char* to_string(DenseRole r) {
  switch (r) {
    case DenseRole::attn_qkv: return "attn_qkv";
    case DenseRole::attn_q: return "attn_q";
    case DenseRole::attn_k: return "attn_k";
    case DenseRole::attn_v: return "attn_v";
    case DenseRole::attn_out: return "attn_out";
    case DenseRole::mlp_in: return "mlp_in";
    case DenseRole::mlp_gate: return "mlp_gate";
    case DenseRole::mlp_out: return "mlp_out";
  }
  return "?";
}

inline constexpr DenseRole kAllDenseRoles[] = {
    DenseRole::attn_qkv, DenseRole::attn_q,  DenseRole::attn_k,   DenseRole::attn_v,
    DenseRole::attn_out, DenseRole::mlp_in,  DenseRole::mlp_gate, DenseRole::mlp_out,
};

struct FullFineTune {
  bool operator==(const FullFineTune&) const = default;
};

// Token embeddings and the first `frozen_blocks` blocks stay fixed.
struct BlockFreeze {
  ParamCount frozen_blocks = 0;
  bool operator==(const BlockFreeze&) const = default;
};

struct LoRA {
  ParamCount rank = 0;
  DenseRoleSet targets = DenseRoleSet::all();
  bool operator==(const LoRA&) const = default;
};

struct BiasOnly {
  bool operator==(const BiasOnly&) const = default;
};

using FineTuneMethod = std::variant<FullFineTune, BlockFreeze, LoRA, BiasOnly>;

enum class MethodKind { full, freeze, lora, bias };

inline MethodKind kind_of(const FineTuneMethod& m) {
  return static_cast<MethodKind>(m.index());
}

inline const char* to_string(MethodKind k) {
  switch (k) {
    case MethodKind::full: return "full";
    case MethodKind::freeze: return "freeze";
    case MethodKind::lora: return "lora";
    case MethodKind::bias: return "bias";
  }
  return "?";
}

inline MethodKind parse_method_kind(const std::string& s) {
  if (s == "full") return MethodKind::full;
  if (s == "freeze") return MethodKind::freeze;
  if (s == "lora") return MethodKind::lora;
  if (s == "bias") return MethodKind::bias;
  throw ValidationError("unknown fine-tuning method '" + s + "'");
}

// The method's tunable hyperparameter (frozen blocks or rank), 0 for the others.
inline ParamCount method_hyper(const FineTuneMethod& m) {
  if (auto* f = std::get_if<BlockFreeze>(&m)) return f->frozen_blocks;
  if (auto* l = std::get_if<LoRA>(&m)) return l->rank;
  return 0;
}

struct TensorInfo {
  std::string name;
  std::vector<ParamCount> shape;
  ParamCount count = 0;
  int block = -1;  // -1 for tensors outside the transformer blocks
  bool is_bias = false;
  bool is_embedding = false;  // token/position embeddings and an untied output head
  bool is_dense = false;
  DenseRole dense_role{};
  ParamCount d_in = 0;
  ParamCount d_out = 0;
};

struct ParamCounts {
  ParamCount n_total = 0;
  ParamCount n_nonembed = 0;
  ParamCount n_forward = 0;   // N_F
  ParamCount n_backward = 0;  // N_B
  ParamCount n_updated = 0;   // N_U
  double trainable_fraction = 0.0;  // S

  bool operator==(const ParamCounts&) const = default;
};

struct ParamInventory {
  std::vector<TensorInfo> tensors;
  ParamCounts counts;  // full fine-tuning counts
};

namespace detail {

inline void push_tensor(std::vector<TensorInfo>& out, std::string name,
                        std::vector<ParamCount> shape, int block, bool is_bias,
                        bool is_embedding) {
  TensorInfo t;
  t.name = std::move(name);
  t.count = 1;
  for (ParamCount s : shape) t.count *= s;
  t.shape = std::move(shape);
  t.block = block;
  t.is_bias = is_bias;
  t.is_embedding = is_embedding;
  out.push_back(std::move(t));
}

inline void push_dense(std::vector<TensorInfo>& out, const std::string& prefix, DenseRole role,
                       ParamCount d_in, ParamCount d_out, bool bias, int block) {
  push_tensor(out, prefix + to_string(role) + ".weight", {d_out, d_in}, block, false, false);
  out.back().is_dense = true;
  out.back().dense_role = role;
  out.back().d_in = d_in;
  out.back().d_out = d_out;
  if (bias) push_tensor(out, prefix + to_string(role) + ".bias", {d_out}, block, true, false);
}

inline void push_norm(std::vector<TensorInfo>& out, const std::string& prefix, ParamCount d,
                      bool bias, int block) {
  push_tensor(out, prefix + ".weight", {d}, block, false, false);
  if (bias) push_tensor(out, prefix + ".bias", {d}, block, true, false);
}

}  // namespace detail

// Itemized parameter inventory. Counts in the result are those of full fine-tuning.
inline ParamInventory count_params(const ModelArch& a) {
  validate(a);
  ParamInventory inv;
  auto& ts = inv.tensors;
  const ParamCount d = a.d_model;

  detail::push_tensor(ts, "embed_tokens", {a.vocab_size, d}, -1, false, true);
  if (a.learned_positions) {
    detail::push_tensor(ts, "embed_positions", {a.max_seq_len, d}, -1, false, true);
  }
  for (int b = 0; b < static_cast<int>(a.n_layers); ++b) {
    const std::string p = "blocks." + std::to_string(b) + ".";
    detail::push_norm(ts, p + "ln_attn", d, a.norm_bias, b);
    if (a.fused_qkv) {
      detail::push_dense(ts, p, DenseRole::attn_qkv, d, d + 2 * a.kv_dim(), a.linear_bias, b);
    } else {
      detail::push_dense(ts, p, DenseRole::attn_q, d, d, a.linear_bias, b);
      detail::push_dense(ts, p, DenseRole::attn_k, d, a.kv_dim(), a.linear_bias, b);
      detail::push_dense(ts, p, DenseRole::attn_v, d, a.kv_dim(), a.linear_bias, b);
    }
    detail::push_dense(ts, p, DenseRole::attn_out, d, d, a.linear_bias, b);
    detail::push_norm(ts, p + "ln_mlp", d, a.norm_bias, b);
    if (a.gated_mlp) detail::push_dense(ts, p, DenseRole::mlp_gate, d, a.d_ff, a.linear_bias, b);
    detail::push_dense(ts, p, DenseRole::mlp_in, d, a.d_ff, a.linear_bias, b);
    detail::push_dense(ts, p, DenseRole::mlp_out, a.d_ff, d, a.linear_bias, b);
  }
  detail::push_norm(ts, "ln_final", d, a.norm_bias, -1);
  if (!a.tie_embeddings) {
    detail::push_tensor(ts, "lm_head", {a.vocab_size, d}, -1, false, true);
  }

  ParamCounts& c = inv.counts;
  for (const auto& t : ts) {
    c.n_total += t.count;
    if (!t.is_embedding) c.n_nonembed += t.count;
  }
  c.n_forward = c.n_backward = c.n_updated = c.n_nonembed;
  c.trainable_fraction = 1.0;
  return inv;
}

inline ParamCount lora_adapter_params(ParamCount d_in, ParamCount d_out, ParamCount rank) {
  return rank * (d_in + d_out);
}

inline void validate(const FineTuneMethod& m, const ModelArch& a) {
  if (auto* f = std::get_if<BlockFreeze>(&m)) {
    if (f->frozen_blocks < 0 || f->frozen_blocks >= a.n_layers) {
      throw ValidationError("invalid method: freeze:" + std::to_string(f->frozen_blocks) +
                            " requires 0 <= frozen_blocks < n_layers (" +
                            std::to_string(a.n_layers) + ")");
    }
  } else if (auto* l = std::get_if<LoRA>(&m)) {
    if (l->rank < 1) throw ValidationError("invalid method: LoRA rank must be >= 1");
    if (l->targets.empty()) throw ValidationError("invalid method: LoRA targets must be non-empty");
  }
}

inline ParamCounts param_counts(const ModelArch& a, const FineTuneMethod& m) {
  const ParamInventory inv = count_params(a);
  validate(m, a);
  ParamCounts c = inv.counts;
  const double nonembed = static_cast<double>(c.n_nonembed);

  std::visit(
      [&](const auto& method) {
        using T = std::decay_t<decltype(method)>;
        if constexpr (std::is_same_v<T, FullFineTune>) {
          // counts already describe full fine-tuning
        } else if constexpr (std::is_same_v<T, BlockFreeze>) {
          ParamCount active = 0;
          for (const auto& t : inv.tensors) {
            if (t.is_embedding) continue;
            if (t.block < 0 || t.block >= method.frozen_blocks) active += t.count;
          }
          c.n_backward = c.n_updated = active;
        } else if constexpr (std::is_same_v<T, LoRA>) {
          ParamCount adapters = 0;
          for (const auto& t : inv.tensors) {
            if (t.is_dense && method.targets.contains(t.dense_role)) {
              adapters += lora_adapter_params(t.d_in, t.d_out, method.rank);
            }
          }
          if (adapters == 0) {
            throw ValidationError("invalid method: no LoRA target role exists in '" + a.name + "'");
          }
          c.n_forward = c.n_backward = c.n_nonembed + adapters;
          c.n_updated = adapters;
        } else if constexpr (std::is_same_v<T, BiasOnly>) {
          ParamCount biases = 0;
          for (const auto& t : inv.tensors) {
            if (t.is_bias && !t.is_embedding) biases += t.count;
          }
          c.n_updated = biases;
        }
      },
      m);

  // Very high LoRA ranks on narrow models can exceed the backbone size.
  c.trainable_fraction = std::min(1.0, static_cast<double>(c.n_updated) / nonembed);
  return c;
}

inline double flop_cost(const ParamCounts& c, double tokens) {
  if (!(tokens >= 0.0)) throw ValidationError("tokens must be non-negative");
  return 2.0 * static_cast<double>(c.n_forward) * tokens +
         2.0 * static_cast<double>(c.n_backward) * tokens +
         2.0 * static_cast<double>(c.n_updated) * tokens;
}

inline double flop_per_token(const ParamCounts& c) {
  return 2.0 * static_cast<double>(c.n_forward) + 2.0 * static_cast<double>(c.n_backward) +
         2.0 * static_cast<double>(c.n_updated);
}

inline double tokens_for_budget(const ParamCounts& c, double budget) {
  if (!(budget > 0.0) || !std::isfinite(budget)) {
    throw ValidationError("budget must be a positive finite FLOP count");
  }
  const double per_token = flop_per_token(c);
  if (!(per_token > 0.0)) throw ValidationError("parameter counts give zero FLOP per token");
  return budget / per_token;
}

// Text encoding used by run logs: "full" | "freeze:<k>" | "lora:<rank>" | "bias".
// LoRA with a non-default target set appends ":<role>+<role>...".
inline std::string to_string(const FineTuneMethod& m) {
  switch (kind_of(m)) {
    case MethodKind::full: return "full";
    case MethodKind::bias: return "bias";
    case MethodKind::freeze:
      return "freeze:" + std::to_string(std::get<BlockFreeze>(m).frozen_blocks);
    case MethodKind::lora: {
      const auto& l = std::get<LoRA>(m);
      std::string s = "lora:" + std::to_string(l.rank);
      if (l.targets != DenseRoleSet::all()) {
        char sep = ':';
        for (DenseRole r : kAllDenseRoles) {
          if (l.targets.contains(r)) {
            s += sep;
            s += to_string(r);
            sep = '+';
          }
        }
      }
      return s;
    }
  }
  return "?";
}

namespace detail {

inline ParamCount parse_count(std::string_view s, const std::string& what) {
  ParamCount v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw ValidationError("invalid " + what + " '" + std::string(s) + "'");
  }
  return v;
}

inline DenseRole parse_dense_role(std::string_view s) {
  for (DenseRole r : kAllDenseRoles) {
    if (s == to_string(r)) return r;
  }
  throw ValidationError("unknown dense-layer role '" + std::string(s) + "'");
}

}  // namespace detail

inline FineTuneMethod parse_method(std::string_view text) {
  const auto colon = text.find(':');
  const std::string_view head = text.substr(0, colon);
  const std::string_view rest = colon == std::string_view::npos ? "" : text.substr(colon + 1);
  if (head == "full" && rest.empty()) return FullFineTune{};
  if (head == "bias" && rest.empty()) return BiasOnly{};
  if (head == "freeze" && !rest.empty()) {
    return BlockFreeze{detail::parse_count(rest, "frozen block count")};
  }
  if (head == "lora" && !rest.empty()) {
    LoRA l;
    const auto c2 = rest.find(':');
    l.rank = detail::parse_count(rest.substr(0, c2), "LoRA rank");
    if (l.rank < 1) throw ValidationError("LoRA rank must be >= 1");
    if (c2 != std::string_view::npos) {
      l.targets = DenseRoleSet::none();
      std::string_view roles = rest.substr(c2 + 1);
      while (!roles.empty()) {
        const auto plus = roles.find('+');
        l.targets.add(detail::parse_dense_role(roles.substr(0, plus)));
        roles = plus == std::string_view::npos ? "" : roles.substr(plus + 1);
      }
      if (l.targets.empty()) throw ValidationError("LoRA targets must be non-empty");
    }
    return l;
  }
  throw ValidationError("unknown method encoding '" + std::string(text) +
                        "' (expected full, freeze:<k>, lora:<rank> or bias)");
}

}  // namespace embscale
