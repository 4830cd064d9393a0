#pragma once

// Fine-tuning run records and their canonical JSON-lines encoding.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "embscale/costmodel.hpp"
#include "embscale/error.hpp"

namespace embscale {

inline constexpr int kRunSchemaVersion = 1;

enum class DataMeasure { tokens, steps };

inline const char* to_string(DataMeasure m) { return m == DataMeasure::steps ? "steps" : "tokens"; }

inline DataMeasure parse_data_measure(const std::string& s) {
  if (s == "tokens") return DataMeasure::tokens;
  if (s == "steps") return DataMeasure::steps;
  throw ValidationError("data_measure must be 'tokens' or 'steps', got '" + s + "'");
}

struct RunRecord {
  std::string model_name;
  ParamCount n_total = 0;
  ParamCount n_nonembed = 0;
  FineTuneMethod method = FullFineTune{};
  double trainable_fraction = 1.0;
  double tokens = 0.0;
  std::optional<ParamCount> steps;
  std::optional<ParamCount> batch_size;
  std::optional<ParamCount> context_len;
  double flop = 0.0;
  double final_loss = 0.0;
  std::optional<double> mteb_score;
  DataMeasure data_measure = DataMeasure::tokens;
  ParamCount replicate = 0;

  // Set on load when the FLOP value was checked against (or filled from) the
  // cost model. Not serialized; recomputed on every load.
  bool flop_verified = false;

  MethodKind kind() const { return kind_of(method); }

  // The data quantity D used by scaling-law fits.
  double data_amount() const {
    return data_measure == DataMeasure::steps && steps ? static_cast<double>(*steps) : tokens;
  }

  bool operator==(const RunRecord&) const = default;
};

struct Diagnostic {
  std::size_t line = 0;  // 1-based physical line in the source file
  std::string message;
};

struct RunSet {
  std::vector<RunRecord> records;
  std::string source_digest;
  int schema_version = kRunSchemaVersion;
  std::vector<Diagnostic> rejected;
  std::vector<Diagnostic> warnings;
};

inline nlohmann::ordered_json to_json(const RunRecord& r) {
  using nlohmann::ordered_json;
  auto opt = [](const auto& o) -> ordered_json { return o ? ordered_json(*o) : ordered_json(nullptr); };
  ordered_json j;
  j["schema_version"] = kRunSchemaVersion;
  j["model_name"] = r.model_name;
  j["n_total"] = r.n_total;
  j["n_nonembed"] = r.n_nonembed;
  j["method"] = to_string(r.method);
  j["method_hyper"] = method_hyper(r.method);
  j["trainable_fraction"] = r.trainable_fraction;
  j["tokens"] = r.tokens;
  j["steps"] = opt(r.steps);
  j["batch_size"] = opt(r.batch_size);
  j["context_len"] = opt(r.context_len);
  j["flop"] = r.flop;
  j["final_loss"] = r.final_loss;
  j["mteb_score"] = opt(r.mteb_score);
  j["data_measure"] = to_string(r.data_measure);
  j["replicate"] = r.replicate;
  return j;
}

}  // namespace embscale
