#pragma once

// Loading, validation and persistence of run logs.
//
// Input is CSV (header row required) or JSON-lines; the canonical stored form
// is JSON-lines with a schema_version on every line. Each row is validated
// independently: invalid rows are rejected with a line-numbered diagnostic,
// the rest are normalized (missing counts, trainable fraction and FLOP are
// filled from the cost model when the architecture is in the registry).

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "embscale/costmodel.hpp"
#include "embscale/digest.hpp"
#include "embscale/registry.hpp"
#include "embscale/runs.hpp"

namespace embscale {

enum class InputFormat { auto_detect, csv, jsonl };

struct SchemaOptions {
  InputFormat format = InputFormat::auto_detect;
  // Source column name -> canonical field name, applied before validation.
  std::map<std::string, std::string> column_map;
  std::vector<ModelArch> registry = default_registry();
  double flop_rel_tol = 1e-6;
};

inline const std::vector<std::string>& canonical_run_fields() {
  static const std::vector<std::string> fields = {
      "model_name", "n_total",  "n_nonembed", "method",      "method_hyper",
      "trainable_fraction",     "tokens",     "steps",       "batch_size",
      "context_len", "flop",    "final_loss", "mteb_score",  "data_measure",
      "replicate",  "schema_version"};
  return fields;
}

// Reads {"columns": {"<source>": "<canonical>", ...}} or a flat object of the same.
inline std::map<std::string, std::string> load_column_map(const std::string& path) {
  const json j = read_json_file(path);
  const json& cols = j.contains("columns") ? j.at("columns") : j;
  if (!cols.is_object()) throw ValidationError("column map must be a JSON object");
  std::map<std::string, std::string> out;
  for (const auto& [src, dst] : cols.items()) {
    if (!dst.is_string()) throw ValidationError("column map value for '" + src + "' must be a string");
    out[src] = dst.get<std::string>();
  }
  return out;
}

namespace detail {

struct RawRow {
  std::size_t line = 0;
  std::map<std::string, json> fields;  // absent or null means missing
};

struct RowError {
  std::string message;
};

inline std::optional<double> parse_real_text(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline const json* field(const RawRow& r, const std::string& key) {
  auto it = r.fields.find(key);
  if (it == r.fields.end() || it->second.is_null()) return nullptr;
  if (it->second.is_string() && it->second.get_ref<const std::string&>().empty()) return nullptr;
  return &it->second;
}

inline std::optional<std::string> get_text(const RawRow& r, const std::string& key) {
  const json* v = field(r, key);
  if (!v) return std::nullopt;
  if (v->is_string()) return v->get<std::string>();
  if (v->is_number()) return v->dump();
  throw RowError{"field '" + key + "' must be a string"};
}

inline std::optional<double> get_real(const RawRow& r, const std::string& key) {
  const json* v = field(r, key);
  if (!v) return std::nullopt;
  if (v->is_number()) return v->get<double>();
  if (v->is_string()) {
    if (auto d = parse_real_text(v->get_ref<const std::string&>())) return d;
  }
  throw RowError{"field '" + key + "' is not a number: " + v->dump()};
}

inline std::optional<ParamCount> get_count(const RawRow& r, const std::string& key) {
  const json* v = field(r, key);
  if (!v) return std::nullopt;
  if (v->is_number_integer()) {
    const auto c = v->get<ParamCount>();
    if (c < 0) throw RowError{"field '" + key + "' must be non-negative"};
    return c;
  }
  std::optional<double> d;
  if (v->is_number()) d = v->get<double>();
  if (v->is_string()) d = parse_real_text(v->get_ref<const std::string&>());
  if (!d || !std::isfinite(*d) || *d < 0.0 || std::floor(*d) != *d || *d > 9.0e18) {
    throw RowError{"field '" + key + "' must be a non-negative integer count: " + v->dump()};
  }
  return static_cast<ParamCount>(*d);
}

struct CsvRecord {
  std::vector<std::string> cells;
  std::size_t line = 0;
  std::size_t offset = 0;
};

// RFC 4180 CSV: quoted fields, doubled quotes, CRLF or LF line ends.
inline std::vector<CsvRecord> parse_csv(std::string_view text) {
  std::vector<CsvRecord> out;
  std::size_t i = 0;
  std::size_t line = 1;
  if (text.substr(0, 3) == "\xEF\xBB\xBF") i = 3;
  while (i < text.size()) {
    CsvRecord rec;
    rec.line = line;
    rec.offset = i;
    std::string cell;
    bool done = false;
    while (!done) {
      if (i < text.size() && text[i] == '"') {
        const std::size_t open = i++;
        for (;;) {
          if (i >= text.size()) throw FormatError("unterminated quoted CSV field", open);
          if (text[i] == '"') {
            if (i + 1 < text.size() && text[i + 1] == '"') {
              cell += '"';
              i += 2;
              continue;
            }
            ++i;
            break;
          }
          if (text[i] == '\n') ++line;
          cell += text[i++];
        }
        if (i < text.size() && text[i] != ',' && text[i] != '\n' && text[i] != '\r') {
          throw FormatError("unexpected character after closing quote", i);
        }
      } else {
        while (i < text.size() && text[i] != ',' && text[i] != '\n' && text[i] != '\r') {
          if (text[i] == '"') throw FormatError("stray quote inside unquoted CSV field", i);
          cell += text[i++];
        }
      }
      rec.cells.push_back(std::move(cell));
      cell.clear();
      if (i >= text.size()) {
        done = true;
      } else if (text[i] == ',') {
        ++i;
      } else {
        if (text[i] == '\r') ++i;
        if (i < text.size() && text[i] == '\n') ++i;
        ++line;
        done = true;
      }
    }
    const bool blank = rec.cells.size() == 1 && rec.cells[0].empty();
    if (!blank) out.push_back(std::move(rec));
  }
  return out;
}

inline std::string canonical_name(const std::string& col, const SchemaOptions& opt) {
  auto it = opt.column_map.find(col);
  return it == opt.column_map.end() ? col : it->second;
}

inline std::vector<RawRow> rows_from_csv(std::string_view text, const SchemaOptions& opt) {
  auto recs = parse_csv(text);
  if (recs.empty()) throw FormatError("CSV input has no header row", 0);
  std::vector<std::string> header;
  for (auto& c : recs.front().cells) {
    std::string name = c;
    while (!name.empty() && name.back() == ' ') name.pop_back();
    while (!name.empty() && name.front() == ' ') name.erase(name.begin());
    header.push_back(canonical_name(name, opt));
  }
  for (const char* required : {"model_name", "method", "final_loss"}) {
    if (std::find(header.begin(), header.end(), required) == header.end()) {
      throw FormatError(std::string("CSV header lacks required column '") + required + "'", 0);
    }
  }
  std::vector<RawRow> rows;
  for (std::size_t k = 1; k < recs.size(); ++k) {
    const auto& rec = recs[k];
    if (rec.cells.size() != header.size()) {
      throw FormatError("CSV line " + std::to_string(rec.line) + " has " +
                            std::to_string(rec.cells.size()) + " fields, header has " +
                            std::to_string(header.size()),
                        rec.offset);
    }
    RawRow row;
    row.line = rec.line;
    for (std::size_t c = 0; c < header.size(); ++c) row.fields[header[c]] = rec.cells[c];
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<RawRow> rows_from_jsonl(std::string_view text, const SchemaOptions& opt) {
  std::vector<RawRow> rows;
  std::size_t pos = 0;
  std::size_t line = 0;
  while (pos < text.size()) {
    ++line;
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view body = text.substr(pos, end - pos);
    const std::size_t start = pos;
    pos = end + 1;
    if (body.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    json j;
    try {
      j = json::parse(body);
    } catch (const json::parse_error& e) {
      const std::size_t within = e.byte > 0 ? e.byte - 1 : 0;
      throw FormatError("invalid JSON on line " + std::to_string(line) + ": " + e.what(),
                        start + std::min(within, body.size()));
    }
    if (!j.is_object()) throw FormatError("line " + std::to_string(line) + " is not a JSON object", start);
    RawRow row;
    row.line = line;
    for (auto& [k, v] : j.items()) row.fields[canonical_name(k, opt)] = v;
    rows.push_back(std::move(row));
  }
  return rows;
}

inline RunRecord normalize_row(const RawRow& row, const SchemaOptions& opt) {
  RunRecord r;
  auto name = get_text(row, "model_name");
  if (!name) throw RowError{"model_name is required"};
  r.model_name = *name;

  if (auto sv = get_count(row, "schema_version"); sv && *sv != kRunSchemaVersion) {
    throw RowError{"unsupported schema_version " + std::to_string(*sv)};
  }

  auto method_text = get_text(row, "method");
  if (!method_text) throw RowError{"method is required"};
  const auto hyper = get_count(row, "method_hyper");
  std::string encoded = *method_text;
  if ((encoded == "freeze" || encoded == "lora") && hyper) encoded += ":" + std::to_string(*hyper);
  try {
    r.method = parse_method(encoded);
  } catch (const ValidationError& e) {
    throw RowError{e.what()};
  }
  if (hyper && (r.kind() == MethodKind::freeze || r.kind() == MethodKind::lora) &&
      *hyper != method_hyper(r.method)) {
    throw RowError{"method_hyper " + std::to_string(*hyper) + " disagrees with method '" +
                   *method_text + "'"};
  }

  const ModelArch* arch = find_arch(opt.registry, r.model_name);
  std::optional<ParamCounts> counts;
  if (arch) {
    try {
      counts = param_counts(*arch, r.method);
    } catch (const ValidationError& e) {
      throw RowError{e.what()};
    }
  }

  if (auto v = get_count(row, "n_total")) {
    r.n_total = *v;
  } else if (counts) {
    r.n_total = counts->n_total;
  } else {
    throw RowError{"n_total missing and architecture '" + r.model_name + "' unknown"};
  }
  if (auto v = get_count(row, "n_nonembed")) {
    r.n_nonembed = *v;
  } else if (counts) {
    r.n_nonembed = counts->n_nonembed;
  } else {
    throw RowError{"n_nonembed missing and architecture '" + r.model_name + "' unknown"};
  }
  if (r.n_nonembed <= 0) throw RowError{"n_nonembed must be positive"};

  if (auto v = get_real(row, "trainable_fraction")) {
    r.trainable_fraction = *v;
  } else if (counts) {
    r.trainable_fraction = counts->trainable_fraction;
  } else if (r.kind() == MethodKind::full) {
    r.trainable_fraction = 1.0;
  } else {
    throw RowError{"trainable_fraction missing and architecture '" + r.model_name + "' unknown"};
  }
  if (!(r.trainable_fraction >= 0.0 && r.trainable_fraction <= 1.0)) {
    throw RowError{"trainable_fraction must lie in [0, 1]"};
  }

  r.steps = get_count(row, "steps");
  r.batch_size = get_count(row, "batch_size");
  r.context_len = get_count(row, "context_len");
  if (auto v = get_real(row, "tokens")) {
    r.tokens = *v;
  } else if (r.steps && r.batch_size && r.context_len) {
    r.tokens = static_cast<double>(*r.steps) * static_cast<double>(*r.batch_size) *
               static_cast<double>(*r.context_len);
  } else {
    throw RowError{"tokens missing and not derivable from steps * batch_size * context_len"};
  }
  if (!(r.tokens >= 0.0) || !std::isfinite(r.tokens)) throw RowError{"tokens must be non-negative"};

  if (auto v = get_text(row, "data_measure")) {
    try {
      r.data_measure = parse_data_measure(*v);
    } catch (const ValidationError& e) {
      throw RowError{e.what()};
    }
  }
  if (r.data_measure == DataMeasure::steps && !r.steps) {
    throw RowError{"data_measure is 'steps' but steps is missing"};
  }

  const auto flop = get_real(row, "flop");
  if (counts) {
    const double expected = flop_cost(*counts, r.tokens);
    if (flop) {
      if (!(*flop > 0.0) || !std::isfinite(*flop)) throw RowError{"flop must be positive"};
      if (std::abs(*flop - expected) / *flop >= opt.flop_rel_tol) {
        std::ostringstream msg;
        msg.precision(17);
        msg << "flop " << *flop << " inconsistent with cost model (expected " << expected << ")";
        throw RowError{msg.str()};
      }
      r.flop = *flop;
    } else {
      r.flop = expected;
    }
    r.flop_verified = true;
  } else {
    if (!flop) throw RowError{"flop missing and architecture '" + r.model_name + "' unknown"};
    if (!(*flop > 0.0) || !std::isfinite(*flop)) throw RowError{"flop must be positive"};
    r.flop = *flop;
  }

  const auto loss = get_real(row, "final_loss");
  if (!loss) throw RowError{"final_loss is required"};
  if (!(*loss > 0.0) || !std::isfinite(*loss)) throw RowError{"final_loss must be positive"};
  r.final_loss = *loss;

  r.mteb_score = get_real(row, "mteb_score");
  if (r.mteb_score && !(*r.mteb_score >= 0.0 && *r.mteb_score <= 1.0)) {
    throw RowError{"mteb_score must lie in [0, 1]"};
  }
  if (auto rep = get_count(row, "replicate")) r.replicate = *rep;
  return r;
}

inline InputFormat sniff_format(const std::string& path, std::string_view text) {
  auto ends_with = [&](std::string_view suf) {
    return path.size() >= suf.size() && path.compare(path.size() - suf.size(), suf.size(), suf) == 0;
  };
  if (ends_with(".csv")) return InputFormat::csv;
  if (ends_with(".jsonl") || ends_with(".ndjson") || ends_with(".json")) return InputFormat::jsonl;
  const auto first = text.find_first_not_of(" \t\r\n");
  return first != std::string_view::npos && text[first] == '{' ? InputFormat::jsonl : InputFormat::csv;
}

}  // namespace detail

// Parses and validates run-log text. `path_hint` only steers format detection.
inline RunSet parse_runs(std::string_view text, const SchemaOptions& opt = {},
                         const std::string& path_hint = "") {
  InputFormat fmt = opt.format;
  if (fmt == InputFormat::auto_detect) fmt = detail::sniff_format(path_hint, text);
  const auto rows = fmt == InputFormat::csv ? detail::rows_from_csv(text, opt)
                                            : detail::rows_from_jsonl(text, opt);
  RunSet set;
  set.source_digest = digest_hex(text);
  using Key = std::tuple<std::string, std::string, double, ParamCount>;
  std::set<Key> seen;
  for (const auto& row : rows) {
    try {
      RunRecord r = detail::normalize_row(row, opt);
      Key key{normalize_model_name(r.model_name), to_string(r.method), r.flop, r.replicate};
      if (!seen.insert(key).second) {
        throw detail::RowError{"duplicate record for (model_name, method, flop, replicate); "
                               "set a distinct replicate index to keep it"};
      }
      if (!r.flop_verified) {
        set.warnings.push_back({row.line, "flop unverified: architecture '" + r.model_name +
                                              "' not in registry"});
      }
      set.records.push_back(std::move(r));
    } catch (const detail::RowError& e) {
      set.rejected.push_back({row.line, e.message});
    }
  }
  if (set.records.empty()) {
    std::string msg = "no valid run records (" + std::to_string(rows.size()) + " rows, all rejected)";
    if (!set.rejected.empty()) {
      msg += "; first: line " + std::to_string(set.rejected.front().line) + ": " +
             set.rejected.front().message;
    }
    throw InsufficientDataError(msg);
  }
  return set;
}

inline RunSet load_runs(const std::string& path, const SchemaOptions& opt = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open run log '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_runs(ss.str(), opt, path);
}

inline void write_runs_jsonl(const RunSet& set, std::ostream& out) {
  for (const auto& r : set.records) out << to_json(r).dump() << '\n';
}

inline std::string runs_to_jsonl(const RunSet& set) {
  std::ostringstream ss;
  write_runs_jsonl(set, ss);
  return ss.str();
}

inline void save_runs(const RunSet& set, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  write_runs_jsonl(set, out);
}

inline std::string format_diagnostic(const Diagnostic& d) {
  return "line " + std::to_string(d.line) + ": " + d.message;
}

}  // namespace embscale
