#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "prpo/error.hpp"
#include "prpo/rng.hpp"
#include "prpo/text.hpp"

namespace prpo {

enum class TaskKind { kClassification, kRegression };
enum class ColumnKind { kNumeric, kCategorical };
enum class ColumnRole { kFeature, kLabel };
enum class MissingPolicy { kRejectRow, kImpute };

inline std::string_view to_string(TaskKind t) {
  return t == TaskKind::kClassification ? "classification" : "regression";
}

struct ColumnSpec {
  std::string name;
  ColumnKind kind = ColumnKind::kCategorical;
  ColumnRole role = ColumnRole::kFeature;
};

struct LabelRange {
  double min = 0.0;
  double max = 0.0;

  double width() const { return max - min; }
  friend bool operator==(const LabelRange&, const LabelRange&) = default;
};

struct TaskManifest {
  TaskKind task = TaskKind::kClassification;
  std::string question;
  std::string label_column = "label";
  std::vector<std::string> label_values;   // classification only
  std::optional<LabelRange> label_range;   // regression only
  std::string answer_format_hint;
  std::vector<std::string> feature_columns;  // empty: every non-label column
  std::map<std::string, ColumnKind> column_kinds;  // overrides inference
  MissingPolicy missing = MissingPolicy::kRejectRow;
  std::string impute_value = "unknown";
  std::vector<std::string> missing_tokens{""};
  std::string dataset_id;
};

struct Feature {
  std::string name;
  std::string value;              // as rendered into prompts
  std::optional<double> numeric;  // retained for numeric columns

  friend bool operator==(const Feature& a, const Feature& b) {
    return a.name == b.name && a.value == b.value;
  }
  friend bool operator<(const Feature& a, const Feature& b) {
    return std::tie(a.name, a.value) < std::tie(b.name, b.value);
  }
};

struct TabularExample {
  std::size_t row_id = 0;  // 0-based data row index in the source CSV
  std::vector<Feature> features;
  std::string label;
  std::optional<double> label_value;  // regression labels

  std::size_t size() const { return features.size(); }
  friend bool operator==(const TabularExample& a, const TabularExample& b) {
    return a.row_id == b.row_id && a.features == b.features && a.label == b.label;
  }
};

struct LoadedDataset {
  std::vector<TabularExample> examples;
  TaskManifest manifest;
  std::vector<ColumnSpec> columns;  // features in CSV order, then the label
  std::size_t dropped_rows = 0;
};

struct DatasetSplit {
  std::vector<TabularExample> train;
  std::vector<TabularExample> test;
  std::uint64_t seed = 0;
  bool stratified = false;
  std::optional<std::string> warning;
};

// ---------------------------------------------------------------------------
// CSV (RFC 4180): comma separated, double-quote quoting with "" escapes,
// quoted fields may span lines. Each record carries its 1-based source line.

struct CsvRecord {
  std::vector<std::string> fields;
  std::size_t line = 0;
};

inline std::vector<CsvRecord> parse_csv(std::string_view text) {
  std::vector<CsvRecord> records;
  CsvRecord current;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t line = 1;
  current.line = 1;

  const auto end_field = [&] {
    current.fields.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  const auto end_record = [&] {
    end_field();
    const bool blank = current.fields.size() == 1 && current.fields[0].empty();
    if (!blank) records.push_back(std::move(current));
    current = CsvRecord{};
  };

  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field_started && field.empty()) {
          in_quotes = true;
          field_started = true;
        } else {
          field.push_back(c);
        }
        break;
      case ',':
        end_field();
        break;
      case '\r':
        if (i + 1 < text.size() && text[i + 1] == '\n') break;
        [[fallthrough]];
      case '\n':
        end_record();
        ++line;
        current.line = line;
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (in_quotes) fail(ErrorCode::kIo, "unterminated quoted field starting before line " + std::to_string(line));
  if (!field.empty() || !current.fields.empty() || field_started) end_record();
  return records;
}

inline std::string csv_escape(std::string_view field) {
  const bool needs_quotes = field.find_first_of(",\"\r\n") != std::string_view::npos;
  if (!needs_quotes) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Manifest

inline TaskManifest manifest_from_json(const nlohmann::json& j) {
  TaskManifest m;
  try {
    const std::string task = j.at("task").get<std::string>();
    if (task == "classification") {
      m.task = TaskKind::kClassification;
    } else if (task == "regression") {
      m.task = TaskKind::kRegression;
    } else {
      fail(ErrorCode::kInvalidManifest, "task must be classification or regression, got '" + task + "'");
    }
    m.question = j.at("question").get<std::string>();
    m.label_column = j.value("label_column", std::string("label"));
    m.answer_format_hint = j.value("answer_format_hint", std::string());
    m.dataset_id = j.value("dataset_id", std::string());
    if (j.contains("label_values")) m.label_values = j.at("label_values").get<std::vector<std::string>>();
    if (j.contains("label_range") && !j.at("label_range").is_null()) {
      const auto r = j.at("label_range").get<std::vector<double>>();
      if (r.size() != 2) fail(ErrorCode::kInvalidManifest, "label_range must be [min, max]");
      m.label_range = LabelRange{r[0], r[1]};
    }
    if (j.contains("features")) m.feature_columns = j.at("features").get<std::vector<std::string>>();
    if (j.contains("columns")) {
      for (const auto& [name, kind] : j.at("columns").items()) {
        const std::string k = kind.get<std::string>();
        if (k != "numeric" && k != "categorical") {
          fail(ErrorCode::kInvalidManifest, "column '" + name + "' kind must be numeric or categorical");
        }
        m.column_kinds[name] = k == "numeric" ? ColumnKind::kNumeric : ColumnKind::kCategorical;
      }
    }
    if (j.contains("missing")) {
      const auto& mj = j.at("missing");
      const std::string policy = mj.value("policy", std::string("reject"));
      if (policy == "reject") {
        m.missing = MissingPolicy::kRejectRow;
      } else if (policy == "impute") {
        m.missing = MissingPolicy::kImpute;
      } else {
        fail(ErrorCode::kInvalidManifest, "missing.policy must be reject or impute");
      }
      m.impute_value = mj.value("value", m.impute_value);
      if (mj.contains("tokens")) m.missing_tokens = mj.at("tokens").get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidManifest, e.what());
  }

  if (m.task == TaskKind::kClassification) {
    std::set<std::string> seen;
    for (const auto& v : m.label_values) {
      if (!seen.insert(fold(v)).second) {
        fail(ErrorCode::kInvalidManifest, "duplicate label value '" + v + "'");
      }
    }
  } else if (m.label_range && !(m.label_range->min < m.label_range->max)) {
    fail(ErrorCode::kDegenerateRange, "label_range min must be < max");
  }
  return m;
}

inline nlohmann::json manifest_to_json(const TaskManifest& m) {
  nlohmann::json j;
  j["task"] = std::string(to_string(m.task));
  j["question"] = m.question;
  j["label_column"] = m.label_column;
  if (m.task == TaskKind::kClassification) j["label_values"] = m.label_values;
  if (m.label_range) j["label_range"] = {m.label_range->min, m.label_range->max};
  if (!m.answer_format_hint.empty()) j["answer_format_hint"] = m.answer_format_hint;
  if (!m.dataset_id.empty()) j["dataset_id"] = m.dataset_id;
  if (!m.feature_columns.empty()) j["features"] = m.feature_columns;
  return j;
}

inline TaskManifest load_manifest(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::kInvalidManifest, path.string() + ": " + e.what());
  }
  TaskManifest m = manifest_from_json(j);
  if (m.dataset_id.empty()) m.dataset_id = path.stem().string();
  return m;
}

// ---------------------------------------------------------------------------
// Loading

namespace detail {

inline std::string render_categorical(std::string_view raw) {
  std::string v(trim(raw));
  for (char& c : v) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return v;
}

}  // namespace detail

// Builds examples from already-parsed CSV records (first record is the header).
inline LoadedDataset load_records(const std::vector<CsvRecord>& records, TaskManifest manifest) {
  if (records.empty()) fail(ErrorCode::kEmptyDataset, "CSV has no header row");
  const auto& header = records.front().fields;

  std::map<std::string, std::size_t> index;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string name(trim(header[c]));
    if (name.empty()) fail(ErrorCode::kInvalidManifest, "empty column name at position " + std::to_string(c));
    if (!index.emplace(name, c).second) fail(ErrorCode::kInvalidManifest, "duplicate column '" + name + "'");
  }
  const auto column = [&](const std::string& name) {
    const auto it = index.find(name);
    if (it == index.end()) fail(ErrorCode::kMissingColumn, "column '" + name + "' not in CSV header");
    return it->second;
  };

  const std::size_t label_col = column(manifest.label_column);
  for (const auto& [name, kind] : manifest.column_kinds) (void)column(name);
  std::set<std::string> wanted(manifest.feature_columns.begin(), manifest.feature_columns.end());
  for (const auto& name : wanted) {
    if (column(name) == label_col) fail(ErrorCode::kInvalidManifest, "label column listed as a feature");
  }

  std::vector<std::size_t> feature_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == label_col) continue;
    if (!wanted.empty() && !wanted.count(std::string(trim(header[c])))) continue;
    feature_cols.push_back(c);
  }
  if (feature_cols.empty()) fail(ErrorCode::kMissingColumn, "no feature columns");

  const auto is_missing = [&](std::string_view cell) {
    const auto t = trim(cell);
    return std::any_of(manifest.missing_tokens.begin(), manifest.missing_tokens.end(),
                       [&](const std::string& tok) { return t == trim(tok); });
  };

  // Column kinds: manifest override, else numeric iff every present cell parses.
  std::vector<ColumnKind> kinds(header.size(), ColumnKind::kNumeric);
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string name(trim(header[c]));
    if (auto it = manifest.column_kinds.find(name); it != manifest.column_kinds.end()) {
      kinds[c] = it->second;
      continue;
    }
    bool any = false;
    for (std::size_t r = 1; r < records.size(); ++r) {
      const auto& f = records[r].fields;
      if (c >= f.size() || is_missing(f[c])) continue;
      any = true;
      if (!parse_number(f[c])) {
        kinds[c] = ColumnKind::kCategorical;
        break;
      }
    }
    if (!any) kinds[c] = ColumnKind::kCategorical;
  }

  std::map<std::string, std::string> canonical_label;
  for (const auto& v : manifest.label_values) canonical_label[fold(v)] = v;
  const bool derive_labels = manifest.task == TaskKind::kClassification && manifest.label_values.empty();

  LoadedDataset out;
  for (std::size_t c : feature_cols) {
    out.columns.push_back({std::string(trim(header[c])), kinds[c], ColumnRole::kFeature});
  }
  out.columns.push_back({manifest.label_column,
                         manifest.task == TaskKind::kRegression ? ColumnKind::kNumeric : ColumnKind::kCategorical,
                         ColumnRole::kLabel});

  std::set<std::string> derived;
  for (std::size_t r = 1; r < records.size(); ++r) {
    const auto& rec = records[r];
    const std::size_t row_id = r - 1;
    const std::string where = "row " + std::to_string(row_id) + " (line " + std::to_string(rec.line) + ")";
    if (rec.fields.size() != header.size()) {
      fail(ErrorCode::kInvalidManifest, where + ": expected " + std::to_string(header.size()) +
                                            " fields, found " + std::to_string(rec.fields.size()));
    }

    const std::string& raw_label = rec.fields[label_col];
    if (is_missing(raw_label)) {
      ++out.dropped_rows;
      continue;
    }

    TabularExample ex;
    ex.row_id = row_id;
    bool drop = false;
    for (std::size_t c : feature_cols) {
      Feature f;
      f.name = std::string(trim(header[c]));
      const std::string& cell = rec.fields[c];
      std::string_view source = cell;
      if (is_missing(cell)) {
        if (manifest.missing == MissingPolicy::kRejectRow) {
          drop = true;
          break;
        }
        source = manifest.impute_value;
      }
      if (kinds[c] == ColumnKind::kNumeric) {
        if (auto v = parse_number(source)) {
          f.numeric = *v;
          f.value = render_number(*v);
        } else {
          f.value = detail::render_categorical(source);
        }
      } else {
        f.value = detail::render_categorical(source);
      }
      ex.features.push_back(std::move(f));
    }
    if (drop) {
      ++out.dropped_rows;
      continue;
    }

    if (manifest.task == TaskKind::kRegression) {
      const auto y = parse_number(raw_label);
      if (!y) fail(ErrorCode::kLabelParseFailure, where + ": label '" + raw_label + "' is not a number");
      ex.label_value = *y;
      ex.label = render_number(*y);
    } else if (derive_labels) {
      ex.label = std::string(trim(raw_label));
      derived.insert(ex.label);
    } else {
      const auto it = canonical_label.find(fold(raw_label));
      if (it == canonical_label.end()) {
        fail(ErrorCode::kLabelParseFailure, where + ": label '" + raw_label + "' not in label_values");
      }
      ex.label = it->second;
    }
    out.examples.push_back(std::move(ex));
  }

  if (out.examples.empty()) fail(ErrorCode::kEmptyDataset, "no usable rows");
  if (derive_labels) manifest.label_values.assign(derived.begin(), derived.end());
  if (manifest.task == TaskKind::kClassification && manifest.label_values.empty()) {
    fail(ErrorCode::kInvalidManifest, "classification task without label values");
  }
  out.manifest = std::move(manifest);
  return out;
}

inline LoadedDataset load_dataset(const std::filesystem::path& csv_path, const std::filesystem::path& manifest_path) {
  TaskManifest manifest = load_manifest(manifest_path);
  return load_records(parse_csv(read_file(csv_path)), std::move(manifest));
}

// Fills manifest.label_range from train labels when absent; validates it.
inline LabelRange resolve_label_range(TaskManifest& manifest, const std::vector<TabularExample>& train) {
  require(manifest.task == TaskKind::kRegression, ErrorCode::kInvalidArgument,
          "label range only applies to regression");
  if (!manifest.label_range) {
    require(!train.empty(), ErrorCode::kEmptyDataset, "cannot resolve label range from empty train split");
    LabelRange r{*train.front().label_value, *train.front().label_value};
    for (const auto& ex : train) {
      r.min = std::min(r.min, *ex.label_value);
      r.max = std::max(r.max, *ex.label_value);
    }
    manifest.label_range = r;
  }
  require(manifest.label_range->min < manifest.label_range->max, ErrorCode::kDegenerateRange,
          "label range [" + render_number(manifest.label_range->min) + ", " +
              render_number(manifest.label_range->max) + "] is degenerate");
  return *manifest.label_range;
}

// ---------------------------------------------------------------------------
// Splitting

// Seeded train/test split. Classification data is stratified by label when
// every class has at least two rows; each class then contributes
// round(test_fraction * |class|) rows to the test side.
inline DatasetSplit split(const std::vector<TabularExample>& dataset, double test_fraction, std::uint64_t seed,
                          bool stratify = true) {
  require(!dataset.empty(), ErrorCode::kEmptyDataset, "cannot split an empty dataset");
  require(test_fraction > 0.0 && test_fraction < 1.0, ErrorCode::kInvalidArgument,
          "test_fraction must lie in (0, 1)");

  DatasetSplit out;
  out.seed = seed;
  Rng rng(seed);
  std::vector<char> in_test(dataset.size(), 0);

  std::map<std::string, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < dataset.size(); ++i) by_label[dataset[i].label].push_back(i);
  const bool can_stratify =
      stratify && by_label.size() > 1 &&
      std::all_of(by_label.begin(), by_label.end(), [](const auto& kv) { return kv.second.size() >= 2; });

  if (stratify && !can_stratify) {
    out.warning = "stratification disabled: some class has fewer than 2 rows or only one class present";
  }

  const auto take = [&](std::vector<std::size_t> ids) {
    rng.shuffle(std::span<std::size_t>(ids));
    const auto k = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(ids.size())));
    for (std::size_t i = 0; i < k && i < ids.size(); ++i) in_test[ids[i]] = 1;
  };

  if (can_stratify) {
    out.stratified = true;
    for (auto& [label, ids] : by_label) take(ids);
  } else {
    std::vector<std::size_t> all(dataset.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    take(std::move(all));
  }

  for (std::size_t i = 0; i < dataset.size(); ++i) {
    (in_test[i] ? out.test : out.train).push_back(dataset[i]);
  }
  require(!out.train.empty() && !out.test.empty(), ErrorCode::kDegenerateSplit,
          "split of " + std::to_string(dataset.size()) + " rows at fraction " + render_number(test_fraction) +
              " leaves one side empty");
  return out;
}

}  // namespace prpo
