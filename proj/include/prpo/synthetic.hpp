#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "prpo/dataset.hpp"
#include "prpo/rng.hpp"
#include "prpo/text.hpp"

namespace prpo {

struct SeparableSpec {
  std::size_t rows = 200;
  std::size_t features = 4;
  double margin = 0.25;  // minimum |w.x| kept, after rounding
  std::uint64_t seed = 7;
};

// Two-class table labelled by the sign of a fixed random hyperplane through
// the origin, with rows near the boundary rejected. Values are rounded to two
// decimals before labelling so the rendered table is exactly separable.
inline LoadedDataset make_separable(const SeparableSpec& spec = {}) {
  Rng rng(spec.seed);
  std::vector<double> w(spec.features);
  double norm = 0.0;
  for (double& x : w) {
    x = rng.normal();
    norm += x * x;
  }
  for (double& x : w) x /= std::sqrt(norm);

  LoadedDataset out;
  out.manifest.task = TaskKind::kClassification;
  out.manifest.question = "Based on the features above, is the target class yes or no?";
  out.manifest.label_values = {"yes", "no"};
  out.manifest.dataset_id = "separable";
  for (std::size_t j = 0; j < spec.features; ++j) {
    out.columns.push_back({"x" + std::to_string(j + 1), ColumnKind::kNumeric, ColumnRole::kFeature});
  }
  out.columns.push_back({"label", ColumnKind::kCategorical, ColumnRole::kLabel});

  while (out.examples.size() < spec.rows) {
    TabularExample ex;
    ex.row_id = out.examples.size();
    double dot = 0.0;
    for (std::size_t j = 0; j < spec.features; ++j) {
      const double x = std::round(rng.normal() * 100.0) / 100.0;
      dot += w[j] * x;
      ex.features.push_back({out.columns[j].name, render_number(x), x});
    }
    if (std::abs(dot) < spec.margin) continue;
    ex.label = dot > 0 ? "yes" : "no";
    out.examples.push_back(std::move(ex));
  }
  return out;
}

inline void write_csv(const std::filesystem::path& path, const LoadedDataset& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  for (std::size_t c = 0; c < data.columns.size(); ++c) out << (c ? "," : "") << csv_escape(data.columns[c].name);
  out << "\n";
  for (const auto& ex : data.examples) {
    for (const auto& f : ex.features) out << csv_escape(f.value) << ",";
    out << csv_escape(ex.label) << "\n";
  }
}

}  // namespace prpo
