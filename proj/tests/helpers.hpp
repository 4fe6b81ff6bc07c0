#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "prpo/dataset.hpp"
#include "prpo/text.hpp"

namespace testing_support {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("prpo_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

  std::filesystem::path write(const std::string& name, const std::string& content) const {
    const auto p = path_ / name;
    std::ofstream(p, std::ios::binary) << content;
    return p;
  }

 private:
  std::filesystem::path path_;
};

inline prpo::TabularExample make_example(std::size_t row_id, const std::vector<std::pair<std::string, std::string>>& kv,
                                         std::string label) {
  prpo::TabularExample ex;
  ex.row_id = row_id;
  for (const auto& [k, v] : kv) ex.features.push_back({k, v, prpo::parse_number(v)});
  ex.label = std::move(label);
  if (const auto y = prpo::parse_number(ex.label)) ex.label_value = *y;
  return ex;
}

inline prpo::TaskManifest yes_no_manifest() {
  prpo::TaskManifest m;
  m.task = prpo::TaskKind::kClassification;
  m.question = "Is the answer yes or no?";
  m.label_values = {"yes", "no"};
  m.dataset_id = "test";
  return m;
}

inline prpo::TaskManifest regression_manifest(double lo, double hi) {
  prpo::TaskManifest m;
  m.task = prpo::TaskKind::kRegression;
  m.question = "What is the value?";
  m.label_range = prpo::LabelRange{lo, hi};
  m.dataset_id = "reg";
  return m;
}

inline std::string slurp(const std::filesystem::path& p) { return prpo::read_file(p); }

}  // namespace testing_support
