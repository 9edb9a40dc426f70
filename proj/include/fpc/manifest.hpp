// Labeled image records: CSV with a mandatory "path,label,patient_id"
// header. Labels default to the six-class plane vocabulary.
#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "fpc/common.hpp"

namespace fpc {

inline const std::vector<std::string>& default_labels() {
  static const std::vector<std::string> labels{"FA", "FB", "FF", "FT", "MC", "O"};
  return labels;
}

struct ManifestRecord {
  std::string path;
  std::string label;
  std::string patient_id;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;
  std::vector<std::string> vocabulary = default_labels();

  int label_index(const std::string& label) const {
    for (std::size_t i = 0; i < vocabulary.size(); ++i)
      if (vocabulary[i] == label) return static_cast<int>(i);
    throw data_error("label '" + label + "' not in vocabulary");
  }

  std::map<std::string, int> class_counts() const {
    std::map<std::string, int> counts;
    for (const auto& r : records) ++counts[r.label];
    return counts;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

// Strict, order-preserving load. Errors carry 1-based line numbers.
inline DatasetManifest load_manifest(const std::string& path,
                                     std::vector<std::string> vocabulary = default_labels()) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open manifest '" + path + "'");
  DatasetManifest m;
  m.vocabulary = std::move(vocabulary);
  std::string line;
  if (!std::getline(in, line)) throw data_error("manifest '" + path + "' is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "path,label,patient_id")
    throw data_error("manifest '" + path + "' line 1: header must be 'path,label,patient_id'");
  std::unordered_set<std::string> seen;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 3)
      throw data_error("manifest '" + path + "' line " + std::to_string(line_no) +
                       ": expected 3 columns, got " + std::to_string(fields.size()));
    const std::string& label = fields[1];
    if (std::find(m.vocabulary.begin(), m.vocabulary.end(), label) == m.vocabulary.end())
      throw data_error("manifest '" + path + "' line " + std::to_string(line_no) +
                       ": unknown label '" + label + "'");
    if (!seen.insert(fields[0]).second)
      throw data_error("manifest '" + path + "' line " + std::to_string(line_no) +
                       ": duplicate path '" + fields[0] + "'");
    m.records.push_back({fields[0], label, fields[2]});
  }
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw data_error("cannot write manifest '" + path + "'");
    out << "path,label,patient_id\n";
    for (const auto& r : m.records)
      out << r.path << ',' << r.label << ',' << r.patient_id << '\n';
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw data_error("cannot rename temp manifest into '" + path + "'");
}

}  // namespace fpc
