// Bridges manifests to in-memory training samples.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fpc/image.hpp"
#include "fpc/manifest.hpp"
#include "fpc/train.hpp"

namespace fpc {

// Relative record paths resolve against base_dir (usually the manifest's
// directory), so a dataset directory is relocatable.
template <class T>
std::vector<Sample<T>> load_samples(const DatasetManifest& manifest,
                                    const std::string& base_dir, int resolution,
                                    int channels) {
  std::vector<Sample<T>> samples;
  samples.reserve(manifest.records.size());
  for (const auto& rec : manifest.records) {
    std::filesystem::path p(rec.path);
    if (p.is_relative() && !base_dir.empty()) p = std::filesystem::path(base_dir) / p;
    Sample<T> s;
    s.image = load_image<T>(p.string(), resolution, channels);
    s.label = manifest.label_index(rec.label);
    samples.push_back(std::move(s));
  }
  return samples;
}

inline std::string manifest_dir(const std::string& manifest_path) {
  return std::filesystem::path(manifest_path).parent_path().string();
}

}  // namespace fpc
