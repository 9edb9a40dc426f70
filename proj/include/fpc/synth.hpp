// Synthetic desk-scale dataset: each class is a parametric shape family
// rendered over multiplicative speckle that mimics ultrasound texture.
// Class order: FA ellipse, FB double ellipse, FF bar, FT ring, MC wedge,
// O speckle only.
#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "fpc/image.hpp"
#include "fpc/manifest.hpp"
#include "fpc/rng.hpp"

namespace fpc {

struct ShapeBox {
  // Inclusive pixel bounds; x0 < 0 means no shape (speckle-only class).
  int x0 = -1, y0 = -1, x1 = -1, y1 = -1;

  bool valid() const { return x0 >= 0; }
  bool contains(int x, int y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

struct SynthResult {
  DatasetManifest manifest;       // paths relative to out_dir
  std::vector<ShapeBox> boxes;    // aligned with manifest records
};

namespace detail {

struct ShapeParams {
  int kind = 5;  // 0 ellipse, 1 double ellipse, 2 bar, 3 ring, 4 wedge, 5 none
  double cx = 0, cy = 0;
  double a = 0, b = 0;      // semi-axes / half-length+half-thickness / radii
  double phi = 0;           // orientation
  double inner = 0;         // ring inner radius fraction, wedge half-angle
  double sep = 0;           // double-ellipse separation
};

// Approximate signed distance (negative inside), in pixels.
inline double shape_distance(const ShapeParams& s, double x, double y) {
  const double dx = x - s.cx, dy = y - s.cy;
  const double u = std::cos(s.phi) * dx + std::sin(s.phi) * dy;
  const double v = -std::sin(s.phi) * dx + std::cos(s.phi) * dy;
  switch (s.kind) {
    case 0: {  // ellipse
      const double q = std::sqrt((u / s.a) * (u / s.a) + (v / s.b) * (v / s.b));
      return (q - 1.0) * std::min(s.a, s.b);
    }
    case 1: {  // two ellipses along the u axis
      const double q1 = std::hypot((u - s.sep) / s.a, v / s.b);
      const double q2 = std::hypot((u + s.sep) / s.a, v / s.b);
      return (std::min(q1, q2) - 1.0) * std::min(s.a, s.b);
    }
    case 2: {  // bar: box with half-extents (a, b)
      const double qx = std::abs(u) - s.a;
      const double qy = std::abs(v) - s.b;
      const double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
      return std::hypot(ox, oy) + std::min(std::max(qx, qy), 0.0);
    }
    case 3: {  // ring: annulus centered on radius a, half-width b
      return std::abs(std::hypot(dx, dy) - s.a) - s.b;
    }
    case 4: {  // wedge: apex at center, axis u, half-angle inner, length a
      const double r = std::hypot(u, v);
      if (r < 1e-9) return -1.0;
      const double ang = std::abs(std::atan2(v, std::max(u, 0.0)));
      const double d_len = r - s.a;
      const double d_ang = u <= 0 ? r : (ang - s.inner) * r;
      return std::max(d_len, d_ang);
    }
    default:
      return 1e9;
  }
}

inline ShapeBox shape_box(const ShapeParams& s, int res) {
  if (s.kind == 5) return {};
  double ex = 0, ey = 0;
  const double c = std::cos(s.phi), sn = std::sin(s.phi);
  switch (s.kind) {
    case 0:
      ex = std::sqrt(s.a * s.a * c * c + s.b * s.b * sn * sn);
      ey = std::sqrt(s.a * s.a * sn * sn + s.b * s.b * c * c);
      break;
    case 1: {
      const double au = s.a + s.sep;
      ex = std::sqrt(au * au * c * c + s.b * s.b * sn * sn);
      ey = std::sqrt(au * au * sn * sn + s.b * s.b * c * c);
      break;
    }
    case 2:
      ex = std::abs(s.a * c) + std::abs(s.b * sn);
      ey = std::abs(s.a * sn) + std::abs(s.b * c);
      break;
    case 3:
      ex = ey = s.a + s.b;
      break;
    case 4:
      ex = ey = s.a;
      break;
  }
  const double margin = 2.0;
  ShapeBox box;
  box.x0 = std::max(0, static_cast<int>(std::floor(s.cx - ex - margin)));
  box.y0 = std::max(0, static_cast<int>(std::floor(s.cy - ey - margin)));
  box.x1 = std::min(res - 1, static_cast<int>(std::ceil(s.cx + ex + margin)));
  box.y1 = std::min(res - 1, static_cast<int>(std::ceil(s.cy + ey + margin)));
  return box;
}

inline ShapeParams sample_shape(int class_index, int res, RngStream& rng) {
  ShapeParams s;
  s.kind = class_index;
  const double r = res;
  s.cx = r * (0.5 + rng.uniform(-0.13, 0.13));
  s.cy = r * (0.5 + rng.uniform(-0.13, 0.13));
  s.phi = rng.uniform(0.0, std::numbers::pi);
  switch (class_index) {
    case 0:  // ellipse
      s.a = r * rng.uniform(0.22, 0.30);
      s.b = r * rng.uniform(0.14, 0.20);
      break;
    case 1:  // double ellipse
      s.a = r * rng.uniform(0.10, 0.14);
      s.b = r * rng.uniform(0.13, 0.18);
      s.sep = s.a + r * rng.uniform(0.02, 0.05);
      break;
    case 2:  // bar
      s.a = r * rng.uniform(0.26, 0.36);
      s.b = r * rng.uniform(0.045, 0.075);
      break;
    case 3:  // ring
      s.a = r * rng.uniform(0.20, 0.27);
      s.b = r * rng.uniform(0.045, 0.07);
      break;
    case 4:  // wedge
      s.a = r * rng.uniform(0.30, 0.40);
      s.inner = rng.uniform(0.35, 0.55);
      s.cx = r * (0.5 + rng.uniform(-0.10, 0.10));
      s.cy = r * (0.5 + rng.uniform(-0.10, 0.10));
      break;
    default:  // speckle only
      s.kind = 5;
      break;
  }
  return s;
}

}  // namespace detail

// Renders classes * per_class PGM images plus manifest.csv and bboxes.csv
// into out_dir; byte-identical for a fixed seed.
inline SynthResult synth_dataset(const std::string& out_dir, int classes, int per_class,
                                 int resolution, std::uint64_t seed) {
  if (classes < 1 || classes > 6) throw usage_error("synth: classes must be in [1,6]");
  if (per_class < 1 || resolution < 8)
    throw usage_error("synth: per_class must be >= 1 and resolution >= 8");
  std::filesystem::create_directories(out_dir);

  SynthResult result;
  std::vector<double> pixels(static_cast<std::size_t>(resolution) * resolution);
  for (int c = 0; c < classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      const int index = c * per_class + i;
      RngStream rng = RngStream::make(seed, "synth", static_cast<std::uint64_t>(index));
      const detail::ShapeParams shape = detail::sample_shape(c, resolution, rng);

      const double bg = rng.uniform(0.10, 0.20);
      const double fg = rng.uniform(0.55, 0.80);
      const double edge = 1.5;
      for (int y = 0; y < resolution; ++y)
        for (int x = 0; x < resolution; ++x) {
          const double d = detail::shape_distance(shape, x, y);
          const double mask = std::clamp(0.5 - d / edge, 0.0, 1.0);
          const double mean = bg + (fg - bg) * mask;
          // Half-developed speckle: mean anchored, Rayleigh-power noise.
          const double n1 = rng.normal(), n2 = rng.normal();
          const double speckle = 0.45 + 0.55 * (n1 * n1 + n2 * n2) / 2.0;
          pixels[static_cast<std::size_t>(y) * resolution + x] =
              std::clamp(mean * speckle, 0.0, 1.0);
        }

      char name[32];
      std::snprintf(name, sizeof(name), "img_%05d.pgm", index);
      save_pgm(out_dir + "/" + name, pixels, resolution, resolution);

      ManifestRecord rec;
      rec.path = name;
      rec.label = default_labels()[static_cast<std::size_t>(c)];
      rec.patient_id = "c" + std::to_string(c) + "_p" + std::to_string(i / 4);
      result.manifest.records.push_back(rec);
      result.boxes.push_back(detail::shape_box(shape, resolution));
    }
  }
  save_manifest(result.manifest, out_dir + "/manifest.csv");
  {
    const std::string path = out_dir + "/bboxes.csv";
    std::ofstream out(path + ".tmp");
    if (!out) throw data_error("cannot write '" + path + "'");
    out << "path,x0,y0,x1,y1\n";
    for (std::size_t i = 0; i < result.boxes.size(); ++i) {
      const auto& b = result.boxes[i];
      out << result.manifest.records[i].path << ',' << b.x0 << ',' << b.y0 << ',' << b.x1
          << ',' << b.y1 << '\n';
    }
    out.close();
    if (std::rename((path + ".tmp").c_str(), path.c_str()) != 0)
      throw data_error("cannot rename temp file into '" + path + "'");
  }
  return result;
}

inline std::vector<ShapeBox> load_bboxes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open bbox file '" + path + "'");
  std::string line;
  std::getline(in, line);
  std::vector<ShapeBox> boxes;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 5) throw data_error("malformed bbox line in '" + path + "'");
    ShapeBox b;
    b.x0 = std::stoi(fields[1]);
    b.y0 = std::stoi(fields[2]);
    b.x1 = std::stoi(fields[3]);
    b.y1 = std::stoi(fields[4]);
    boxes.push_back(b);
  }
  return boxes;
}

}  // namespace fpc
