#pragma once

// Point cloud loading, alignment and resampling for pre-segmented 3D scenes.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointlm/errors.hpp"

namespace pointlm {

using Vec3 = std::array<double, 3>;

struct Point {
  double x = 0, y = 0, z = 0;
  bool has_color = false;
  double r = 0, g = 0, b = 0;
};

struct ObjectCloud {
  int object_id = 0;
  std::string label;
  std::vector<Point> points;
  Vec3 centroid{0, 0, 0};

  void recompute_centroid() {
    Vec3 c{0, 0, 0};
    for (const Point& p : points) {
      c[0] += p.x;
      c[1] += p.y;
      c[2] += p.z;
    }
    const double n = static_cast<double>(points.size());
    if (n > 0) {
      c[0] /= n;
      c[1] /= n;
      c[2] /= n;
    }
    centroid = c;
  }
};

struct Scene {
  std::string scene_id;
  std::vector<ObjectCloud> objects;

  std::multiset<std::string> all_labels() const {
    std::multiset<std::string> labels;
    for (const auto& o : objects) labels.insert(o.label);
    return labels;
  }
};

inline void validate_scene(const Scene& scene) {
  if (scene.objects.empty())
    throw DataError("scene '" + scene.scene_id + "' has no objects");
  std::set<int> ids;
  for (const auto& o : scene.objects) {
    if (o.object_id < 0)
      throw DataError("negative object_id " + std::to_string(o.object_id));
    if (!ids.insert(o.object_id).second)
      throw DataError("duplicate object_id " + std::to_string(o.object_id) +
                      " in scene '" + scene.scene_id + "'");
    if (o.points.empty())
      throw DataError("object " + std::to_string(o.object_id) +
                      " has no points");
    for (const Point& p : o.points) {
      if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z))
        throw DataError("non-finite coordinate in object " +
                        std::to_string(o.object_id));
      if (p.has_color &&
          (p.r < 0 || p.r > 1 || p.g < 0 || p.g > 1 || p.b < 0 || p.b > 1))
        throw DataError("color component outside [0,1] in object " +
                        std::to_string(o.object_id));
    }
  }
}

// --- scene file IO -----------------------------------------------------

// JSON-lines format: first record {"scene_id": str}, then one record per
// object {"object_id", "label", "points": [[x,y,z],...], "colors":? }.
inline Scene load_scene_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open scene file: " + path);
  Scene scene;
  std::string line;
  int lineno = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": parse failure: " + e.what());
    }
    if (!have_header) {
      if (!j.contains("scene_id"))
        throw DataError(path + ":" + std::to_string(lineno) +
                        ": expected header record with scene_id");
      scene.scene_id = j.at("scene_id").get<std::string>();
      have_header = true;
      continue;
    }
    try {
      ObjectCloud obj;
      obj.object_id = j.at("object_id").get<int>();
      obj.label = j.at("label").get<std::string>();
      const auto& pts = j.at("points");
      const nlohmann::json* colors =
          j.contains("colors") ? &j.at("colors") : nullptr;
      if (colors && colors->size() != pts.size())
        throw DataError("colors/points length mismatch");
      for (size_t i = 0; i < pts.size(); ++i) {
        Point p;
        p.x = pts[i].at(0).get<double>();
        p.y = pts[i].at(1).get<double>();
        p.z = pts[i].at(2).get<double>();
        if (colors) {
          p.has_color = true;
          p.r = (*colors)[i].at(0).get<double>();
          p.g = (*colors)[i].at(1).get<double>();
          p.b = (*colors)[i].at(2).get<double>();
        }
        obj.points.push_back(p);
      }
      obj.recompute_centroid();
      scene.objects.push_back(std::move(obj));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path + ":" + std::to_string(lineno) +
                      ": bad object record: " + e.what());
    }
  }
  validate_scene(scene);
  return scene;
}

inline void save_scene_jsonl(const Scene& scene, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write scene file: " + path);
  out << nlohmann::json{{"scene_id", scene.scene_id}}.dump() << "\n";
  for (const auto& o : scene.objects) {
    nlohmann::json j;
    j["object_id"] = o.object_id;
    j["label"] = o.label;
    auto pts = nlohmann::json::array();
    auto cols = nlohmann::json::array();
    bool any_color = false;
    for (const Point& p : o.points) {
      pts.push_back({p.x, p.y, p.z});
      cols.push_back({p.r, p.g, p.b});
      any_color |= p.has_color;
    }
    j["points"] = std::move(pts);
    if (any_color) j["colors"] = std::move(cols);
    out << j.dump() << "\n";
  }
}

// Binary-xyz: little-endian float32 triples, sidecar CSV `object_id,offset,count`
// (offset/count in points). Labels are not carried by this format; objects get
// label "object".
inline Scene load_scene_binary_xyz(const std::string& bin_path,
                                   const std::string& index_path,
                                   const std::string& scene_id) {
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw DataError("cannot open binary scene file: " + bin_path);
  bin.seekg(0, std::ios::end);
  const auto nbytes = static_cast<size_t>(bin.tellg());
  if (nbytes % (3 * sizeof(float)) != 0)
    throw DataError(bin_path + ": size is not a multiple of 12 bytes");
  bin.seekg(0);
  std::vector<float> coords(nbytes / sizeof(float));
  bin.read(reinterpret_cast<char*>(coords.data()),
           static_cast<std::streamsize>(nbytes));

  std::ifstream idx(index_path);
  if (!idx) throw DataError("cannot open index file: " + index_path);
  Scene scene;
  scene.scene_id = scene_id;
  std::string line;
  int lineno = 0;
  const size_t total_points = coords.size() / 3;
  while (std::getline(idx, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string a, b, c;
    if (!std::getline(ss, a, ',') || !std::getline(ss, b, ',') ||
        !std::getline(ss, c, ','))
      throw DataError(index_path + ":" + std::to_string(lineno) +
                      ": expected object_id,offset,count");
    ObjectCloud obj;
    size_t offset = 0, count = 0;
    try {
      obj.object_id = std::stoi(a);
      offset = std::stoul(b);
      count = std::stoul(c);
    } catch (const std::exception&) {
      throw DataError(index_path + ":" + std::to_string(lineno) +
                      ": non-numeric field");
    }
    if (offset + count > total_points)
      throw DataError(index_path + ":" + std::to_string(lineno) +
                      ": range exceeds binary payload");
    obj.label = "object";
    for (size_t i = offset; i < offset + count; ++i) {
      Point p;
      p.x = coords[3 * i];
      p.y = coords[3 * i + 1];
      p.z = coords[3 * i + 2];
      obj.points.push_back(p);
    }
    obj.recompute_centroid();
    scene.objects.push_back(std::move(obj));
  }
  validate_scene(scene);
  return scene;
}

enum class SceneFormat { JsonLines, BinaryXyz };

inline Scene load_scene(const std::string& path, SceneFormat format) {
  if (format == SceneFormat::JsonLines) return load_scene_jsonl(path);
  return load_scene_binary_xyz(path, path + ".idx", path);
}

// --- geometry operations ----------------------------------------------

// Translates the whole scene so the pooled point mean becomes the origin.
inline Scene align_to_centroid(const Scene& scene) {
  validate_scene(scene);
  Vec3 mean{0, 0, 0};
  size_t n = 0;
  for (const auto& o : scene.objects)
    for (const Point& p : o.points) {
      mean[0] += p.x;
      mean[1] += p.y;
      mean[2] += p.z;
      ++n;
    }
  mean[0] /= static_cast<double>(n);
  mean[1] /= static_cast<double>(n);
  mean[2] /= static_cast<double>(n);
  Scene out = scene;
  for (auto& o : out.objects) {
    for (Point& p : o.points) {
      p.x -= mean[0];
      p.y -= mean[1];
      p.z -= mean[2];
    }
    o.recompute_centroid();
  }
  return out;
}

inline double sqdist(const Point& a, const Point& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

// Greedy farthest point sampling. The first pick is points[seed_index]; each
// subsequent pick maximizes the minimum distance to the selected set, ties
// broken by lowest original index. k >= |points| pads round-robin.
inline ObjectCloud farthest_point_sample(const ObjectCloud& cloud, size_t k,
                                         size_t seed_index) {
  if (cloud.points.empty()) throw DataError("farthest_point_sample: empty cloud");
  if (k < 1) throw DataError("farthest_point_sample: k must be >= 1");
  if (seed_index >= cloud.points.size())
    throw DataError("farthest_point_sample: seed_index out of range");
  const auto& pts = cloud.points;
  ObjectCloud out;
  out.object_id = cloud.object_id;
  out.label = cloud.label;

  if (k >= pts.size()) {
    for (size_t i = 0; i < k; ++i) out.points.push_back(pts[i % pts.size()]);
    out.recompute_centroid();
    return out;
  }

  std::vector<double> min_sq(pts.size(), std::numeric_limits<double>::infinity());
  std::vector<char> taken(pts.size(), 0);
  size_t current = seed_index;
  for (size_t picked = 0; picked < k; ++picked) {
    taken[current] = 1;
    out.points.push_back(pts[current]);
    if (picked + 1 == k) break;
    size_t best = pts.size();
    double best_d = -1;
    for (size_t i = 0; i < pts.size(); ++i) {
      if (taken[i]) continue;
      min_sq[i] = std::min(min_sq[i], sqdist(pts[i], pts[current]));
      if (min_sq[i] > best_d) {
        best_d = min_sq[i];
        best = i;
      }
    }
    current = best;
  }
  out.recompute_centroid();
  return out;
}

// Zero-mean, unit max radius. Degenerate clouds (all points coincident) are
// only centered.
inline ObjectCloud normalize_object(const ObjectCloud& cloud) {
  if (cloud.points.empty()) throw DataError("normalize_object: empty cloud");
  ObjectCloud out = cloud;
  Vec3 mean{0, 0, 0};
  for (const Point& p : out.points) {
    mean[0] += p.x;
    mean[1] += p.y;
    mean[2] += p.z;
  }
  const double n = static_cast<double>(out.points.size());
  mean[0] /= n;
  mean[1] /= n;
  mean[2] /= n;
  double max_sq = 0;
  for (Point& p : out.points) {
    p.x -= mean[0];
    p.y -= mean[1];
    p.z -= mean[2];
    max_sq = std::max(max_sq, p.x * p.x + p.y * p.y + p.z * p.z);
  }
  if (max_sq > 0) {
    const double inv = 1.0 / std::sqrt(max_sq);
    for (Point& p : out.points) {
      p.x *= inv;
      p.y *= inv;
      p.z *= inv;
    }
  }
  out.recompute_centroid();
  return out;
}

}  // namespace pointlm
