#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "pointlm/geometry.hpp"

using namespace pointlm;

namespace {

ObjectCloud cloud_from_xs(const std::vector<double>& xs) {
  ObjectCloud c;
  c.object_id = 0;
  c.label = "test";
  for (double x : xs) c.points.push_back({x, 0, 0});
  c.recompute_centroid();
  return c;
}

// Independent oracle: exhaustive max-min-distance greedy selection.
std::vector<size_t> brute_force_fps(const std::vector<Point>& pts, size_t k,
                                    size_t seed) {
  std::vector<size_t> sel{seed};
  while (sel.size() < k) {
    size_t best = pts.size();
    double best_d = -1;
    for (size_t i = 0; i < pts.size(); ++i) {
      if (std::find(sel.begin(), sel.end(), i) != sel.end()) continue;
      double mind = std::numeric_limits<double>::infinity();
      for (size_t s : sel) mind = std::min(mind, sqdist(pts[i], pts[s]));
      if (mind > best_d) {
        best_d = mind;
        best = i;
      }
    }
    sel.push_back(best);
  }
  return sel;
}

Scene two_object_scene() {
  Scene s;
  s.scene_id = "s0";
  for (int id = 0; id < 2; ++id) {
    ObjectCloud o;
    o.object_id = id;
    o.label = id == 0 ? "chair" : "table";
    for (int i = 0; i < 5; ++i)
      o.points.push_back({1.0 * i + id, 0.5 * id, 0.25 * i});
    o.recompute_centroid();
    s.objects.push_back(o);
  }
  return s;
}

}  // namespace

TEST_CASE("scene jsonl round trip") {
  const Scene s = two_object_scene();
  const auto path = std::filesystem::temp_directory_path() / "plm_scene.jsonl";
  save_scene_jsonl(s, path.string());
  const Scene loaded = load_scene(path.string(), SceneFormat::JsonLines);
  REQUIRE(loaded.objects.size() == 2);
  CHECK(loaded.scene_id == "s0");
  for (size_t i = 0; i < 2; ++i) {
    CHECK(loaded.objects[i].points.size() == 5);
    CHECK(loaded.objects[i].label == s.objects[i].label);
    for (int d = 0; d < 3; ++d)
      CHECK(loaded.objects[i].centroid[d] ==
            doctest::Approx(s.objects[i].centroid[d]).epsilon(1e-12));
  }
  std::filesystem::remove(path);
}

TEST_CASE("scene with no objects rejected") {
  const auto path = std::filesystem::temp_directory_path() / "plm_empty.jsonl";
  {
    std::ofstream out(path);
    out << R"({"scene_id":"empty"})" << "\n";
  }
  CHECK_THROWS_WITH_AS(load_scene(path.string(), SceneFormat::JsonLines),
                       doctest::Contains("has no objects"), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("duplicate object_id rejected with id in message") {
  const auto path = std::filesystem::temp_directory_path() / "plm_dup.jsonl";
  {
    std::ofstream out(path);
    out << R"({"scene_id":"d"})" << "\n"
        << R"({"object_id":3,"label":"a","points":[[0,0,0]]})" << "\n"
        << R"({"object_id":3,"label":"b","points":[[1,0,0]]})" << "\n";
  }
  CHECK_THROWS_WITH_AS(load_scene(path.string(), SceneFormat::JsonLines),
                       doctest::Contains("duplicate object_id 3"), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("parse failure names the line") {
  const auto path = std::filesystem::temp_directory_path() / "plm_bad.jsonl";
  {
    std::ofstream out(path);
    out << R"({"scene_id":"b"})" << "\n" << "{not json" << "\n";
  }
  CHECK_THROWS_WITH_AS(load_scene(path.string(), SceneFormat::JsonLines),
                       doctest::Contains(":2:"), DataError);
  std::filesystem::remove(path);
}

TEST_CASE("binary-xyz with sidecar index") {
  namespace fs = std::filesystem;
  const auto bin = fs::temp_directory_path() / "plm_scene.xyz";
  {
    std::ofstream out(bin, std::ios::binary);
    const float coords[] = {0, 0, 0, 1, 0, 0, 2, 0, 0, 5, 5, 5};
    out.write(reinterpret_cast<const char*>(coords), sizeof(coords));
  }
  {
    std::ofstream idx(bin.string() + ".idx");
    idx << "0,0,3\n1,3,1\n";
  }
  const Scene s = load_scene(bin.string(), SceneFormat::BinaryXyz);
  REQUIRE(s.objects.size() == 2);
  CHECK(s.objects[0].points.size() == 3);
  CHECK(s.objects[1].points.size() == 1);
  CHECK(s.objects[1].points[0].x == doctest::Approx(5.0));
  fs::remove(bin);
  fs::remove(bin.string() + ".idx");
}

TEST_CASE("align_to_centroid subtracts the pooled mean") {
  Scene s;
  s.scene_id = "a";
  ObjectCloud o;
  o.object_id = 0;
  o.label = "x";
  o.points = {{0, 0, 0}, {2, 0, 0}};
  o.recompute_centroid();
  s.objects.push_back(o);
  const Scene out = align_to_centroid(s);
  CHECK(out.objects[0].points[0].x == doctest::Approx(-1.0));
  CHECK(out.objects[0].points[1].x == doctest::Approx(1.0));

  SUBCASE("single point goes to origin") {
    Scene s1;
    s1.scene_id = "b";
    ObjectCloud o1;
    o1.object_id = 0;
    o1.label = "x";
    o1.points = {{1, 2, 3}};
    o1.recompute_centroid();
    s1.objects.push_back(o1);
    const Scene out1 = align_to_centroid(s1);
    CHECK(std::abs(out1.objects[0].points[0].x) < 1e-12);
    CHECK(std::abs(out1.objects[0].points[0].y) < 1e-12);
    CHECK(std::abs(out1.objects[0].points[0].z) < 1e-12);
  }

  SUBCASE("idempotence") {
    const Scene once = align_to_centroid(two_object_scene());
    const Scene twice = align_to_centroid(once);
    for (size_t i = 0; i < once.objects.size(); ++i)
      for (size_t p = 0; p < once.objects[i].points.size(); ++p) {
        CHECK(std::abs(once.objects[i].points[p].x -
                       twice.objects[i].points[p].x) < 1e-9);
        CHECK(std::abs(once.objects[i].points[p].y -
                       twice.objects[i].points[p].y) < 1e-9);
        CHECK(std::abs(once.objects[i].points[p].z -
                       twice.objects[i].points[p].z) < 1e-9);
      }
  }
}

TEST_CASE("fps collinear k=2 picks the max-min pair containing the seed") {
  const ObjectCloud c = cloud_from_xs({0, 1, 2, 3, 10});
  const ObjectCloud out = farthest_point_sample(c, 2, 0);
  REQUIRE(out.points.size() == 2);
  CHECK(out.points[0].x == doctest::Approx(0.0));
  CHECK(out.points[1].x == doctest::Approx(10.0));
}

TEST_CASE("fps k == n is a permutation of the input") {
  const ObjectCloud c = cloud_from_xs({0, 1, 2, 3, 10});
  const ObjectCloud out = farthest_point_sample(c, 5, 2);
  REQUIRE(out.points.size() == 5);
  std::vector<double> got, want;
  for (const auto& p : out.points) got.push_back(p.x);
  for (const auto& p : c.points) want.push_back(p.x);
  std::sort(got.begin(), got.end());
  std::sort(want.begin(), want.end());
  CHECK(got == want);
}

TEST_CASE("fps resolutions 8192 and 1024 on a 20000-point sphere") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd(0, 1);
  ObjectCloud c;
  c.object_id = 0;
  c.label = "sphere";
  for (int i = 0; i < 20000; ++i) {
    double x = nd(rng), y = nd(rng), z = nd(rng);
    const double r = std::sqrt(x * x + y * y + z * z);
    c.points.push_back({x / r, y / r, z / r});
  }
  c.recompute_centroid();
  CHECK(farthest_point_sample(c, 8192, 0).points.size() == 8192);
  CHECK(farthest_point_sample(c, 1024, 0).points.size() == 1024);
}

TEST_CASE("fps padding repeats points round-robin") {
  const ObjectCloud c = cloud_from_xs({1, 2});
  const ObjectCloud out = farthest_point_sample(c, 5, 0);
  REQUIRE(out.points.size() == 5);
  CHECK(out.points[0].x == 1);
  CHECK(out.points[1].x == 2);
  CHECK(out.points[2].x == 1);
  CHECK(out.points[4].x == 1);
}

TEST_CASE("fps matches brute force greedy on random clouds") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 25; ++trial) {
    ObjectCloud c;
    c.object_id = 0;
    c.label = "r";
    for (int i = 0; i < 30; ++i) c.points.push_back({u(rng), u(rng), u(rng)});
    c.recompute_centroid();
    for (size_t k : {2u, 3u, 5u}) {
      const auto sel = brute_force_fps(c.points, k, trial % 30);
      const ObjectCloud out = farthest_point_sample(c, k, trial % 30);
      REQUIRE(out.points.size() == k);
      for (size_t i = 0; i < k; ++i)
        CHECK(out.points[i].x == c.points[sel[i]].x);
    }
  }
}

TEST_CASE("fps selection is translation invariant") {
  Scene s = two_object_scene();
  const Scene aligned = align_to_centroid(s);
  const ObjectCloud a = farthest_point_sample(s.objects[0], 3, 1);
  const ObjectCloud b = farthest_point_sample(aligned.objects[0], 3, 1);
  // same selection indices -> same relative offsets
  for (size_t i = 1; i < a.points.size(); ++i) {
    CHECK(a.points[i].x - a.points[0].x ==
          doctest::Approx(b.points[i].x - b.points[0].x));
  }
}

TEST_CASE("normalize_object centers and scales to unit max radius") {
  ObjectCloud c;
  c.object_id = 0;
  c.label = "n";
  c.points = {{0, 0, 0}, {4, 0, 0}};
  c.recompute_centroid();
  const ObjectCloud out = normalize_object(c);
  CHECK(out.points[0].x == doctest::Approx(-1.0));
  CHECK(out.points[1].x == doctest::Approx(1.0));

  SUBCASE("degenerate repeated point skips scaling") {
    ObjectCloud d;
    d.object_id = 0;
    d.label = "d";
    d.points = {{3, 3, 3}, {3, 3, 3}};
    d.recompute_centroid();
    const ObjectCloud z = normalize_object(d);
    for (const auto& p : z.points) {
      CHECK(p.x == 0);
      CHECK(p.y == 0);
      CHECK(p.z == 0);
    }
  }

  SUBCASE("unit sphere sample keeps max radius 1") {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0, 1);
    ObjectCloud sph;
    sph.object_id = 0;
    sph.label = "s";
    for (int i = 0; i < 500; ++i) {
      double x = nd(rng), y = nd(rng), z = nd(rng);
      const double r = std::sqrt(x * x + y * y + z * z);
      sph.points.push_back({x / r, y / r, z / r});
    }
    sph.recompute_centroid();
    const ObjectCloud out2 = normalize_object(sph);
    double maxr = 0;
    for (const auto& p : out2.points)
      maxr = std::max(maxr, std::sqrt(p.x * p.x + p.y * p.y + p.z * p.z));
    CHECK(maxr == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("fps rejects empty cloud") {
  ObjectCloud c;
  CHECK_THROWS_AS(farthest_point_sample(c, 2, 0), DataError);
}
