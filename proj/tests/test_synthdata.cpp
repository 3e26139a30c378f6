#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <map>
#include <set>

#include "fsod/rng.hpp"
#include "fsod/synthdata.hpp"

using namespace fsod;

namespace {

GenConfig small_config() {
  GenConfig cfg;
  cfg.base_images = 60;
  cfg.novel_pool_images = 120;
  cfg.test_images = 20;
  return cfg;
}

std::string temp_dir(const char* name) {
  std::string dir = (std::filesystem::temp_directory_path() / name).string();
  std::filesystem::remove_all(dir);
  return dir;
}

bool same_raster(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape &&
         std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0;
}

bool same_split(const DatasetSplit& a, const DatasetSplit& b) {
  if (a.role != b.role || a.class_universe != b.class_universe ||
      a.images.size() != b.images.size()) {
    return false;
  }
  for (size_t i = 0; i < a.images.size(); ++i) {
    const SceneImage& x = a.images[i];
    const SceneImage& y = b.images[i];
    if (x.image_id != y.image_id || !same_raster(x.raster, y.raster) ||
        x.instances.size() != y.instances.size()) {
      return false;
    }
    for (size_t j = 0; j < x.instances.size(); ++j) {
      const SceneInstance& p = x.instances[j];
      const SceneInstance& q = y.instances[j];
      if (p.class_id != q.class_id || p.rotation != q.rotation || p.fill != q.fill ||
          p.box.cx != q.box.cx || p.box.cy != q.box.cy || p.box.w != q.box.w ||
          p.box.h != q.box.h) {
        return false;
      }
    }
  }
  return true;
}

int count_class(const DatasetSplit& pool, const SupportSet& s, int class_id) {
  int n = 0;
  for (const SupportRef& r : s.refs) {
    if (pool.images[r.image_index].instances[r.instance_index].class_id == class_id) ++n;
  }
  return n;
}

}  // namespace

TEST_CASE("generation is deterministic per seed") {
  GenConfig cfg = small_config();
  Benchmark a = gen_dataset(cfg, 42);
  Benchmark b = gen_dataset(cfg, 42);
  CHECK(same_split(a.base, b.base));
  CHECK(same_split(a.novel_pool, b.novel_pool));
  CHECK(same_split(a.test, b.test));

  Benchmark c = gen_dataset(cfg, 43);
  CHECK_FALSE(same_split(a.base, c.base));
}

TEST_CASE("class partition is disjoint and splits respect it") {
  Benchmark bench = gen_dataset(small_config(), 7);
  std::set<int> base(bench.base_class_ids.begin(), bench.base_class_ids.end());
  std::set<int> novel(bench.novel_class_ids.begin(), bench.novel_class_ids.end());
  std::set<int> aux(bench.aux_class_ids.begin(), bench.aux_class_ids.end());
  CHECK(base.size() == 8);
  CHECK(novel.size() == 4);
  CHECK(aux.size() == 12);
  for (int id : novel) {
    CHECK(base.count(id) == 0);
    CHECK(aux.count(id) == 0);
  }
  for (int id : base) CHECK(aux.count(id) == 0);

  for (const SceneImage& img : bench.base.images) {
    for (const SceneInstance& inst : img.instances) CHECK(base.count(inst.class_id) == 1);
  }
  for (const SceneImage& img : bench.novel_pool.images) {
    for (const SceneInstance& inst : img.instances) CHECK(novel.count(inst.class_id) == 1);
  }
  for (const SceneImage& img : bench.test.images) {
    for (const SceneInstance& inst : img.instances) CHECK(novel.count(inst.class_id) == 1);
  }
}

TEST_CASE("scene composition stays within contract") {
  GenConfig cfg = small_config();
  cfg.base_images = 500;
  Benchmark bench = gen_dataset(cfg, 11);
  std::map<int, int> histogram;
  for (const SceneImage& img : bench.base.images) {
    int n = static_cast<int>(img.instances.size());
    CHECK(n >= 1);
    CHECK(n <= 4);
    ++histogram[n];
    for (const SceneInstance& inst : img.instances) {
      CHECK(inst.box.cx - inst.box.w / 2 >= 0.0);
      CHECK(inst.box.cx + inst.box.w / 2 <= 1.0);
      CHECK(inst.box.cy - inst.box.h / 2 >= 0.0);
      CHECK(inst.box.cy + inst.box.h / 2 <= 1.0);
      CHECK(inst.fill >= 0.75);
      CHECK(inst.fill <= 1.0);
    }
    CHECK(img.raster.shape == Shape{3, 32, 32});
    for (double v : img.raster.v) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  // Crowding can trim the largest scenes, but every target count must occur.
  for (int n = 1; n <= 4; ++n) CHECK(histogram[n] >= 20);
}

TEST_CASE("rendered shape mass concentrates inside its box") {
  std::vector<ClassSpec> classes = {ClassSpec{0, ShapeKind::kSquare, TextureKind::kSolid, 0}};
  SceneInstance inst;
  inst.class_id = 0;
  inst.box = Box{0.5, 0.5, 0.5, 0.5};
  inst.rotation = 0.0;
  inst.fill = 1.0;
  Tensor img = render_image({inst}, classes, 32, 99);

  // Red family: channel 0 carries 0.90 on the square vs noise in [0.05, 0.10].
  double center = 0.0;
  for (int y = 14; y < 18; ++y) {
    for (int x = 14; x < 18; ++x) center += img.at3(0, y, x);
  }
  center /= 16.0;
  double bg = 0.0;
  int nbg = 0;
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      if (y >= 6 && y < 26 && x >= 6 && x < 26) continue;
      bg += img.at3(0, y, x);
      ++nbg;
    }
  }
  bg /= nbg;
  CHECK(center >= 5.0 * bg);
}

TEST_CASE("render is deterministic and instance mass stays inside the box") {
  Benchmark bench = gen_dataset(small_config(), 5);
  const SceneImage& probe = bench.base.images.front();
  Tensor again = render_image(probe.instances, bench.classes, 32, derive_seed(derive_seed(5, 1), 1));
  CHECK(same_raster(probe.raster, again));

  int audited = 0;
  for (int i = 0; i < 20; ++i) {
    const SceneImage& img = bench.base.images[i];
    if (img.instances.size() != 1) continue;  // isolate one shape's contribution
    const SceneInstance& inst = img.instances[0];
    uint64_t rseed = derive_seed(derive_seed(5, 1), 2ull * i + 1);
    Tensor with = render_image(img.instances, bench.classes, 32, rseed);
    Tensor without = render_image({}, bench.classes, 32, rseed);
    double inside = 0.0, total = 0.0;
    int xlo = static_cast<int>(std::floor((inst.box.cx - inst.box.w / 2) * 32)) - 1;
    int xhi = static_cast<int>(std::ceil((inst.box.cx + inst.box.w / 2) * 32)) + 1;
    int ylo = static_cast<int>(std::floor((inst.box.cy - inst.box.h / 2) * 32)) - 1;
    int yhi = static_cast<int>(std::ceil((inst.box.cy + inst.box.h / 2) * 32)) + 1;
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
          double d = std::abs(with.at3(c, y, x) - without.at3(c, y, x));
          total += d;
          if (x >= xlo && x <= xhi && y >= ylo && y <= yhi) inside += d;
        }
      }
    }
    REQUIRE(total > 0.5);
    CHECK(inside >= 0.90 * total);
    ++audited;
  }
  CHECK(audited >= 3);
}

TEST_CASE("k-shot sampling hits each quota exactly") {
  Benchmark bench = gen_dataset(small_config(), 21);
  for (int k : {1, 2, 3, 5, 10, 30}) {
    SupportSet s = sample_kshot(bench.novel_pool, bench.novel_class_ids, k, 77);
    CHECK(s.k == k);
    CHECK(static_cast<int>(s.refs.size()) == k * 4);
    std::set<std::pair<int, int>> seen;
    for (const SupportRef& r : s.refs) {
      REQUIRE(r.image_index >= 0);
      REQUIRE(r.image_index < static_cast<int>(bench.novel_pool.images.size()));
      const SceneImage& img = bench.novel_pool.images[r.image_index];
      REQUIRE(r.instance_index >= 0);
      REQUIRE(r.instance_index < static_cast<int>(img.instances.size()));
      CHECK(seen.insert({r.image_index, r.instance_index}).second);
    }
    for (int id : bench.novel_class_ids) CHECK(count_class(bench.novel_pool, s, id) == k);

    SupportSet s2 = sample_kshot(bench.novel_pool, bench.novel_class_ids, k, 77);
    CHECK(s2.refs.size() == s.refs.size());
    for (size_t i = 0; i < s.refs.size(); ++i) {
      CHECK(s2.refs[i].image_index == s.refs[i].image_index);
      CHECK(s2.refs[i].instance_index == s.refs[i].instance_index);
    }
  }
}

TEST_CASE("k-shot sampling rejects impossible requests") {
  Benchmark bench = gen_dataset(small_config(), 3);
  CHECK_THROWS_WITH_AS(sample_kshot(bench.novel_pool, bench.novel_class_ids, 0, 1),
                       doctest::Contains("K must be >= 1"), std::runtime_error);

  DatasetSplit tiny;
  tiny.role = SplitRole::kNovelSupport;
  tiny.class_universe = {9};
  SceneImage img;
  img.image_id = 0;
  img.instances = {SceneInstance{9, Box{0.5, 0.5, 0.4, 0.4}, 0.0, 1.0},
                   SceneInstance{9, Box{0.2, 0.2, 0.2, 0.2}, 0.0, 1.0},
                   SceneInstance{9, Box{0.8, 0.8, 0.2, 0.2}, 0.0, 1.0}};
  tiny.images.push_back(img);
  CHECK_THROWS_WITH_AS(sample_kshot(tiny, {9}, 5, 1), doctest::Contains("class 9"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(sample_kshot(tiny, {9}, 5, 1), doctest::Contains("only 3"),
                       std::runtime_error);
}

TEST_CASE("auxiliary set isolates one labeled instance per image") {
  Benchmark bench = gen_dataset(small_config(), 13);
  std::vector<SceneImage> aux = gen_aux_set(bench, 3, 55);
  CHECK(aux.size() == bench.aux_class_ids.size() * 3);
  std::map<int, int> per_class;
  for (const SceneImage& img : aux) {
    REQUIRE(img.instances.size() == 1);
    ++per_class[img.instances[0].class_id];
    CHECK(img.raster.shape == Shape{3, 32, 32});
  }
  for (int id : bench.aux_class_ids) CHECK(per_class[id] == 3);
  std::set<int> novel(bench.novel_class_ids.begin(), bench.novel_class_ids.end());
  std::set<int> base(bench.base_class_ids.begin(), bench.base_class_ids.end());
  for (const auto& [id, n] : per_class) {
    CHECK(novel.count(id) == 0);
    CHECK(base.count(id) == 0);
  }

  std::vector<SceneImage> again = gen_aux_set(bench, 3, 55);
  for (size_t i = 0; i < aux.size(); ++i) CHECK(same_raster(aux[i].raster, again[i].raster));
}

TEST_CASE("benchmark persistence reloads bitwise") {
  GenConfig cfg = small_config();
  cfg.base_images = 12;
  cfg.novel_pool_images = 12;
  cfg.test_images = 6;
  Benchmark bench = gen_dataset(cfg, 31);
  std::string dir = temp_dir("fsod_synth_roundtrip");
  save_benchmark(dir, bench);
  Benchmark back = load_benchmark(dir);
  CHECK(back.seed == bench.seed);
  CHECK(back.image_size == bench.image_size);
  CHECK(back.base_class_ids == bench.base_class_ids);
  CHECK(back.novel_class_ids == bench.novel_class_ids);
  CHECK(back.aux_class_ids == bench.aux_class_ids);
  CHECK(back.classes.size() == bench.classes.size());
  for (size_t i = 0; i < bench.classes.size(); ++i) {
    CHECK(back.classes[i].class_id == bench.classes[i].class_id);
    CHECK(back.classes[i].kind == bench.classes[i].kind);
    CHECK(back.classes[i].texture == bench.classes[i].texture);
    CHECK(back.classes[i].color_family == bench.classes[i].color_family);
  }
  CHECK(same_split(back.base, bench.base));
  CHECK(same_split(back.novel_pool, bench.novel_pool));
  CHECK(same_split(back.test, bench.test));
  std::filesystem::remove_all(dir);
}

TEST_CASE("support persistence and fingerprint are stable") {
  GenConfig cfg = small_config();
  Benchmark bench = gen_dataset(cfg, 17);
  SupportSet s = sample_kshot(bench.novel_pool, bench.novel_class_ids, 5, 3);
  std::string path = (std::filesystem::temp_directory_path() / "fsod_support_rt.json").string();
  save_support(path, s);
  SupportSet back = load_support(path);
  CHECK(back.k == s.k);
  CHECK(back.seed == s.seed);
  REQUIRE(back.refs.size() == s.refs.size());
  for (size_t i = 0; i < s.refs.size(); ++i) {
    CHECK(back.refs[i].image_index == s.refs[i].image_index);
    CHECK(back.refs[i].instance_index == s.refs[i].instance_index);
  }
  CHECK(support_fingerprint(bench.novel_pool, back) == support_fingerprint(bench.novel_pool, s));

  SupportSet other = sample_kshot(bench.novel_pool, bench.novel_class_ids, 5, 4);
  bool same_refs = other.refs.size() == s.refs.size();
  if (same_refs) {
    for (size_t i = 0; i < s.refs.size(); ++i) {
      same_refs = same_refs && other.refs[i].image_index == s.refs[i].image_index &&
                  other.refs[i].instance_index == s.refs[i].instance_index;
    }
  }
  if (!same_refs) {
    CHECK(support_fingerprint(bench.novel_pool, other) != support_fingerprint(bench.novel_pool, s));
  }
  std::filesystem::remove(path);
}
