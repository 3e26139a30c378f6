#include "fsod/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "fsod/rng.hpp"
#include "json.hpp"

namespace fsod {

namespace {

using nlohmann::json;

constexpr double kPi = 3.14159265358979323846;

// Base RGB per color family; kept bright so shapes dominate the noise floor.
constexpr double kColors[kNumColorFamilies][3] = {
    {0.90, 0.15, 0.15},  // red
    {0.15, 0.85, 0.20},  // green
    {0.15, 0.25, 0.90},  // blue
    {0.90, 0.85, 0.15},  // yellow
    {0.85, 0.20, 0.80},  // magenta
    {0.15, 0.80, 0.85},  // cyan
    {0.95, 0.55, 0.10},  // orange
    {0.85, 0.80, 0.70},  // cream
};

// Every kind fits inside radius 0.85 of the local frame, so any rotation
// keeps the shape inside its box.
bool shape_inside(ShapeKind kind, double u, double v) {
  double r2 = u * u + v * v;
  if (r2 > 0.85 * 0.85) return false;
  switch (kind) {
    case ShapeKind::kCircle:
      return r2 <= 0.72 * 0.72;
    case ShapeKind::kSquare:
      return std::abs(u) <= 0.60 && std::abs(v) <= 0.60;
    case ShapeKind::kTriangle: {
      // Equilateral, apex up (v is image-down).
      double ax = 0.0, ay = -0.85;
      double bx = -0.736, by = 0.425;
      double cx = 0.736, cy = 0.425;
      auto side = [&](double x0, double y0, double x1, double y1) {
        return (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0);
      };
      double s1 = side(ax, ay, bx, by), s2 = side(bx, by, cx, cy), s3 = side(cx, cy, ax, ay);
      return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
    }
    case ShapeKind::kCross:
      return (std::abs(u) <= 0.26 && std::abs(v) <= 0.80) ||
             (std::abs(v) <= 0.26 && std::abs(u) <= 0.80);
    case ShapeKind::kRing:
      return r2 >= 0.42 * 0.42 && r2 <= 0.78 * 0.78;
    case ShapeKind::kBar:
      return std::abs(u) <= 0.80 && std::abs(v) <= 0.26;
    case ShapeKind::kL:
      return (u >= -0.60 && u <= -0.16 && std::abs(v) <= 0.60) ||
             (std::abs(u) <= 0.60 && v >= 0.22 && v <= 0.60);
    case ShapeKind::kDiamond:
      return std::abs(u) + std::abs(v) <= 0.80;
    case ShapeKind::kStar: {
      double theta = std::atan2(v, u);
      double radius = 0.32 + 0.50 * (0.5 + 0.5 * std::cos(5.0 * (theta - kPi / 2.0)));
      return r2 <= radius * radius;
    }
    case ShapeKind::kH:
      return (u >= -0.60 && u <= -0.32 && std::abs(v) <= 0.60) ||
             (u >= 0.32 && u <= 0.60 && std::abs(v) <= 0.60) ||
             (std::abs(u) <= 0.60 && std::abs(v) <= 0.14);
    case ShapeKind::kT:
      return (std::abs(u) <= 0.60 && v >= -0.60 && v <= -0.32) ||
             (std::abs(u) <= 0.14 && std::abs(v) <= 0.60);
    case ShapeKind::kU:
      return (u >= -0.60 && u <= -0.32 && std::abs(v) <= 0.60) ||
             (u >= 0.32 && u <= 0.60 && std::abs(v) <= 0.60) ||
             (std::abs(u) <= 0.60 && v >= 0.32 && v <= 0.60);
  }
  return false;
}

double stripe_factor(double u, double v) {
  int band = static_cast<int>(std::floor((u + v + 4.0) * 2.5));
  return band % 2 == 0 ? 1.0 : 0.35;
}

double snap_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

DatasetSplit gen_split(SplitRole role, const std::vector<int>& class_ids, int n_images,
                       int id_base, int image_size, uint64_t split_seed,
                       const std::vector<ClassSpec>& classes) {
  DatasetSplit split;
  split.role = role;
  split.class_universe = class_ids;
  split.images.reserve(n_images);
  for (int i = 0; i < n_images; ++i) {
    RngStream rng(derive_seed(split_seed, 2ull * i));
    int want = 1 + rng.uniform_int(4);
    std::vector<SceneInstance> insts;
    for (int j = 0; j < want; ++j) {
      bool placed = false;
      for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
        Box b;
        b.w = rng.uniform(0.20, 0.55);
        b.h = rng.uniform(0.20, 0.55);
        b.cx = rng.uniform(b.w / 2 + 0.02, 1.0 - b.w / 2 - 0.02);
        b.cy = rng.uniform(b.h / 2 + 0.02, 1.0 - b.h / 2 - 0.02);
        bool clear = true;
        for (const SceneInstance& other : insts) {
          if (iou(b, other.box) >= 0.1) {
            clear = false;
            break;
          }
        }
        if (!clear) continue;
        SceneInstance inst;
        inst.class_id = class_ids[rng.uniform_int(static_cast<int>(class_ids.size()))];
        inst.box = b;
        inst.rotation = rng.uniform(0.0, 2.0 * kPi);
        inst.fill = rng.uniform(0.75, 1.0);
        insts.push_back(inst);
        placed = true;
      }
      if (!placed) break;  // crowded image, settle for fewer instances
    }
    SceneImage img;
    img.image_id = id_base + i;
    img.instances = std::move(insts);
    img.raster = render_image(img.instances, classes, image_size,
                              derive_seed(split_seed, 2ull * i + 1));
    split.images.push_back(std::move(img));
  }
  return split;
}

int kind_int(ShapeKind k) { return static_cast<int>(k); }
int tex_int(TextureKind t) { return static_cast<int>(t); }

}  // namespace

Tensor render_image(const std::vector<SceneInstance>& instances,
                    const std::vector<ClassSpec>& classes, int image_size, uint64_t seed) {
  int S = image_size;
  RngStream rng(seed);
  Tensor img({3, S, S});
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) img.at3(c, y, x) = 0.05 + 0.05 * rng.uniform();
    }
  }
  for (const SceneInstance& inst : instances) {
    if (inst.class_id < 0 || inst.class_id >= static_cast<int>(classes.size())) {
      throw std::runtime_error("render: instance class " + std::to_string(inst.class_id) +
                               " has no spec");
    }
    const ClassSpec& spec = classes[inst.class_id];
    const double* color = kColors[spec.color_family % kNumColorFamilies];
    double cosr = std::cos(inst.rotation), sinr = std::sin(inst.rotation);
    double hw = inst.box.w / 2.0, hh = inst.box.h / 2.0;
    int xlo = std::max(0, static_cast<int>(std::floor((inst.box.cx - hw) * S)) - 1);
    int xhi = std::min(S - 1, static_cast<int>(std::ceil((inst.box.cx + hw) * S)) + 1);
    int ylo = std::max(0, static_cast<int>(std::floor((inst.box.cy - hh) * S)) - 1);
    int yhi = std::min(S - 1, static_cast<int>(std::ceil((inst.box.cy + hh) * S)) + 1);
    for (int y = ylo; y <= yhi; ++y) {
      for (int x = xlo; x <= xhi; ++x) {
        int inside_count = 0;
        double tex_sum = 0.0;
        for (int sy = 0; sy < 3; ++sy) {
          for (int sx = 0; sx < 3; ++sx) {
            double py = (y + (sy + 0.5) / 3.0) / S;
            double px = (x + (sx + 0.5) / 3.0) / S;
            double u = (px - inst.box.cx) / hw;
            double v = (py - inst.box.cy) / hh;
            double ur = cosr * u + sinr * v;
            double vr = -sinr * u + cosr * v;
            if (!shape_inside(spec.kind, ur, vr)) continue;
            ++inside_count;
            tex_sum += spec.texture == TextureKind::kStriped ? stripe_factor(ur, vr) : 1.0;
          }
        }
        if (inside_count == 0) continue;
        double alpha = inside_count / 9.0;
        double tex = tex_sum / inside_count;
        for (int c = 0; c < 3; ++c) {
          double& px = img.at3(c, y, x);
          px = px * (1.0 - alpha) + color[c] * inst.fill * tex * alpha;
        }
      }
    }
  }
  for (double& x : img.v) x = snap_f32(std::clamp(x, 0.0, 1.0));
  return img;
}

Benchmark gen_dataset(const GenConfig& cfg, uint64_t seed) {
  int total = cfg.num_base_classes + cfg.num_novel_classes + cfg.num_aux_classes;
  int capacity = kNumShapeKinds * kNumTextures * kNumColorFamilies;
  // The id -> (kind, texture, color) assignment below repeats after 24 ids.
  int assignable = 24;
  if (cfg.num_base_classes < 1 || cfg.num_novel_classes < 1 || cfg.num_aux_classes < 0) {
    throw std::runtime_error("gen_dataset: class counts must be positive");
  }
  if (total > assignable || total > capacity) {
    throw std::runtime_error("gen_dataset: " + std::to_string(total) +
                             " classes requested but only " + std::to_string(assignable) +
                             " distinct (kind, texture, color) combinations are assignable");
  }
  Benchmark bench;
  bench.image_size = cfg.image_size;
  bench.seed = seed;
  bench.classes.reserve(total);
  for (int c = 0; c < total; ++c) {
    bench.classes.push_back(ClassSpec{c, static_cast<ShapeKind>(c % kNumShapeKinds),
                                      static_cast<TextureKind>((c / kNumShapeKinds) % kNumTextures),
                                      c % kNumColorFamilies});
  }
  for (int c = 0; c < cfg.num_base_classes; ++c) bench.base_class_ids.push_back(c);
  for (int c = 0; c < cfg.num_novel_classes; ++c) {
    bench.novel_class_ids.push_back(cfg.num_base_classes + c);
  }
  for (int c = 0; c < cfg.num_aux_classes; ++c) {
    bench.aux_class_ids.push_back(cfg.num_base_classes + cfg.num_novel_classes + c);
  }
  bench.base = gen_split(SplitRole::kBase, bench.base_class_ids, cfg.base_images, 0,
                         cfg.image_size, derive_seed(seed, 1), bench.classes);
  bench.novel_pool = gen_split(SplitRole::kNovelSupport, bench.novel_class_ids,
                               cfg.novel_pool_images, 10000, cfg.image_size,
                               derive_seed(seed, 2), bench.classes);
  bench.test = gen_split(SplitRole::kTest, bench.novel_class_ids, cfg.test_images, 20000,
                         cfg.image_size, derive_seed(seed, 3), bench.classes);
  return bench;
}

SupportSet sample_kshot(const DatasetSplit& pool, const std::vector<int>& novel_class_ids, int k,
                        uint64_t seed) {
  if (k < 1) throw std::runtime_error("sample_kshot: K must be >= 1");
  std::vector<int> need(novel_class_ids.size(), k);
  auto class_slot = [&](int class_id) -> int {
    for (size_t i = 0; i < novel_class_ids.size(); ++i) {
      if (novel_class_ids[i] == class_id) return static_cast<int>(i);
    }
    return -1;
  };
  std::vector<int> available(novel_class_ids.size(), 0);
  for (const SceneImage& img : pool.images) {
    for (const SceneInstance& inst : img.instances) {
      int slot = class_slot(inst.class_id);
      if (slot >= 0) ++available[slot];
    }
  }
  for (size_t i = 0; i < novel_class_ids.size(); ++i) {
    if (available[i] < k) {
      throw std::runtime_error("sample_kshot: class " + std::to_string(novel_class_ids[i]) +
                               " has only " + std::to_string(available[i]) + " instances for K=" +
                               std::to_string(k));
    }
  }
  RngStream rng(seed);
  std::vector<int> order(pool.images.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
    std::swap(order[i], order[rng.uniform_int(i + 1)]);
  }
  SupportSet support;
  support.k = k;
  support.seed = seed;
  std::vector<char> taken(pool.images.size(), 0);
  auto total_need = [&]() {
    int s = 0;
    for (int n : need) s += n;
    return s;
  };
  while (total_need() > 0) {
    int best = -1, best_gain = 0;
    for (int idx : order) {
      if (taken[idx]) continue;
      std::vector<int> cap = need;
      int gain = 0;
      for (const SceneInstance& inst : pool.images[idx].instances) {
        int slot = class_slot(inst.class_id);
        if (slot >= 0 && cap[slot] > 0) {
          --cap[slot];
          ++gain;
        }
      }
      if (gain > best_gain) {
        best_gain = gain;
        best = idx;
      }
    }
    if (best < 0) {
      throw std::runtime_error("sample_kshot: quota unreachable (pool audit bug)");
    }
    taken[best] = 1;
    const SceneImage& img = pool.images[best];
    for (int j = 0; j < static_cast<int>(img.instances.size()); ++j) {
      int slot = class_slot(img.instances[j].class_id);
      if (slot >= 0 && need[slot] > 0) {
        --need[slot];
        support.refs.push_back(SupportRef{best, j});
      }
    }
  }
  std::sort(support.refs.begin(), support.refs.end(), [](const SupportRef& a, const SupportRef& b) {
    if (a.image_index != b.image_index) return a.image_index < b.image_index;
    return a.instance_index < b.instance_index;
  });
  return support;
}

std::vector<SceneImage> gen_aux_set(const Benchmark& bench, int images_per_class, uint64_t seed) {
  std::vector<SceneImage> out;
  out.reserve(bench.aux_class_ids.size() * images_per_class);
  int idx = 0;
  for (int class_id : bench.aux_class_ids) {
    for (int i = 0; i < images_per_class; ++i, ++idx) {
      RngStream rng(derive_seed(seed, 2ull * idx));
      SceneInstance inst;
      inst.class_id = class_id;
      inst.box.w = rng.uniform(0.45, 0.80);
      inst.box.h = rng.uniform(0.45, 0.80);
      inst.box.cx = rng.uniform(inst.box.w / 2 + 0.05, 1.0 - inst.box.w / 2 - 0.05);
      inst.box.cy = rng.uniform(inst.box.h / 2 + 0.05, 1.0 - inst.box.h / 2 - 0.05);
      inst.rotation = rng.uniform(0.0, 2.0 * kPi);
      inst.fill = rng.uniform(0.75, 1.0);
      SceneImage img;
      img.image_id = 30000 + idx;
      img.instances = {inst};
      img.raster = render_image(img.instances, bench.classes, bench.image_size,
                                derive_seed(seed, 2ull * idx + 1));
      out.push_back(std::move(img));
    }
  }
  return out;
}

std::string support_fingerprint(const DatasetSplit& pool, const SupportSet& support) {
  uint64_t h = 1469598103934665603ull;
  auto mix = [&h](uint64_t x) {
    for (int i = 0; i < 8; ++i) {
      h ^= (x >> (8 * i)) & 0xFF;
      h *= 1099511628211ull;
    }
  };
  mix(static_cast<uint64_t>(support.k));
  for (const SupportRef& r : support.refs) {
    mix(static_cast<uint64_t>(pool.images[r.image_index].image_id));
    mix(static_cast<uint64_t>(r.instance_index));
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

namespace {

json split_to_json(const DatasetSplit& split) {
  json imgs = json::array();
  for (const SceneImage& img : split.images) {
    json anns = json::array();
    for (const SceneInstance& inst : img.instances) {
      anns.push_back({{"category_id", inst.class_id},
                      {"bbox", {inst.box.cx, inst.box.cy, inst.box.w, inst.box.h}},
                      {"rotation", inst.rotation},
                      {"fill", inst.fill}});
    }
    imgs.push_back({{"image_id", img.image_id}, {"instances", anns}});
  }
  return json{{"role", static_cast<int>(split.role)},
              {"class_universe", split.class_universe},
              {"images", imgs}};
}

void split_from_json(const json& j, DatasetSplit& split) {
  split.role = static_cast<SplitRole>(j.at("role").get<int>());
  split.class_universe = j.at("class_universe").get<std::vector<int>>();
  for (const json& ji : j.at("images")) {
    SceneImage img;
    img.image_id = ji.at("image_id").get<int>();
    for (const json& ja : ji.at("instances")) {
      SceneInstance inst;
      inst.class_id = ja.at("category_id").get<int>();
      auto bb = ja.at("bbox").get<std::vector<double>>();
      inst.box = Box{bb[0], bb[1], bb[2], bb[3]};
      inst.rotation = ja.at("rotation").get<double>();
      inst.fill = ja.at("fill").get<double>();
      img.instances.push_back(inst);
    }
    split.images.push_back(std::move(img));
  }
}

void write_rasters(const std::string& path, const DatasetSplit& split) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("dataset: cannot write " + path);
  for (const SceneImage& img : split.images) {
    uint32_t rank = static_cast<uint32_t>(img.raster.shape.size());
    os.write(reinterpret_cast<const char*>(&rank), 4);
    for (int d : img.raster.shape) {
      uint32_t u = static_cast<uint32_t>(d);
      os.write(reinterpret_cast<const char*>(&u), 4);
    }
    std::vector<float> buf(img.raster.v.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(img.raster.v[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("dataset: write failed for " + path);
}

void read_rasters(const std::string& path, DatasetSplit& split) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("dataset: cannot open " + path);
  for (SceneImage& img : split.images) {
    uint32_t rank = 0;
    if (!is.read(reinterpret_cast<char*>(&rank), 4)) {
      throw std::runtime_error("dataset: truncated raster blob " + path);
    }
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) {
      uint32_t u = 0;
      if (!is.read(reinterpret_cast<char*>(&u), 4)) {
        throw std::runtime_error("dataset: truncated raster blob " + path);
      }
      shape[d] = static_cast<int>(u);
    }
    Tensor t(shape);
    std::vector<float> buf(t.v.size());
    if (!is.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)))) {
      throw std::runtime_error("dataset: truncated raster blob " + path);
    }
    for (size_t i = 0; i < buf.size(); ++i) t.v[i] = static_cast<double>(buf[i]);
    img.raster = std::move(t);
  }
}

}  // namespace

void save_benchmark(const std::string& dir, const Benchmark& bench) {
  std::filesystem::create_directories(dir);
  json classes = json::array();
  for (const ClassSpec& c : bench.classes) {
    classes.push_back({{"class_id", c.class_id},
                       {"kind", kind_int(c.kind)},
                       {"texture", tex_int(c.texture)},
                       {"color_family", c.color_family}});
  }
  json j{{"image_size", bench.image_size},
         {"seed", bench.seed},
         {"classes", classes},
         {"base_class_ids", bench.base_class_ids},
         {"novel_class_ids", bench.novel_class_ids},
         {"aux_class_ids", bench.aux_class_ids},
         {"base", split_to_json(bench.base)},
         {"novel_pool", split_to_json(bench.novel_pool)},
         {"test", split_to_json(bench.test)}};
  std::ofstream os(dir + "/manifest.json", std::ios::trunc);
  if (!os) throw std::runtime_error("dataset: cannot write " + dir + "/manifest.json");
  os << j.dump(1) << "\n";
  write_rasters(dir + "/base.rasters.bin", bench.base);
  write_rasters(dir + "/novel_pool.rasters.bin", bench.novel_pool);
  write_rasters(dir + "/test.rasters.bin", bench.test);
}

Benchmark load_benchmark(const std::string& dir) {
  std::ifstream is(dir + "/manifest.json");
  if (!is) throw std::runtime_error("dataset: cannot open " + dir + "/manifest.json");
  json j = json::parse(is);
  Benchmark bench;
  bench.image_size = j.at("image_size").get<int>();
  bench.seed = j.at("seed").get<uint64_t>();
  for (const json& jc : j.at("classes")) {
    bench.classes.push_back(ClassSpec{jc.at("class_id").get<int>(),
                                      static_cast<ShapeKind>(jc.at("kind").get<int>()),
                                      static_cast<TextureKind>(jc.at("texture").get<int>()),
                                      jc.at("color_family").get<int>()});
  }
  bench.base_class_ids = j.at("base_class_ids").get<std::vector<int>>();
  bench.novel_class_ids = j.at("novel_class_ids").get<std::vector<int>>();
  bench.aux_class_ids = j.at("aux_class_ids").get<std::vector<int>>();
  split_from_json(j.at("base"), bench.base);
  split_from_json(j.at("novel_pool"), bench.novel_pool);
  split_from_json(j.at("test"), bench.test);
  read_rasters(dir + "/base.rasters.bin", bench.base);
  read_rasters(dir + "/novel_pool.rasters.bin", bench.novel_pool);
  read_rasters(dir + "/test.rasters.bin", bench.test);
  return bench;
}

void save_support(const std::string& path, const SupportSet& support) {
  json refs = json::array();
  for (const SupportRef& r : support.refs) {
    refs.push_back({r.image_index, r.instance_index});
  }
  json j{{"k", support.k}, {"seed", support.seed}, {"refs", refs}};
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("support: cannot write " + path);
  os << j.dump(1) << "\n";
}

SupportSet load_support(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("support: cannot open " + path);
  json j = json::parse(is);
  SupportSet s;
  s.k = j.at("k").get<int>();
  s.seed = j.at("seed").get<uint64_t>();
  for (const json& jr : j.at("refs")) {
    s.refs.push_back(SupportRef{jr.at(0).get<int>(), jr.at(1).get<int>()});
  }
  return s;
}

}  // namespace fsod
