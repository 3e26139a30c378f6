#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fsod/boxes.hpp"
#include "fsod/tensor.hpp"

namespace fsod {

enum class ShapeKind : uint8_t {
  kCircle = 0,
  kSquare,
  kTriangle,
  kCross,
  kRing,
  kBar,
  kL,
  kDiamond,
  kStar,
  kH,
  kT,
  kU
};
constexpr int kNumShapeKinds = 12;

enum class TextureKind : uint8_t { kSolid = 0, kStriped = 1 };
constexpr int kNumTextures = 2;
constexpr int kNumColorFamilies = 8;

struct ClassSpec {
  int class_id = 0;
  ShapeKind kind = ShapeKind::kCircle;
  TextureKind texture = TextureKind::kSolid;
  int color_family = 0;
};

struct SceneInstance {
  int class_id = 0;
  Box box;            // normalized cxcywh, fully inside the image
  double rotation = 0.0;
  double fill = 1.0;  // intensity scale in [0.75, 1]
};

struct SceneImage {
  int image_id = 0;
  Tensor raster;  // [3,S,S], values in [0,1], snapped to f32 grid
  std::vector<SceneInstance> instances;
};

enum class SplitRole : uint8_t { kBase = 0, kNovelSupport = 1, kTest = 2 };

struct DatasetSplit {
  SplitRole role = SplitRole::kBase;
  std::vector<SceneImage> images;
  std::vector<int> class_universe;
};

struct GenConfig {
  int num_base_classes = 8;
  int num_novel_classes = 4;
  int num_aux_classes = 12;
  int base_images = 320;
  int novel_pool_images = 160;
  int test_images = 200;
  int image_size = 32;
};

// One generated benchmark: three disjoint class sets (base / novel / aux for
// the reference backbone) and the base, novel-pool and test splits.
struct Benchmark {
  std::vector<ClassSpec> classes;  // indexed by class_id
  std::vector<int> base_class_ids;
  std::vector<int> novel_class_ids;
  std::vector<int> aux_class_ids;
  DatasetSplit base;
  DatasetSplit novel_pool;
  DatasetSplit test;
  int image_size = 32;
  uint64_t seed = 0;
};

// Reference to one annotated instance of the novel pool.
struct SupportRef {
  int image_index = 0;    // index into pool.images
  int instance_index = 0;
};

struct SupportSet {
  int k = 0;
  uint64_t seed = 0;
  std::vector<SupportRef> refs;  // exactly K per novel class
};

Benchmark gen_dataset(const GenConfig& cfg, uint64_t seed);

// Exactly K instances per novel class, drawn from a greedy minimal image
// cover; deterministic per seed.
SupportSet sample_kshot(const DatasetSplit& pool, const std::vector<int>& novel_class_ids, int k,
                        uint64_t seed);

// Anti-aliased raster of the given instances over a noise background.
// Values land on the f32 grid so persisted copies reload bitwise.
Tensor render_image(const std::vector<SceneInstance>& instances,
                    const std::vector<ClassSpec>& classes, int image_size, uint64_t seed);

// Single-instance classification images of the auxiliary classes, used to
// pre-train the frozen reference backbone.
std::vector<SceneImage> gen_aux_set(const Benchmark& bench, int images_per_class, uint64_t seed);

// Stable content hash over refs (image_id, instance_index) as a hex string.
std::string support_fingerprint(const DatasetSplit& pool, const SupportSet& support);

void save_benchmark(const std::string& dir, const Benchmark& bench);
Benchmark load_benchmark(const std::string& dir);
void save_support(const std::string& path, const SupportSet& support);
SupportSet load_support(const std::string& path);

}  // namespace fsod
