#include "fsod/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include "json.hpp"

#include "fsod/optim.hpp"
#include "fsod/rng.hpp"

namespace fsod {

using json = nlohmann::json;

void ReferenceTrainConfig::validate() const {
  backbone.validate();
  if (roi_output_size < 1) throw std::runtime_error("reference config: roi_output_size must be >= 1");
  if (images_per_class < 1) throw std::runtime_error("reference config: images_per_class must be >= 1");
  if (batch_size < 1) throw std::runtime_error("reference config: batch_size must be >= 1");
  if (max_steps < 1) throw std::runtime_error("reference config: max_steps must be >= 1");
  if (!(learning_rate > 0.0)) throw std::runtime_error("reference config: learning_rate must be > 0");
  if (!(target_accuracy > 0.0 && target_accuracy <= 1.0)) {
    throw std::runtime_error("reference config: target_accuracy must be in (0, 1]");
  }
}

namespace {

Tensor uniform_init(Shape s, int fan_in, RngStream& rng) {
  Tensor t(std::move(s));
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& x : t.v) x = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

ReferenceBackbone::ReferenceBackbone(ReferenceTrainConfig cfg, std::vector<int> class_ids,
                                     uint64_t seed)
    : cfg_(std::move(cfg)), class_ids_(std::move(class_ids)) {
  cfg_.validate();
  if (class_ids_.empty()) throw std::runtime_error("reference backbone: no training classes");
  RngStream rng(derive_seed(seed, 0x33));
  int nb = static_cast<int>(cfg_.backbone.block_channel_widths.size());
  int in_ch = 3;
  for (int b = 0; b < nb; ++b) {
    int out_ch = cfg_.backbone.block_channel_widths[b];
    std::string base = "backbone.b" + std::to_string(b + 1);
    params_.create(base + ".c1.w", uniform_init({in_ch * 9, out_ch}, in_ch * 9, rng),
                   ParamGroup::kOther);
    params_.create(base + ".c1.b", Tensor::zeros({out_ch}), ParamGroup::kOther);
    params_.create(base + ".c2.w", uniform_init({out_ch * 9, out_ch}, out_ch * 9, rng),
                   ParamGroup::kOther);
    params_.create(base + ".c2.b", Tensor::zeros({out_ch}), ParamGroup::kOther);
    in_ch = out_ch;
  }
  int n = static_cast<int>(class_ids_.size());
  params_.create("cls.ln.g", Tensor::full({in_ch}, 1.0), ParamGroup::kOther);
  params_.create("cls.ln.b", Tensor::zeros({in_ch}), ParamGroup::kOther);
  params_.create("cls.w", uniform_init({in_ch, n}, in_ch, rng), ParamGroup::kOther);
  params_.create("cls.b", Tensor::zeros({n}), ParamGroup::kOther);
}

Var ReferenceBackbone::map_forward(Tape& t, const Tensor& image) {
  if (image.ndim() != 3 || image.shape[0] != 3) {
    throw std::runtime_error("reference backbone: expected [3,H,W] image, got " +
                             shape_str(image.shape));
  }
  int nb = static_cast<int>(cfg_.backbone.block_channel_widths.size());
  Var x = t.constant(image);
  for (int b = 0; b < nb; ++b) {
    std::string base = "backbone.b" + std::to_string(b + 1);
    x = t.relu(conv2d(t, x, t.leaf(params_.get(base + ".c1.w")),
                      t.leaf(params_.get(base + ".c1.b")), 3, 2, 1));
    x = t.relu(conv2d(t, x, t.leaf(params_.get(base + ".c2.w")),
                      t.leaf(params_.get(base + ".c2.b")), 3, 1, 1));
  }
  return x;
}

Var ReferenceBackbone::logits_forward(Tape& t, const Tensor& image) {
  Var map = map_forward(t, image);
  const Tensor& m = t.value(map);
  int c = m.shape[0], hw = m.shape[1] * m.shape[2];
  // Global average pool per channel: [C,hw] x ones[hw,1] / hw.
  Var pooled = t.scale(t.matmul(t.reshape(map, {c, hw}), t.constant(Tensor::full({hw, 1}, 1.0))),
                       1.0 / hw);
  // Normalizing the pooled vector keeps the head's input at unit scale even
  // though the un-normalized trunk attenuates small-init activations.
  Var z = t.layer_norm(t.transpose(pooled), t.leaf(params_.get("cls.ln.g")),
                       t.leaf(params_.get("cls.ln.b")));
  return linear(t, z, t.leaf(params_.get("cls.w")), t.leaf(params_.get("cls.b")));
}

Tensor ReferenceBackbone::feature_map(const Tensor& image) {
  Tape t;
  return t.value(map_forward(t, image));
}

std::vector<double> ReferenceBackbone::roi_vector(const Tensor& fmap, const Box& box) {
  Tape t;
  Var v = roi_align(t, t.constant(fmap), box, cfg_.roi_output_size);
  return t.value(v).v;
}

std::vector<double> ReferenceBackbone::instance_vector(const Tensor& image, const Box& box) {
  return roi_vector(feature_map(image), box);
}

int ReferenceBackbone::feature_dim() const {
  int c = cfg_.backbone.block_channel_widths.back();
  return cfg_.roi_output_size * cfg_.roi_output_size * c;
}

int ReferenceBackbone::classify(const Tensor& image) {
  Tape t;
  const Tensor& logits = t.value(logits_forward(t, image));
  int best = 0;
  for (int i = 1; i < logits.numel(); ++i) {
    if (logits.v[i] > logits.v[best]) best = i;
  }
  return class_ids_[best];
}

std::string ReferenceBackbone::manifest_json() const {
  json j;
  j["backbone"] = {{"block_channel_widths", cfg_.backbone.block_channel_widths},
                   {"pyramid_levels", cfg_.backbone.pyramid_levels}};
  j["roi_output_size"] = cfg_.roi_output_size;
  j["class_ids"] = class_ids_;
  j["train_accuracy"] = train_accuracy_;
  return j.dump();
}

ReferenceBackbone ReferenceBackbone::from_manifest_json(const std::string& json_text) {
  json j = json::parse(json_text);
  ReferenceTrainConfig cfg;
  cfg.backbone.block_channel_widths =
      j.at("backbone").at("block_channel_widths").get<std::vector<int>>();
  cfg.backbone.pyramid_levels = j.at("backbone").at("pyramid_levels").get<int>();
  cfg.roi_output_size = j.at("roi_output_size").get<int>();
  ReferenceBackbone ref(cfg, j.at("class_ids").get<std::vector<int>>(), 0);
  ref.train_accuracy_ = j.at("train_accuracy").get<double>();
  for (Param* p : ref.params_.all()) p->trainable = false;
  return ref;
}

ReferenceBackbone train_reference_backbone(const Benchmark& bench,
                                           const ReferenceTrainConfig& cfg, uint64_t seed) {
  cfg.validate();
  std::set<int> detector_classes(bench.base_class_ids.begin(), bench.base_class_ids.end());
  detector_classes.insert(bench.novel_class_ids.begin(), bench.novel_class_ids.end());
  for (int c : bench.aux_class_ids) {
    if (detector_classes.count(c)) {
      throw std::runtime_error("train_reference_backbone: auxiliary class " + std::to_string(c) +
                               " overlaps the detector's class set");
    }
  }
  if (bench.aux_class_ids.empty()) {
    throw std::runtime_error("train_reference_backbone: benchmark has no auxiliary classes");
  }

  std::vector<SceneImage> images =
      gen_aux_set(bench, cfg.images_per_class, derive_seed(seed, 0x44));
  ReferenceBackbone ref(cfg, bench.aux_class_ids, seed);
  std::map<int, int> col;
  for (int i = 0; i < static_cast<int>(ref.class_ids_.size()); ++i) col[ref.class_ids_[i]] = i;
  int n = static_cast<int>(ref.class_ids_.size());

  std::vector<Param*> all = ref.params_.all();
  OptimConfig optim;
  optim.learning_rate = cfg.learning_rate;
  optim.weight_decay = cfg.weight_decay;

  auto accuracy = [&]() {
    int hits = 0;
    for (const SceneImage& img : images) {
      if (ref.classify(img.raster) == img.instances.at(0).class_id) ++hits;
    }
    return static_cast<double>(hits) / images.size();
  };

  RngStream shuffle_rng(derive_seed(seed, 0x55));
  std::vector<int> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  size_t pos = order.size();
  double acc = 0.0;
  bool reached = false;
  for (int step = 0; step < cfg.max_steps && !reached; ++step) {
    ref.params_.clear_grads();
    int batch = std::min<int>(cfg.batch_size, static_cast<int>(images.size()));
    for (int b = 0; b < batch; ++b) {
      if (pos == order.size()) {
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
          std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
        }
        pos = 0;
      }
      const SceneImage& img = images[order[pos++]];
      Tensor onehot({1, n});
      onehot.at2(0, col.at(img.instances.at(0).class_id)) = 1.0;
      Tape t;
      Var loss = t.sum(t.focal_bce(ref.logits_forward(t, img.raster), onehot, 0.5, 0.0));
      t.backward(loss);
    }
    for (Param* p : all) {
      if (p->grad.has_value()) {
        for (double& g : p->grad->v) g /= batch;
      }
    }
    adamw_step(all, optim);
    if ((step + 1) % 25 == 0 || step + 1 == cfg.max_steps) {
      acc = accuracy();
      reached = acc >= cfg.target_accuracy;
    }
  }
  if (!reached) {
    char buf[128];
    std::snprintf(buf, sizeof(buf),
                  "train_reference_backbone: accuracy %.3f below target %.3f after %d steps", acc,
                  cfg.target_accuracy, cfg.max_steps);
    throw std::runtime_error(buf);
  }
  ref.train_accuracy_ = acc;
  for (Param* p : all) {
    p->trainable = false;
    p->clear_grad();
    p->adam.reset();
  }
  return ref;
}

PrototypeBank build_prototypes(ReferenceBackbone& ref, const Benchmark& bench,
                               const SupportSet& support) {
  std::map<int, std::vector<double>> sums;
  std::map<int, int> counts;
  std::map<int, std::vector<int>> by_image;
  for (const SupportRef& r : support.refs) by_image[r.image_index].push_back(r.instance_index);
  for (const auto& [image_index, inst_indices] : by_image) {
    const SceneImage& img = bench.novel_pool.images.at(image_index);
    Tensor fmap = ref.feature_map(img.raster);
    for (int j : inst_indices) {
      const SceneInstance& inst = img.instances.at(j);
      std::vector<double> u = ref.roi_vector(fmap, inst.box);
      auto [it, fresh] = sums.try_emplace(inst.class_id, u.size(), 0.0);
      (void)fresh;
      for (size_t i = 0; i < u.size(); ++i) it->second[i] += u[i];
      ++counts[inst.class_id];
    }
  }
  PrototypeBank bank;
  bank.dim = ref.feature_dim();
  bank.support_fingerprint = support_fingerprint(bench.novel_pool, support);
  for (int c : bench.novel_class_ids) {
    auto it = sums.find(c);
    if (it == sums.end()) {
      throw std::runtime_error("build_prototypes: class " + std::to_string(c) +
                               " has no support instances");
    }
    std::vector<double>& r = it->second;
    double norm2 = 0.0;
    for (double& x : r) {
      x /= counts[c];
      if (!std::isfinite(x)) {
        throw std::runtime_error("build_prototypes: non-finite prototype for class " +
                                 std::to_string(c));
      }
      norm2 += x * x;
    }
    if (norm2 == 0.0) {
      throw std::runtime_error("build_prototypes: zero prototype for class " + std::to_string(c));
    }
    bank.prototypes[c] = std::move(r);
  }
  return bank;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw std::runtime_error("cosine: dimension mismatch " + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()));
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

double similarity_score(ReferenceBackbone& ref, const Tensor& image, const Box& box,
                        const PrototypeBank& bank, int class_id) {
  auto it = bank.prototypes.find(class_id);
  if (it == bank.prototypes.end()) {
    throw std::runtime_error("similarity_score: no prototype for class " +
                             std::to_string(class_id));
  }
  std::vector<double> z = ref.instance_vector(image, box);
  double n2 = 0.0;
  for (double x : z) n2 += x * x;
  if (n2 == 0.0) {
    std::fprintf(stderr, "warning: zero-norm feature for class %d, similarity set to 0\n",
                 class_id);
    return 0.0;
  }
  return cosine(z, it->second);
}

void EnsembleConfig::validate() const {
  if (std::abs(alpha + beta - 1.0) > 1e-12) {
    throw std::runtime_error("ensemble config: alpha + beta must equal 1");
  }
  if (alpha < 0.0 || alpha > 1.0 || beta < 0.0 || beta > 1.0) {
    throw std::runtime_error("ensemble config: alpha and beta must lie in [0, 1]");
  }
}

double ensemble_score(double detector_score, double prototype_score, const EnsembleConfig& cfg) {
  return cfg.alpha * detector_score + cfg.beta * prototype_score;
}

std::vector<Detection> rescore_detections(ReferenceBackbone& ref, const PrototypeBank& bank,
                                          const EnsembleConfig& cfg, std::vector<Detection> dets,
                                          const Tensor& image) {
  cfg.validate();
  if (dets.empty()) return dets;
  Tensor fmap = ref.feature_map(image);
  for (Detection& d : dets) {
    auto it = bank.prototypes.find(d.category_id);
    if (it == bank.prototypes.end()) {
      throw std::runtime_error("rescore_detections: no prototype for class " +
                               std::to_string(d.category_id));
    }
    double sim = cosine(ref.roi_vector(fmap, d.box), it->second);
    d.score = ensemble_score(d.score, sim, cfg);
  }
  sort_detections(dets);
  return dets;
}

void save_prototype_bank(const std::string& path, const PrototypeBank& bank) {
  json j;
  j["dim"] = bank.dim;
  j["support_fingerprint"] = bank.support_fingerprint;
  json protos = json::object();
  for (const auto& [c, r] : bank.prototypes) protos[std::to_string(c)] = r;
  j["prototypes"] = protos;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_prototype_bank: cannot open " + path);
  out << j.dump(2) << "\n";
}

PrototypeBank load_prototype_bank(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_prototype_bank: cannot open " + path);
  json j = json::parse(in);
  PrototypeBank bank;
  bank.dim = j.at("dim").get<int>();
  bank.support_fingerprint = j.at("support_fingerprint").get<std::string>();
  for (const auto& [key, value] : j.at("prototypes").items()) {
    std::vector<double> r = value.get<std::vector<double>>();
    if (static_cast<int>(r.size()) != bank.dim) {
      throw std::runtime_error("load_prototype_bank: prototype for class " + key +
                               " has dim " + std::to_string(r.size()));
    }
    bank.prototypes[std::stoi(key)] = std::move(r);
  }
  return bank;
}

}  // namespace fsod
