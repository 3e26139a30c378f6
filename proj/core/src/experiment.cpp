#include "fsod/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "fsod/checkpoint.hpp"
#include "fsod/rng.hpp"

namespace fsod {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---- config parsing ----

namespace {

[[noreturn]] void config_fail(const std::string& msg) {
  throw std::runtime_error("config: " + msg);
}

// Tracks the dotted field path so every parse error names the field.
class Cursor {
 public:
  Cursor(const json& j, std::string path) : j_(&j), path_(std::move(path)) {}

  bool has(const char* key) const { return j_->contains(key); }

  Cursor child(const char* key) const {
    if (!j_->contains(key) || !(*j_)[key].is_object()) {
      config_fail("field '" + join(key) + "' must be an object");
    }
    return Cursor((*j_)[key], join(key));
  }

  template <typename T>
  T get(const char* key, T fallback) const {
    if (!j_->contains(key)) return fallback;
    try {
      return (*j_)[key].get<T>();
    } catch (const json::exception&) {
      config_fail("field '" + join(key) + "' has the wrong type");
    }
  }

  void check_keys(std::initializer_list<const char*> allowed) const {
    for (const auto& [key, value] : j_->items()) {
      (void)value;
      bool ok = false;
      for (const char* a : allowed) ok = ok || key == a;
      if (!ok) config_fail("unknown field '" + join(key.c_str()) + "'");
    }
  }

 private:
  std::string join(const char* key) const {
    return path_.empty() ? std::string(key) : path_ + "." + key;
  }

  const json* j_;
  std::string path_;
};

StageParams parse_stage(const Cursor& c, const StageParams& defaults) {
  c.check_keys({"steps", "learning_rate", "batch_size", "early_stop_window", "min_improve"});
  StageParams p = defaults;
  p.steps = c.get("steps", p.steps);
  p.learning_rate = c.get("learning_rate", p.learning_rate);
  p.batch_size = c.get("batch_size", p.batch_size);
  p.early_stop_window = c.get("early_stop_window", p.early_stop_window);
  p.min_improve = c.get("min_improve", p.min_improve);
  return p;
}

constexpr uint64_t kFnvOffset = 1469598103934665603ull;
constexpr uint64_t kFnvPrime = 1099511628211ull;

uint64_t fnv1a(const void* data, size_t n, uint64_t h = kFnvOffset) {
  const unsigned char* b = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= b[i];
    h *= kFnvPrime;
  }
  return h;
}

std::string hex64(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    config_fail(std::string("not valid JSON (") + e.what() + ")");
  }
  if (!j.is_object()) config_fail("top level must be an object");
  Cursor root(j, "");
  root.check_keys({"dataset", "detector", "stages", "optimizer", "loss", "reference", "ensemble",
                   "k_values", "ablation_k", "seeds", "score_floor", "out_dir"});
  ExperimentConfig cfg;
  if (root.has("dataset")) {
    Cursor c = root.child("dataset");
    c.check_keys({"num_base_classes", "num_novel_classes", "num_aux_classes", "base_images",
                  "novel_pool_images", "test_images", "image_size", "seed"});
    cfg.dataset.num_base_classes = c.get("num_base_classes", cfg.dataset.num_base_classes);
    cfg.dataset.num_novel_classes = c.get("num_novel_classes", cfg.dataset.num_novel_classes);
    cfg.dataset.num_aux_classes = c.get("num_aux_classes", cfg.dataset.num_aux_classes);
    cfg.dataset.base_images = c.get("base_images", cfg.dataset.base_images);
    cfg.dataset.novel_pool_images = c.get("novel_pool_images", cfg.dataset.novel_pool_images);
    cfg.dataset.test_images = c.get("test_images", cfg.dataset.test_images);
    cfg.dataset.image_size = c.get("image_size", cfg.dataset.image_size);
    cfg.dataset_seed = c.get("seed", cfg.dataset_seed);
  }
  if (root.has("detector")) {
    Cursor c = root.child("detector");
    c.check_keys({"block_channel_widths", "pyramid_levels", "num_stages", "num_proposals",
                  "encoding_dim", "roi_output_size", "detach_boxes"});
    cfg.backbone.block_channel_widths =
        c.get("block_channel_widths", cfg.backbone.block_channel_widths);
    cfg.backbone.pyramid_levels = c.get("pyramid_levels", cfg.backbone.pyramid_levels);
    cfg.cascade.num_stages = c.get("num_stages", cfg.cascade.num_stages);
    cfg.cascade.num_proposals = c.get("num_proposals", cfg.cascade.num_proposals);
    cfg.cascade.encoding_dim = c.get("encoding_dim", cfg.cascade.encoding_dim);
    cfg.cascade.roi_output_size = c.get("roi_output_size", cfg.cascade.roi_output_size);
    cfg.cascade.detach_boxes = c.get("detach_boxes", cfg.cascade.detach_boxes);
  }
  if (root.has("stages")) {
    Cursor c = root.child("stages");
    c.check_keys({"base", "pcf", "novel"});
    if (c.has("base")) cfg.base_stage = parse_stage(c.child("base"), cfg.base_stage);
    if (c.has("pcf")) cfg.pcf_stage = parse_stage(c.child("pcf"), cfg.pcf_stage);
    if (c.has("novel")) cfg.novel_stage = parse_stage(c.child("novel"), cfg.novel_stage);
  }
  if (root.has("optimizer")) {
    Cursor c = root.child("optimizer");
    c.check_keys({"weight_decay", "beta1", "beta2", "epsilon"});
    cfg.optimizer.weight_decay = c.get("weight_decay", cfg.optimizer.weight_decay);
    cfg.optimizer.beta1 = c.get("beta1", cfg.optimizer.beta1);
    cfg.optimizer.beta2 = c.get("beta2", cfg.optimizer.beta2);
    cfg.optimizer.epsilon = c.get("epsilon", cfg.optimizer.epsilon);
  }
  if (root.has("loss")) {
    Cursor c = root.child("loss");
    c.check_keys(
        {"lambda_cls", "lambda_l1", "lambda_giou", "focal_alpha", "focal_gamma", "smooth_l1_beta"});
    cfg.loss.lambda_cls = c.get("lambda_cls", cfg.loss.lambda_cls);
    cfg.loss.lambda_l1 = c.get("lambda_l1", cfg.loss.lambda_l1);
    cfg.loss.lambda_giou = c.get("lambda_giou", cfg.loss.lambda_giou);
    cfg.loss.focal_alpha = c.get("focal_alpha", cfg.loss.focal_alpha);
    cfg.loss.focal_gamma = c.get("focal_gamma", cfg.loss.focal_gamma);
    cfg.loss.smooth_l1_beta = c.get("smooth_l1_beta", cfg.loss.smooth_l1_beta);
  }
  if (root.has("reference")) {
    Cursor c = root.child("reference");
    c.check_keys({"images_per_class", "batch_size", "learning_rate", "weight_decay", "max_steps",
                  "target_accuracy"});
    cfg.reference.images_per_class = c.get("images_per_class", cfg.reference.images_per_class);
    cfg.reference.batch_size = c.get("batch_size", cfg.reference.batch_size);
    cfg.reference.learning_rate = c.get("learning_rate", cfg.reference.learning_rate);
    cfg.reference.weight_decay = c.get("weight_decay", cfg.reference.weight_decay);
    cfg.reference.max_steps = c.get("max_steps", cfg.reference.max_steps);
    cfg.reference.target_accuracy = c.get("target_accuracy", cfg.reference.target_accuracy);
  }
  if (root.has("ensemble")) {
    Cursor c = root.child("ensemble");
    c.check_keys({"alpha", "beta"});
    cfg.ensemble.alpha = c.get("alpha", cfg.ensemble.alpha);
    cfg.ensemble.beta = c.get("beta", 1.0 - cfg.ensemble.alpha);
  }
  cfg.k_values = root.get("k_values", cfg.k_values);
  cfg.ablation_k = root.get("ablation_k", cfg.ablation_k);
  cfg.seeds = root.get("seeds", cfg.seeds);
  cfg.score_floor = root.get("score_floor", cfg.score_floor);
  cfg.out_dir = root.get("out_dir", cfg.out_dir);
  // The reference extractor mirrors the detector topology by contract.
  cfg.reference.backbone = cfg.backbone;
  cfg.reference.roi_output_size = cfg.cascade.roi_output_size;
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void ExperimentConfig::validate() const {
  backbone.validate();
  CascadeConfig cc = cascade;
  cc.num_classes = dataset.num_base_classes;
  cc.validate();
  optimizer.validate();
  reference.validate();
  ensemble.validate();
  static const std::set<int> allowed_k = {1, 2, 3, 5, 10, 30};
  if (k_values.empty()) config_fail("field 'k_values' must be non-empty");
  for (int k : k_values) {
    if (!allowed_k.count(k)) {
      config_fail("field 'k_values': K=" + std::to_string(k) +
                  " not in {1, 2, 3, 5, 10, 30}");
    }
  }
  if (!allowed_k.count(ablation_k)) {
    config_fail("field 'ablation_k': K=" + std::to_string(ablation_k) +
                " not in {1, 2, 3, 5, 10, 30}");
  }
  if (seeds.empty()) config_fail("field 'seeds' must be non-empty");
  if (!(score_floor >= 0.0 && score_floor < 1.0)) {
    config_fail("field 'score_floor' must lie in [0, 1)");
  }
  if (out_dir.empty()) config_fail("field 'out_dir' must be non-empty");
  for (const StageParams* s : {&base_stage, &pcf_stage, &novel_stage}) {
    if (s->steps < 1) config_fail("stage steps must be >= 1");
    if (s->batch_size < 1) config_fail("stage batch_size must be >= 1");
    if (!(s->learning_rate > 0.0)) config_fail("stage learning_rate must be > 0");
    if (s->early_stop_window < 0) config_fail("stage early_stop_window must be >= 0");
  }
}

std::string ExperimentConfig::canonical_json() const {
  json j;
  j["dataset"] = {{"num_base_classes", dataset.num_base_classes},
                  {"num_novel_classes", dataset.num_novel_classes},
                  {"num_aux_classes", dataset.num_aux_classes},
                  {"base_images", dataset.base_images},
                  {"novel_pool_images", dataset.novel_pool_images},
                  {"test_images", dataset.test_images},
                  {"image_size", dataset.image_size},
                  {"seed", dataset_seed}};
  j["detector"] = {{"block_channel_widths", backbone.block_channel_widths},
                   {"pyramid_levels", backbone.pyramid_levels},
                   {"num_stages", cascade.num_stages},
                   {"num_proposals", cascade.num_proposals},
                   {"encoding_dim", cascade.encoding_dim},
                   {"roi_output_size", cascade.roi_output_size},
                   {"detach_boxes", cascade.detach_boxes}};
  auto stage_json = [](const StageParams& s) {
    return json{{"steps", s.steps},
                {"learning_rate", s.learning_rate},
                {"batch_size", s.batch_size},
                {"early_stop_window", s.early_stop_window},
                {"min_improve", s.min_improve}};
  };
  j["stages"] = {{"base", stage_json(base_stage)},
                 {"pcf", stage_json(pcf_stage)},
                 {"novel", stage_json(novel_stage)}};
  j["optimizer"] = {{"weight_decay", optimizer.weight_decay},
                    {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"epsilon", optimizer.epsilon}};
  j["loss"] = {{"lambda_cls", loss.lambda_cls},       {"lambda_l1", loss.lambda_l1},
               {"lambda_giou", loss.lambda_giou},     {"focal_alpha", loss.focal_alpha},
               {"focal_gamma", loss.focal_gamma},     {"smooth_l1_beta", loss.smooth_l1_beta}};
  j["reference"] = {{"images_per_class", reference.images_per_class},
                    {"batch_size", reference.batch_size},
                    {"learning_rate", reference.learning_rate},
                    {"weight_decay", reference.weight_decay},
                    {"max_steps", reference.max_steps},
                    {"target_accuracy", reference.target_accuracy}};
  j["ensemble"] = {{"alpha", ensemble.alpha}, {"beta", ensemble.beta}};
  j["k_values"] = k_values;
  j["ablation_k"] = ablation_k;
  j["seeds"] = seeds;
  j["score_floor"] = score_floor;
  j["out_dir"] = out_dir;
  return j.dump(2);
}

std::string ExperimentConfig::hash() const {
  std::string text = canonical_json();
  return hex64(fnv1a(text.data(), text.size()));
}

// ---- paths ----

std::string ExperimentPaths::support(int k, uint64_t seed) const {
  return root + "/support/k" + std::to_string(k) + "_seed" + std::to_string(seed) + ".json";
}
std::string ExperimentPaths::seed_dir(uint64_t seed) const {
  return root + "/runs/seed" + std::to_string(seed);
}
std::string ExperimentPaths::base_ckpt(uint64_t seed) const {
  return seed_dir(seed) + "/base.ckpt";
}
std::string ExperimentPaths::base_metrics(uint64_t seed) const {
  return seed_dir(seed) + "/base_metrics.json";
}
std::string ExperimentPaths::reference_ckpt(uint64_t seed) const {
  return seed_dir(seed) + "/reference.ckpt";
}
std::string ExperimentPaths::run_dir(uint64_t seed, int k) const {
  return seed_dir(seed) + "/k" + std::to_string(k);
}
std::string ExperimentPaths::pcf_ckpt(uint64_t seed, int k) const {
  return run_dir(seed, k) + "/pcf.ckpt";
}
std::string ExperimentPaths::pcf_metrics(uint64_t seed, int k) const {
  return run_dir(seed, k) + "/pcf_metrics.json";
}
std::string ExperimentPaths::novel_ckpt(uint64_t seed, int k, const std::string& procedure) const {
  return run_dir(seed, k) + "/" + procedure + ".ckpt";
}
std::string ExperimentPaths::novel_metrics(uint64_t seed, int k,
                                           const std::string& procedure) const {
  return run_dir(seed, k) + "/" + procedure + "_metrics.json";
}
std::string ExperimentPaths::prototypes(uint64_t seed, int k) const {
  return run_dir(seed, k) + "/prototypes.json";
}
std::string ExperimentPaths::detections(uint64_t seed, int k, const std::string& variant) const {
  return run_dir(seed, k) + "/" + variant + ".detections.jsonl";
}
std::string ExperimentPaths::eval_json(uint64_t seed, int k, const std::string& variant) const {
  return run_dir(seed, k) + "/" + variant + ".eval.json";
}
std::string ExperimentPaths::eval_csv(uint64_t seed, int k, const std::string& variant) const {
  return run_dir(seed, k) + "/" + variant + ".eval.csv";
}
std::string ExperimentPaths::ablation_dir(int k) const {
  return root + "/ablation/k" + std::to_string(k);
}

ExperimentPaths resolve_paths(const ExperimentConfig& cfg) {
  ExperimentPaths p;
  const char* env = std::getenv("FSOD_OUT");
  p.root = (env != nullptr && env[0] != '\0') ? env : cfg.out_dir;
  return p;
}

// ---- shared plumbing ----

namespace {

void write_text(const std::string& path, const std::string& text) {
  fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string file_hash(const std::string& path) {
  std::string bytes = read_text(path);
  return hex64(fnv1a(bytes.data(), bytes.size()));
}

std::string now_iso8601() {
  std::time_t t = std::time(nullptr);
  char buf[32];
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

// Creates or checks the output root; a hash mismatch against an existing
// run directory is refused unless forced.
void init_out_dir(const ExperimentConfig& cfg, const ExperimentPaths& paths, bool force) {
  fs::create_directories(paths.root);
  std::string h = cfg.hash();
  if (fs::exists(paths.manifest())) {
    json m = json::parse(read_text(paths.manifest()));
    std::string existing = m.value("config_hash", "");
    if (existing != h) {
      if (!force) {
        throw std::runtime_error("output dir " + paths.root +
                                 " belongs to config hash " + existing + ", current is " + h +
                                 "; use --force or a fresh directory");
      }
      m["config_hash"] = h;
      m["version"] = kFsodVersion;
      write_text(paths.manifest(), m.dump(2) + "\n");
      write_text(paths.config_copy(), cfg.canonical_json() + "\n");
    }
    return;
  }
  json m;
  m["config_hash"] = h;
  m["version"] = kFsodVersion;
  m["steps"] = json::object();
  write_text(paths.manifest(), m.dump(2) + "\n");
  write_text(paths.config_copy(), cfg.canonical_json() + "\n");
}

void mark_step(const ExperimentPaths& paths, const std::string& name) {
  json m = json::parse(read_text(paths.manifest()));
  m["steps"][name] = now_iso8601();
  write_text(paths.manifest(), m.dump(2) + "\n");
}

std::vector<uint64_t> pick_seeds(const ExperimentConfig& cfg, const RunOptions& opt) {
  if (opt.seed.has_value()) return {*opt.seed};
  return cfg.seeds;
}

std::vector<int> pick_ks(const ExperimentConfig& cfg, const RunOptions& opt) {
  if (opt.k.has_value()) return {*opt.k};
  return cfg.k_values;
}

Benchmark require_data(const ExperimentPaths& paths) {
  if (!fs::exists(paths.data_dir() + "/manifest.json")) {
    throw std::runtime_error("no dataset under " + paths.data_dir() + "; run gen-data first");
  }
  return load_benchmark(paths.data_dir());
}

SupportSet require_support(const ExperimentPaths& paths, int k, uint64_t seed) {
  std::string path = paths.support(k, seed);
  if (!fs::exists(path)) {
    throw std::runtime_error("no support set " + path + "; run gen-data first");
  }
  return load_support(path);
}

SparseDetector make_detector(const ExperimentConfig& cfg, const std::vector<int>& class_ids,
                             uint64_t seed) {
  CascadeConfig cc = cfg.cascade;
  cc.num_classes = static_cast<int>(class_ids.size());
  SparseDetector det(cfg.backbone, cc, seed);
  det.set_class_ids(class_ids);
  return det;
}

SparseDetector load_detector(const std::string& ckpt_path) {
  SparseDetector det = SparseDetector::from_manifest_json(read_checkpoint_manifest(ckpt_path));
  load_checkpoint(ckpt_path, det.params());
  return det;
}

StagePlan make_plan(const ExperimentConfig& cfg, const StageParams& sp, StageKind kind,
                    uint64_t seed) {
  StagePlan plan;
  plan.kind = kind;
  plan.steps = sp.steps;
  plan.learning_rate = sp.learning_rate;
  plan.batch_size = sp.batch_size;
  plan.seed = seed;
  plan.optim = cfg.optimizer;
  plan.loss = cfg.loss;
  plan.early_stop_window = sp.early_stop_window;
  plan.min_improve = sp.min_improve;
  return plan;
}

// Seed fan-out tags; one experiment seed drives every stream of a run.
constexpr uint64_t kTagDetectorInit = 0xD0;
constexpr uint64_t kTagBaseStage = 0xB0;
constexpr uint64_t kTagPcfStage = 0xB1;
constexpr uint64_t kTagNovelStage = 0xB2;
constexpr uint64_t kTagReinit = 0xC0;
constexpr uint64_t kTagReference = 0xE0;
constexpr uint64_t kTagSupport = 0xA000;

void save_stage_metrics(const std::string& path, const StageResult& r,
                        const std::string& procedure) {
  json m;
  m["stage"] = stage_kind_name(r.kind);
  m["procedure"] = procedure;
  m["steps_run"] = r.steps_run;
  m["loss_first"] = r.loss_curve.empty() ? 0.0 : r.loss_curve.front();
  m["loss_last"] = r.loss_curve.empty() ? 0.0 : r.loss_curve.back();
  m["loss_curve"] = r.loss_curve;
  write_text(path, m.dump(2) + "\n");
}

std::vector<Detection> detect_split(SparseDetector& det, const DatasetSplit& split,
                                    double score_floor) {
  std::vector<Detection> all;
  for (const SceneImage& img : split.images) {
    std::vector<Detection> d = det.detect(img.raster, score_floor);
    for (Detection& x : d) x.image_id = img.image_id;
    all.insert(all.end(), d.begin(), d.end());
  }
  sort_detections(all);
  return all;
}

std::vector<Detection> rescore_split(ReferenceBackbone& ref, const PrototypeBank& bank,
                                     const EnsembleConfig& ens,
                                     const std::vector<Detection>& dets,
                                     const DatasetSplit& split) {
  std::map<int, const SceneImage*> by_id;
  for (const SceneImage& img : split.images) by_id[img.image_id] = &img;
  std::map<int, std::vector<Detection>> grouped;
  for (const Detection& d : dets) grouped[d.image_id].push_back(d);
  std::vector<Detection> all;
  for (auto& [image_id, group] : grouped) {
    auto it = by_id.find(image_id);
    if (it == by_id.end()) {
      throw std::runtime_error("rescore: detection references unknown image " +
                               std::to_string(image_id));
    }
    std::vector<Detection> r =
        rescore_detections(ref, bank, ens, std::move(group), it->second->raster);
    all.insert(all.end(), r.begin(), r.end());
  }
  sort_detections(all);
  return all;
}

bool fresh(const std::string& path, bool force) { return force || !fs::exists(path); }

void log_line(const char* cmd, const std::string& msg) {
  std::printf("%s: %s\n", cmd, msg.c_str());
  std::fflush(stdout);
}

// ---- per-run builders shared by the subcommands and the ablation ----

void build_base(const ExperimentConfig& cfg, const ExperimentPaths& paths, const Benchmark& bench,
                uint64_t seed, bool force) {
  std::string ckpt = paths.base_ckpt(seed);
  if (!fresh(ckpt, force)) {
    log_line("train-base", "seed " + std::to_string(seed) + ": exists, skipping");
    return;
  }
  SparseDetector det = make_detector(cfg, bench.base_class_ids, derive_seed(seed, kTagDetectorInit));
  StagePlan plan = make_plan(cfg, cfg.base_stage, StageKind::kBase, derive_seed(seed, kTagBaseStage));
  StageResult r = run_stage(det, plan, base_samples(bench, det));
  fs::create_directories(paths.seed_dir(seed));
  save_checkpoint(ckpt, det.params(), det.manifest_json());
  save_stage_metrics(paths.base_metrics(seed), r, "base");
  char buf[96];
  std::snprintf(buf, sizeof(buf), "seed %llu: %d steps, loss %.4f -> %.4f",
                static_cast<unsigned long long>(seed), r.steps_run,
                r.loss_curve.empty() ? 0.0 : r.loss_curve.front(),
                r.loss_curve.empty() ? 0.0 : r.loss_curve.back());
  log_line("train-base", buf);
}

std::string require_base(const ExperimentPaths& paths, uint64_t seed) {
  std::string ckpt = paths.base_ckpt(seed);
  if (!fs::exists(ckpt)) {
    throw std::runtime_error("no base checkpoint for seed " + std::to_string(seed) +
                             "; run train-base first");
  }
  return ckpt;
}

void build_pcf(const ExperimentConfig& cfg, const ExperimentPaths& paths, const Benchmark& bench,
               uint64_t seed, int k, bool force) {
  std::string ckpt = paths.pcf_ckpt(seed, k);
  if (!fresh(ckpt, force)) {
    log_line("train-pcf", "seed " + std::to_string(seed) + " K=" + std::to_string(k) +
                              ": exists, skipping");
    return;
  }
  std::string base = require_base(paths, seed);
  SupportSet support = require_support(paths, k, seed);
  SparseDetector det = load_detector(base);
  det.reinit_classifiers(bench.novel_class_ids, derive_seed(seed, kTagReinit));
  StagePlan plan = make_plan(cfg, cfg.pcf_stage, StageKind::kPcf, derive_seed(seed, kTagPcfStage));
  StageResult r = run_stage(det, plan, support_samples(bench, support, det));
  save_checkpoint(ckpt, det.params(), det.manifest_json());
  save_stage_metrics(paths.pcf_metrics(seed, k), r, "pcf");
  char buf[96];
  std::snprintf(buf, sizeof(buf), "seed %llu K=%d: %d steps, loss %.4f -> %.4f",
                static_cast<unsigned long long>(seed), k, r.steps_run,
                r.loss_curve.empty() ? 0.0 : r.loss_curve.front(),
                r.loss_curve.empty() ? 0.0 : r.loss_curve.back());
  log_line("train-pcf", buf);
}

// procedure: "two_stage" trains from the re-initialized base checkpoint,
// "three_stage" continues from the PCF checkpoint.
void build_novel(const ExperimentConfig& cfg, const ExperimentPaths& paths, const Benchmark& bench,
                 uint64_t seed, int k, const std::string& procedure, bool force) {
  std::string ckpt = paths.novel_ckpt(seed, k, procedure);
  if (!fresh(ckpt, force)) {
    log_line("train-novel", procedure + " seed " + std::to_string(seed) + " K=" +
                                std::to_string(k) + ": exists, skipping");
    return;
  }
  SupportSet support = require_support(paths, k, seed);
  SparseDetector det = [&] {
    if (procedure == "three_stage") {
      std::string pcf = paths.pcf_ckpt(seed, k);
      if (!fs::exists(pcf)) {
        throw std::runtime_error("no PCF checkpoint for seed " + std::to_string(seed) + ", K=" +
                                 std::to_string(k) + "; run train-pcf first");
      }
      return load_detector(pcf);
    }
    SparseDetector d = load_detector(require_base(paths, seed));
    d.reinit_classifiers(bench.novel_class_ids, derive_seed(seed, kTagReinit));
    return d;
  }();
  StagePlan plan =
      make_plan(cfg, cfg.novel_stage, StageKind::kNovel, derive_seed(seed, kTagNovelStage));
  StageResult r = run_stage(det, plan, support_samples(bench, support, det));
  save_checkpoint(ckpt, det.params(), det.manifest_json());
  save_stage_metrics(paths.novel_metrics(seed, k, procedure), r, procedure);
  char buf[112];
  std::snprintf(buf, sizeof(buf), "%s seed %llu K=%d: %d steps, loss %.4f -> %.4f",
                procedure.c_str(), static_cast<unsigned long long>(seed), k, r.steps_run,
                r.loss_curve.empty() ? 0.0 : r.loss_curve.front(),
                r.loss_curve.empty() ? 0.0 : r.loss_curve.back());
  log_line("train-novel", buf);
}

ReferenceBackbone build_reference(const ExperimentConfig& cfg, const ExperimentPaths& paths,
                                  const Benchmark& bench, uint64_t seed, bool force) {
  std::string ckpt = paths.reference_ckpt(seed);
  if (!fresh(ckpt, force)) {
    ReferenceBackbone ref = ReferenceBackbone::from_manifest_json(read_checkpoint_manifest(ckpt));
    load_checkpoint(ckpt, ref.params());
    return ref;
  }
  ReferenceBackbone ref =
      train_reference_backbone(bench, cfg.reference, derive_seed(seed, kTagReference));
  fs::create_directories(paths.seed_dir(seed));
  save_checkpoint(ckpt, ref.params(), ref.manifest_json());
  char buf[96];
  std::snprintf(buf, sizeof(buf), "seed %llu: reference accuracy %.3f",
                static_cast<unsigned long long>(seed), ref.train_accuracy());
  log_line("build-prototypes", buf);
  return ref;
}

void build_bank(const ExperimentConfig& cfg, const ExperimentPaths& paths, const Benchmark& bench,
                uint64_t seed, int k, bool force) {
  std::string path = paths.prototypes(seed, k);
  if (!fresh(path, force)) {
    log_line("build-prototypes", "seed " + std::to_string(seed) + " K=" + std::to_string(k) +
                                     ": exists, skipping");
    return;
  }
  SupportSet support = require_support(paths, k, seed);
  ReferenceBackbone ref = build_reference(cfg, paths, bench, seed, force);
  PrototypeBank bank = build_prototypes(ref, bench, support);
  fs::create_directories(paths.run_dir(seed, k));
  save_prototype_bank(path, bank);
  log_line("build-prototypes", "seed " + std::to_string(seed) + " K=" + std::to_string(k) +
                                   ": wrote " + path);
}

EvalReport eval_detections_file(const Benchmark& bench, const std::string& det_path) {
  return evaluate(load_detections_jsonl(det_path), bench.test, bench.novel_class_ids,
                  default_eval_config());
}

// Detections + evaluation for one trained procedure, plus the rescored
// variant when a prototype bank is present.
void build_eval(const ExperimentConfig& cfg, const ExperimentPaths& paths, const Benchmark& bench,
                uint64_t seed, int k, const std::string& procedure, bool force) {
  std::string ckpt = paths.novel_ckpt(seed, k, procedure);
  if (!fs::exists(ckpt)) return;
  std::string det_path = paths.detections(seed, k, procedure);
  if (fresh(det_path, force)) {
    SparseDetector det = load_detector(ckpt);
    save_detections_jsonl(det_path, detect_split(det, bench.test, cfg.score_floor));
  }
  if (fresh(paths.eval_json(seed, k, procedure), force)) {
    EvalReport r = eval_detections_file(bench, det_path);
    write_text(paths.eval_json(seed, k, procedure), report_to_json(r) + "\n");
    write_text(paths.eval_csv(seed, k, procedure), report_to_csv(r));
    char buf[112];
    std::snprintf(buf, sizeof(buf), "%s seed %llu K=%d: AP %.4f AP50 %.4f AP75 %.4f",
                  procedure.c_str(), static_cast<unsigned long long>(seed), k, r.ap, r.ap50,
                  r.ap75);
    log_line("evaluate", buf);
  }
  std::string bank_path = paths.prototypes(seed, k);
  if (!fs::exists(bank_path)) return;
  std::string me = procedure + "_me";
  std::string me_path = paths.detections(seed, k, me);
  if (fresh(me_path, force)) {
    PrototypeBank bank = load_prototype_bank(bank_path);
    SupportSet support = require_support(paths, k, seed);
    std::string want = support_fingerprint(bench.novel_pool, support);
    if (bank.support_fingerprint != want) {
      throw std::runtime_error("prototype bank " + bank_path +
                               " was built from a different support set; rerun "
                               "build-prototypes --force");
    }
    ReferenceBackbone ref = build_reference(cfg, paths, bench, seed, false);
    std::vector<Detection> dets = load_detections_jsonl(det_path);
    save_detections_jsonl(me_path, rescore_split(ref, bank, cfg.ensemble, dets, bench.test));
  }
  if (fresh(paths.eval_json(seed, k, me), force)) {
    EvalReport r = eval_detections_file(bench, me_path);
    write_text(paths.eval_json(seed, k, me), report_to_json(r) + "\n");
    write_text(paths.eval_csv(seed, k, me), report_to_csv(r));
    char buf[112];
    std::snprintf(buf, sizeof(buf), "%s seed %llu K=%d: AP %.4f AP50 %.4f AP75 %.4f", me.c_str(),
                  static_cast<unsigned long long>(seed), k, r.ap, r.ap50, r.ap75);
    log_line("evaluate", buf);
  }
}

std::string benchmark_hash(const ExperimentPaths& paths) {
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(paths.data_dir())) {
    if (entry.is_regular_file()) files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  uint64_t h = kFnvOffset;
  for (const std::string& f : files) {
    std::string name = fs::path(f).filename().string();
    h = fnv1a(name.data(), name.size(), h);
    std::string bytes = read_text(f);
    h = fnv1a(bytes.data(), bytes.size(), h);
  }
  return hex64(h);
}

}  // namespace

// ---- subcommands ----

void cmd_gen_data(const ExperimentConfig& cfg, const RunOptions& opt) {
  ExperimentPaths paths = resolve_paths(cfg);
  init_out_dir(cfg, paths, opt.force);
  bool have = fs::exists(paths.data_dir() + "/manifest.json");
  Benchmark bench = [&] {
    if (have && !opt.force) {
      log_line("gen-data", "dataset exists, skipping");
      return load_benchmark(paths.data_dir());
    }
    Benchmark b = gen_dataset(cfg.dataset, cfg.dataset_seed);
    save_benchmark(paths.data_dir(), b);
    return b;
  }();
  for (uint64_t seed : pick_seeds(cfg, opt)) {
    for (int k : pick_ks(cfg, opt)) {
      std::string path = paths.support(k, seed);
      if (!fresh(path, opt.force)) continue;
      SupportSet support = sample_kshot(bench.novel_pool, bench.novel_class_ids, k,
                                        derive_seed(seed, kTagSupport + static_cast<uint64_t>(k)));
      fs::create_directories(paths.root + "/support");
      save_support(path, support);
    }
  }
  log_line("gen-data", "dataset hash " + benchmark_hash(paths));
  mark_step(paths, "gen-data");
}

void cmd_train_base(const ExperimentConfig& cfg, const RunOptions& opt) {
  ExperimentPaths paths = resolve_paths(cfg);
  init_out_dir(cfg, paths, opt.force);
  Benchmark bench = require_data(paths);
  for (uint64_t seed : pick_seeds(cfg, opt)) build_base(cfg, paths, bench, seed, opt.force);
  mark_step(paths, "train-base");
}

void cmd_train_pcf(const ExperimentConfig& cfg, const RunOptions& opt) {
  ExperimentPaths paths = resolve_paths(cfg);
  init_out_dir(cfg, paths, opt.force);
  Benchmark bench = require_data(paths);
  for (uint64_t seed : pick_seeds(cfg, opt)) {
    for (int k : pick_ks(cfg, opt)) build_pcf(cfg, paths, bench, seed, k, opt.force);
  }
  mark_step(paths, "train-pcf");
}

void cmd_train_novel(const ExperimentConfig& cfg, const RunOptions& opt) {
  ExperimentPaths paths = resolve_paths(cfg);
  init_out_dir(cfg, paths, opt.force);
  Benchmark bench = require_data(paths);
  for (uint64_t seed : pick_seeds(cfg, opt)) {
    require_base(paths, seed);
    for (int k : pick_ks(cfg, opt)) {
      // Continues from PCF when that stage was run, otherwise fine-tunes
      // straight from the re-initialized base checkpoint.
      bool have_pcf = fs::exists(paths.pcf_ckpt(seed, k));
      build_novel(cfg, paths, bench, seed, k, have_pcf ? "three_stage" : "two_stage", opt.force);
    }
  }
  mark_step(paths, "train-novel");
}

void cmd_build_prototypes(const ExperimentConfig& cfg, const RunOptions& opt) {
  ExperimentPaths paths = resolve_paths(cfg);
  init_out_dir(cfg, paths, opt.force);
  Benchmark bench = require_data(paths);
  for (uint64_t seed : pick_seeds(cfg, opt)) {
    for (int k : pick_ks(cfg, opt)) build_bank(cfg, paths, bench, seed, k, opt.force);
  }
  mark_step(paths, "build-prototypes");
}

void cmd_evaluate(const ExperimentConfig& cfg, const RunOptions& opt) {
  ExperimentPaths paths = resolve_paths(cfg);
  init_out_dir(cfg, paths, opt.force);
  Benchmark bench = require_data(paths);
  for (uint64_t seed : pick_seeds(cfg, opt)) {
    for (int k : pick_ks(cfg, opt)) {
      bool any = false;
      for (const char* procedure : {"two_stage", "three_stage"}) {
        if (!fs::exists(paths.novel_ckpt(seed, k, procedure))) continue;
        any = true;
        build_eval(cfg, paths, bench, seed, k, procedure, opt.force);
      }
      if (!any) {
        throw std::runtime_error("no novel checkpoint for seed " + std::to_string(seed) +
                                 ", K=" + std::to_string(k) + "; run train-novel first");
      }
    }
  }
  mark_step(paths, "evaluate");
}

namespace {

AblationCell cell_from(const EvalReport& r) { return AblationCell{r.ap, r.ap50, r.ap75}; }

AblationCell median_cell(const std::map<uint64_t, AblationCell>& per_seed) {
  std::vector<double> ap, ap50, ap75;
  for (const auto& [seed, c] : per_seed) {
    ap.push_back(c.ap);
    ap50.push_back(c.ap50);
    ap75.push_back(c.ap75);
  }
  return AblationCell{median_of(ap), median_of(ap50), median_of(ap75)};
}

json cell_json(const AblationCell& c) {
  return json{{"ap", c.ap}, {"ap50", c.ap50}, {"ap75", c.ap75}};
}

}  // namespace

double median_of(std::vector<double> values) {
  if (values.empty()) throw std::runtime_error("median of empty set");
  std::sort(values.begin(), values.end());
  size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

AblationMatrix run_ablation(const ExperimentConfig& cfg, int k,
                            const std::vector<uint64_t>& seeds, bool force) {
  ExperimentPaths paths = resolve_paths(cfg);
  init_out_dir(cfg, paths, force);
  Benchmark bench = require_data(paths);
  AblationMatrix m;
  m.k = k;
  m.seeds = seeds;
  for (uint64_t seed : seeds) {
    build_base(cfg, paths, bench, seed, false);  // shared by all rows, never forced here
    if (!fs::exists(paths.support(k, seed))) {
      SupportSet support = sample_kshot(bench.novel_pool, bench.novel_class_ids, k,
                                        derive_seed(seed, kTagSupport + static_cast<uint64_t>(k)));
      fs::create_directories(paths.root + "/support");
      save_support(paths.support(k, seed), support);
    }
    build_pcf(cfg, paths, bench, seed, k, force);
    build_novel(cfg, paths, bench, seed, k, "two_stage", force);
    build_novel(cfg, paths, bench, seed, k, "three_stage", force);
    build_bank(cfg, paths, bench, seed, k, force);
    build_eval(cfg, paths, bench, seed, k, "two_stage", force);
    build_eval(cfg, paths, bench, seed, k, "three_stage", force);
    m.base_checkpoint_hash[seed] = file_hash(paths.base_ckpt(seed));
    m.rows["baseline"][seed] =
        cell_from(eval_detections_file(bench, paths.detections(seed, k, "two_stage")));
    m.rows["pcf"][seed] =
        cell_from(eval_detections_file(bench, paths.detections(seed, k, "three_stage")));
    m.rows["me"][seed] =
        cell_from(eval_detections_file(bench, paths.detections(seed, k, "two_stage_me")));
    m.rows["pcf_me"][seed] =
        cell_from(eval_detections_file(bench, paths.detections(seed, k, "three_stage_me")));
  }
  for (const auto& [row, per_seed] : m.rows) m.medians[row] = median_cell(per_seed);

  json j;
  j["k"] = k;
  j["seeds"] = seeds;
  json hashes = json::object();
  for (const auto& [seed, h] : m.base_checkpoint_hash) hashes[std::to_string(seed)] = h;
  j["base_checkpoint_hash"] = hashes;
  json rows = json::object();
  for (const auto& [row, per_seed] : m.rows) {
    json per = json::object();
    for (const auto& [seed, c] : per_seed) per[std::to_string(seed)] = cell_json(c);
    rows[row] = {{"per_seed", per}, {"median", cell_json(m.medians.at(row))}};
  }
  j["rows"] = rows;
  write_text(paths.ablation_dir(k) + "/matrix.json", j.dump(2) + "\n");

  std::ostringstream csv;
  csv << "row,seed,ap,ap50,ap75\n";
  char buf[160];
  for (const char* row : {"baseline", "pcf", "me", "pcf_me"}) {
    for (uint64_t seed : seeds) {
      const AblationCell& c = m.rows.at(row).at(seed);
      std::snprintf(buf, sizeof(buf), "%s,%llu,%.6f,%.6f,%.6f\n", row,
                    static_cast<unsigned long long>(seed), c.ap, c.ap50, c.ap75);
      csv << buf;
    }
    const AblationCell& c = m.medians.at(row);
    std::snprintf(buf, sizeof(buf), "%s,median,%.6f,%.6f,%.6f\n", row, c.ap, c.ap50, c.ap75);
    csv << buf;
  }
  write_text(paths.ablation_dir(k) + "/matrix.csv", csv.str());
  return m;
}

void cmd_ablate(const ExperimentConfig& cfg, const RunOptions& opt) {
  int k = opt.k.value_or(cfg.ablation_k);
  AblationMatrix m = run_ablation(cfg, k, pick_seeds(cfg, opt), opt.force);
  for (const char* row : {"baseline", "pcf", "me", "pcf_me"}) {
    const AblationCell& c = m.medians.at(row);
    char buf[120];
    std::snprintf(buf, sizeof(buf), "K=%d %-8s median AP %.4f AP50 %.4f AP75 %.4f", k, row, c.ap,
                  c.ap50, c.ap75);
    log_line("ablate", buf);
  }
  ExperimentPaths paths = resolve_paths(cfg);
  mark_step(paths, "ablate");
}

EvalReport ensure_three_stage_eval(const ExperimentConfig& cfg, uint64_t seed, int k, bool force) {
  ExperimentPaths paths = resolve_paths(cfg);
  init_out_dir(cfg, paths, force);
  Benchmark bench = require_data(paths);
  build_base(cfg, paths, bench, seed, false);
  if (!fs::exists(paths.support(k, seed))) {
    SupportSet support = sample_kshot(bench.novel_pool, bench.novel_class_ids, k,
                                      derive_seed(seed, kTagSupport + static_cast<uint64_t>(k)));
    fs::create_directories(paths.root + "/support");
    save_support(paths.support(k, seed), support);
  }
  build_pcf(cfg, paths, bench, seed, k, force);
  build_novel(cfg, paths, bench, seed, k, "three_stage", force);
  build_eval(cfg, paths, bench, seed, k, "three_stage", force);
  return eval_detections_file(bench, paths.detections(seed, k, "three_stage"));
}

// ---- report ----

namespace {

struct RunRecord {
  std::string procedure;
  int k = 0;
  uint64_t seed = 0;
  double ap = 0.0, ap50 = 0.0, ap75 = 0.0;
};

std::vector<RunRecord> scan_runs(const ExperimentPaths& paths) {
  std::vector<RunRecord> records;
  fs::path runs = fs::path(paths.root) / "runs";
  if (!fs::exists(runs)) return records;
  for (const auto& seed_entry : fs::directory_iterator(runs)) {
    std::string sd = seed_entry.path().filename().string();
    if (sd.rfind("seed", 0) != 0) continue;
    uint64_t seed = std::strtoull(sd.c_str() + 4, nullptr, 10);
    for (const auto& k_entry : fs::directory_iterator(seed_entry.path())) {
      if (!k_entry.is_directory()) continue;
      std::string kd = k_entry.path().filename().string();
      if (kd.rfind("k", 0) != 0) continue;
      int k = std::atoi(kd.c_str() + 1);
      for (const char* procedure :
           {"two_stage", "three_stage", "two_stage_me", "three_stage_me"}) {
        fs::path eval = k_entry.path() / (std::string(procedure) + ".eval.json");
        if (!fs::exists(eval)) continue;
        json j = json::parse(read_text(eval.string()));
        records.push_back(RunRecord{procedure, k, seed, j.value("AP", 0.0), j.value("AP50", 0.0),
                                    j.value("AP75", 0.0)});
      }
    }
  }
  std::sort(records.begin(), records.end(), [](const RunRecord& a, const RunRecord& b) {
    if (a.procedure != b.procedure) return a.procedure < b.procedure;
    if (a.k != b.k) return a.k < b.k;
    return a.seed < b.seed;
  });
  return records;
}

}  // namespace

void cmd_report(const ExperimentConfig& cfg, const RunOptions& opt) {
  (void)opt;
  ExperimentPaths paths = resolve_paths(cfg);
  if (!fs::exists(paths.manifest())) {
    throw std::runtime_error("nothing to report under " + paths.root +
                             "; run the pipeline first");
  }
  std::vector<RunRecord> records = scan_runs(paths);
  if (records.empty()) {
    throw std::runtime_error("no completed evaluations under " + paths.root +
                             "; run evaluate or ablate first");
  }
  json manifest = json::parse(read_text(paths.manifest()));

  std::ostringstream md;
  char buf[200];
  md << "# Few-shot detection lab report\n\n";
  md << "Config hash `" << manifest.value("config_hash", "?") << "`, tool version "
     << manifest.value("version", "?") << ".\n";

  // Ablation tables, one per K found.
  std::vector<int> ablation_ks;
  fs::path abl = fs::path(paths.root) / "ablation";
  if (fs::exists(abl)) {
    for (const auto& entry : fs::directory_iterator(abl)) {
      std::string name = entry.path().filename().string();
      if (name.rfind("k", 0) == 0 && fs::exists(entry.path() / "matrix.json")) {
        ablation_ks.push_back(std::atoi(name.c_str() + 1));
      }
    }
    std::sort(ablation_ks.begin(), ablation_ks.end());
  }
  static const std::map<std::string, std::string> kRowLabels = {
      {"baseline", "baseline"}, {"pcf", "+PCF"}, {"me", "+ME"}, {"pcf_me", "+PCF+ME"}};
  for (int k : ablation_ks) {
    json j = json::parse(read_text(paths.ablation_dir(k) + "/matrix.json"));
    md << "\n## Ablation, K=" << k << " (medians over seeds";
    for (const auto& s : j.at("seeds")) md << " " << s.get<uint64_t>();
    md << ")\n\n| procedure | AP | AP50 | AP75 |\n|---|---|---|---|\n";
    for (const char* row : {"baseline", "pcf", "me", "pcf_me"}) {
      const json& c = j.at("rows").at(row).at("median");
      std::snprintf(buf, sizeof(buf), "| %s | %.4f | %.4f | %.4f |\n",
                    kRowLabels.at(row).c_str(), c.at("ap").get<double>(),
                    c.at("ap50").get<double>(), c.at("ap75").get<double>());
      md << buf;
    }
  }

  // Shot curve from the three-stage runs.
  std::map<int, std::map<uint64_t, RunRecord>> three_stage;
  for (const RunRecord& r : records) {
    if (r.procedure == "three_stage") three_stage[r.k][r.seed] = r;
  }
  std::ostringstream csv;
  csv << "k,median_ap,median_ap50,median_ap75,num_seeds\n";
  if (!three_stage.empty()) {
    md << "\n## Shot curve (three-stage procedure, median over seeds)\n\n"
       << "| K | AP | AP50 | AP75 | seeds |\n|---|---|---|---|---|\n";
    for (const auto& [k, per_seed] : three_stage) {
      std::vector<double> ap, ap50, ap75;
      for (const auto& [seed, r] : per_seed) {
        ap.push_back(r.ap);
        ap50.push_back(r.ap50);
        ap75.push_back(r.ap75);
      }
      std::snprintf(buf, sizeof(buf), "| %d | %.4f | %.4f | %.4f | %zu |\n", k, median_of(ap),
                    median_of(ap50), median_of(ap75), per_seed.size());
      md << buf;
      std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f,%zu\n", k, median_of(ap),
                    median_of(ap50), median_of(ap75), per_seed.size());
      csv << buf;
    }
  }

  md << "\n## Completed runs\n\n| procedure | K | seed | AP | AP50 | AP75 |\n"
     << "|---|---|---|---|---|---|\n";
  for (const RunRecord& r : records) {
    std::snprintf(buf, sizeof(buf), "| %s | %d | %llu | %.4f | %.4f | %.4f |\n",
                  r.procedure.c_str(), r.k, static_cast<unsigned long long>(r.seed), r.ap, r.ap50,
                  r.ap75);
    md << buf;
  }

  write_text(paths.report_md(), md.str());
  write_text(paths.shot_curve_csv(), csv.str());
  log_line("report", "wrote " + paths.report_md() + " (" + std::to_string(records.size()) +
                         " completed runs)");
}

}  // namespace fsod
