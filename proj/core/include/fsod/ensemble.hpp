#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fsod/detector.hpp"
#include "fsod/param.hpp"
#include "fsod/synthdata.hpp"
#include "fsod/tensor.hpp"

namespace fsod {

struct ReferenceTrainConfig {
  BackboneConfig backbone;  // same block topology as the detector
  int roi_output_size = 5;
  int images_per_class = 8;
  int batch_size = 8;
  double learning_rate = 2e-3;
  double weight_decay = 1e-4;
  int max_steps = 1500;
  double target_accuracy = 0.9;

  void validate() const;
};

// Frozen feature extractor trained on a shape-classification task over a
// class set disjoint from everything the detector ever sees. All params are
// non-trainable after construction; optimizer steps leave them untouched.
class ReferenceBackbone {
 public:
  // Final conv block activations, stride 8.
  Tensor feature_map(const Tensor& image);
  // roi_align over a precomputed map, flattened row-major.
  std::vector<double> roi_vector(const Tensor& fmap, const Box& box);
  std::vector<double> instance_vector(const Tensor& image, const Box& box);
  int feature_dim() const;

  int classify(const Tensor& image);  // argmax over the training classes
  double train_accuracy() const { return train_accuracy_; }
  bool frozen() const { return true; }
  const std::vector<int>& class_ids() const { return class_ids_; }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  std::string manifest_json() const;
  static ReferenceBackbone from_manifest_json(const std::string& json_text);

 private:
  friend ReferenceBackbone train_reference_backbone(const Benchmark& bench,
                                                    const ReferenceTrainConfig& cfg,
                                                    uint64_t seed);
  ReferenceBackbone(ReferenceTrainConfig cfg, std::vector<int> class_ids, uint64_t seed);
  Var map_forward(Tape& t, const Tensor& image);
  Var logits_forward(Tape& t, const Tensor& image);

  ReferenceTrainConfig cfg_;
  std::vector<int> class_ids_;
  double train_accuracy_ = 0.0;
  ParamStore params_;
};

// Trains on a generated auxiliary set until train accuracy reaches the
// target, then freezes. The auxiliary classes must be disjoint from both the
// base and novel sets.
ReferenceBackbone train_reference_backbone(const Benchmark& bench,
                                           const ReferenceTrainConfig& cfg, uint64_t seed);

struct PrototypeBank {
  std::map<int, std::vector<double>> prototypes;  // class id -> r_c
  int dim = 0;
  std::string support_fingerprint;
};

// Arithmetic mean of the reference features of each novel class's support
// instances. Every novel class must appear at least once.
PrototypeBank build_prototypes(ReferenceBackbone& ref, const Benchmark& bench,
                               const SupportSet& support);

double cosine(const std::vector<double>& a, const std::vector<double>& b);

// cos(roi feature of the box, prototype of class_id). Zero-norm features
// score 0 with a stderr warning.
double similarity_score(ReferenceBackbone& ref, const Tensor& image, const Box& box,
                        const PrototypeBank& bank, int class_id);

struct EnsembleConfig {
  double alpha = 0.7;  // detector weight
  double beta = 0.3;   // prototype weight

  void validate() const;  // alpha + beta must equal 1 within 1e-12, both in [0,1]
};

double ensemble_score(double detector_score, double prototype_score, const EnsembleConfig& cfg);

// Rescores each detection of one image against the prototype of its
// predicted class and re-sorts canonically.
std::vector<Detection> rescore_detections(ReferenceBackbone& ref, const PrototypeBank& bank,
                                          const EnsembleConfig& cfg, std::vector<Detection> dets,
                                          const Tensor& image);

void save_prototype_bank(const std::string& path, const PrototypeBank& bank);
PrototypeBank load_prototype_bank(const std::string& path);

}  // namespace fsod
