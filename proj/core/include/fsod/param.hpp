#pragma once

#include <deque>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fsod/tensor.hpp"

namespace fsod {

// Partition tags. CLASSIFIER marks exactly the per-stage linear classifier
// weights; BACKBONE_BOTTOM the first two backbone blocks; OTHER the rest.
enum class ParamGroup : uint8_t { kClassifier = 0, kOther = 1, kBackboneBottom = 2 };

const char* param_group_name(ParamGroup g);

struct AdamState {
  Tensor m;      // first moment
  Tensor v;      // second moment
  int64_t step = 0;

  bool initialized() const { return !m.empty(); }
  void reset() { m = Tensor(); v = Tensor(); step = 0; }
};

struct Param {
  std::string name;
  Tensor t;
  std::optional<Tensor> grad;
  bool trainable = true;
  ParamGroup group = ParamGroup::kOther;
  AdamState adam;

  void clear_grad() { grad.reset(); }
};

// Owning registry with stable addresses and deterministic (insertion) order.
class ParamStore {
 public:
  Param& create(const std::string& name, Tensor init, ParamGroup group);
  // Replaces the tensor of an existing param (shape may change); resets
  // optimizer state and gradient.
  void reassign(const std::string& name, Tensor t);

  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Param*> all();
  std::vector<const Param*> all() const;
  size_t size() const { return params_.size(); }

  void clear_grads();

 private:
  std::deque<Param> params_;
  std::map<std::string, size_t> index_;
};

}  // namespace fsod
