#include "fsod/param.hpp"

#include <stdexcept>

namespace fsod {

const char* param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kClassifier: return "CLASSIFIER";
    case ParamGroup::kOther: return "OTHER";
    case ParamGroup::kBackboneBottom: return "BACKBONE_BOTTOM";
  }
  return "?";
}

Param& ParamStore::create(const std::string& name, Tensor init, ParamGroup group) {
  if (index_.count(name)) throw std::runtime_error("param store: duplicate name '" + name + "'");
  params_.emplace_back();
  Param& p = params_.back();
  p.name = name;
  p.t = std::move(init);
  p.group = group;
  index_[name] = params_.size() - 1;
  return p;
}

void ParamStore::reassign(const std::string& name, Tensor t) {
  Param& p = get(name);
  p.t = std::move(t);
  p.grad.reset();
  p.adam.reset();
}

Param& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::runtime_error("param store: unknown name '" + name + "'");
  return params_[it->second];
}

const Param& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::runtime_error("param store: unknown name '" + name + "'");
  return params_[it->second];
}

std::vector<Param*> ParamStore::all() {
  std::vector<Param*> out;
  out.reserve(params_.size());
  for (Param& p : params_) out.push_back(&p);
  return out;
}

std::vector<const Param*> ParamStore::all() const {
  std::vector<const Param*> out;
  out.reserve(params_.size());
  for (const Param& p : params_) out.push_back(&p);
  return out;
}

void ParamStore::clear_grads() {
  for (Param& p : params_) p.clear_grad();
}

}  // namespace fsod
