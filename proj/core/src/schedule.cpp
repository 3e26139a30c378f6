#include "fsod/schedule.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "fsod/rng.hpp"

namespace fsod {

const char* stage_kind_name(StageKind k) {
  switch (k) {
    case StageKind::kBase: return "BASE";
    case StageKind::kPcf: return "PCF";
    case StageKind::kNovel: return "NOVEL";
  }
  return "?";
}

ParamPartition partition_params(const SparseDetector& model) {
  ParamPartition part;
  for (const Param* p : model.params().all()) {
    switch (p->group) {
      case ParamGroup::kClassifier:
        part.c_set.push_back(p->name);
        break;
      case ParamGroup::kOther:
      case ParamGroup::kBackboneBottom:
        part.e_set.push_back(p->name);
        break;
      default:
        throw std::runtime_error("partition_params: param '" + p->name + "' has no group tag");
    }
  }
  return part;
}

void reinit_classifiers(SparseDetector& model, const std::vector<int>& new_class_ids,
                        uint64_t seed) {
  model.reinit_classifiers(new_class_ids, seed);
}

namespace {

std::map<int, int> class_column_map(const SparseDetector& model) {
  std::map<int, int> m;
  const std::vector<int>& ids = model.class_ids();
  for (int col = 0; col < static_cast<int>(ids.size()); ++col) m[ids[col]] = col;
  return m;
}

}  // namespace

std::vector<TrainSample> base_samples(const Benchmark& bench, const SparseDetector& model) {
  std::map<int, int> col = class_column_map(model);
  std::vector<TrainSample> samples;
  samples.reserve(bench.base.images.size());
  for (const SceneImage& img : bench.base.images) {
    TrainSample s;
    s.raster = img.raster;
    for (const SceneInstance& inst : img.instances) {
      auto it = col.find(inst.class_id);
      if (it != col.end()) s.targets.push_back(LossTarget{it->second, inst.box});
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

std::vector<TrainSample> support_samples(const Benchmark& bench, const SupportSet& support,
                                         const SparseDetector& model) {
  std::map<int, int> col = class_column_map(model);
  // Group refs per pool image; each selected image becomes one sample whose
  // targets are exactly its support instances.
  std::map<int, std::vector<int>> by_image;
  for (const SupportRef& r : support.refs) by_image[r.image_index].push_back(r.instance_index);
  std::vector<TrainSample> samples;
  samples.reserve(by_image.size());
  for (const auto& [image_index, inst_indices] : by_image) {
    const SceneImage& img = bench.novel_pool.images.at(image_index);
    TrainSample s;
    s.raster = img.raster;
    for (int j : inst_indices) {
      const SceneInstance& inst = img.instances.at(j);
      auto it = col.find(inst.class_id);
      if (it != col.end()) s.targets.push_back(LossTarget{it->second, inst.box});
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

StageResult run_stage(SparseDetector& model, const StagePlan& plan,
                      const std::vector<TrainSample>& samples) {
  if (plan.steps < 1) throw std::runtime_error("run_stage: steps must be >= 1");
  if (plan.batch_size < 1) throw std::runtime_error("run_stage: batch_size must be >= 1");
  if (samples.empty()) throw std::runtime_error("run_stage: no training samples");

  auto trainable_in_stage = [&](const Param& p) {
    switch (plan.kind) {
      case StageKind::kBase:
        return true;
      case StageKind::kPcf:
        return p.group == ParamGroup::kClassifier;
      case StageKind::kNovel:
        return p.group != ParamGroup::kBackboneBottom;
    }
    throw std::runtime_error("run_stage: unknown stage kind");
  };
  std::vector<Param*> all = model.params().all();
  for (Param* p : all) {
    p->trainable = trainable_in_stage(*p);
    p->adam.reset();  // fresh optimizer per stage
    p->clear_grad();
  }

  OptimConfig optim = plan.optim;
  optim.learning_rate = plan.learning_rate;
  optim.validate();

  RngStream shuffle_rng(derive_seed(plan.seed, 0x5e));
  std::vector<int> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  size_t pos = order.size();

  StageResult result;
  result.kind = plan.kind;
  auto start = std::chrono::steady_clock::now();
  for (int step = 0; step < plan.steps; ++step) {
    model.params().clear_grads();
    int batch = std::min<int>(plan.batch_size, static_cast<int>(samples.size()));
    double loss_sum = 0.0;
    for (int b = 0; b < batch; ++b) {
      if (pos == order.size()) {
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
          std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
        }
        pos = 0;
      }
      const TrainSample& sample = samples[order[pos++]];
      Tape t;
      std::vector<StageOutput> outs = model.forward(t, sample.raster);
      Var loss = set_loss(t, outs, sample.targets, plan.loss);
      loss_sum += t.value(loss).v[0];
      t.backward(loss);
    }
    for (Param* p : all) {
      if (p->trainable && p->grad.has_value()) {
        for (double& g : p->grad->v) g /= batch;
      }
    }
    adamw_step(all, optim);
    result.loss_curve.push_back(loss_sum / batch);
    ++result.steps_run;

    int w = plan.early_stop_window;
    if (w > 0 && static_cast<int>(result.loss_curve.size()) >= 2 * w) {
      auto mean_of = [&](int from, int count) {
        double s = 0.0;
        for (int i = from; i < from + count; ++i) s += result.loss_curve[i];
        return s / count;
      };
      int n = static_cast<int>(result.loss_curve.size());
      double prev = mean_of(n - 2 * w, w);
      double last = mean_of(n - w, w);
      if (prev - last < plan.min_improve) break;
    }
  }
  result.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  for (Param* p : all) {
    p->trainable = true;
    p->clear_grad();
  }
  return result;
}

namespace {

void check_kind(const StagePlan& plan, StageKind want, const char* procedure) {
  if (plan.kind != want) {
    throw std::runtime_error(std::string(procedure) + ": expected a " +
                             stage_kind_name(want) + " plan, got " + stage_kind_name(plan.kind));
  }
}

}  // namespace

ProcedureResult transfer_two_stage(SparseDetector& model, const Benchmark& bench,
                                   const SupportSet& support, const TransferPlans& plans) {
  check_kind(plans.base, StageKind::kBase, "transfer_two_stage");
  check_kind(plans.novel, StageKind::kNovel, "transfer_two_stage");
  ProcedureResult result;
  result.stages.push_back(run_stage(model, plans.base, base_samples(bench, model)));
  reinit_classifiers(model, bench.novel_class_ids, plans.reinit_seed);
  result.stages.push_back(
      run_stage(model, plans.novel, support_samples(bench, support, model)));
  return result;
}

ProcedureResult transfer_three_stage(SparseDetector& model, const Benchmark& bench,
                                     const SupportSet& support, const TransferPlans& plans) {
  check_kind(plans.base, StageKind::kBase, "transfer_three_stage");
  check_kind(plans.pcf, StageKind::kPcf, "transfer_three_stage");
  check_kind(plans.novel, StageKind::kNovel, "transfer_three_stage");
  ProcedureResult result;
  result.stages.push_back(run_stage(model, plans.base, base_samples(bench, model)));
  reinit_classifiers(model, bench.novel_class_ids, plans.reinit_seed);
  std::vector<TrainSample> support_data = support_samples(bench, support, model);
  result.stages.push_back(run_stage(model, plans.pcf, support_data));
  result.stages.push_back(run_stage(model, plans.novel, support_data));
  return result;
}

uint64_t params_checksum(const ParamStore& params, const std::vector<std::string>& names) {
  uint64_t h = 1469598103934665603ull;
  auto mix_bytes = [&h](const void* data, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const std::string& name : names) {
    const Param& p = params.get(name);
    mix_bytes(name.data(), name.size());
    mix_bytes(p.t.v.data(), p.t.v.size() * sizeof(double));
  }
  return h;
}

}  // namespace fsod
