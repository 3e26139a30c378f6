#include "fsod/detector.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fsod/rng.hpp"
#include "json.hpp"

namespace fsod {

namespace {

using nlohmann::json;

constexpr double kFocalPrior = 0.01;  // expected positive rate at init

double focal_prior_bias() { return -std::log((1.0 - kFocalPrior) / kFocalPrior); }

Tensor uniform_init(Shape s, int fan_in, RngStream& rng) {
  Tensor t(std::move(s));
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& x : t.v) x = rng.uniform(-bound, bound);
  return t;
}

double logit_clamped(double p) {
  p = std::clamp(p, 1e-6, 1.0 - 1e-6);
  return std::log(p / (1.0 - p));
}

}  // namespace

void BackboneConfig::validate() const {
  if (block_channel_widths.size() < 3) {
    throw std::runtime_error("backbone config: need at least 3 blocks, got " +
                             std::to_string(block_channel_widths.size()));
  }
  for (int c : block_channel_widths) {
    if (c < 1) throw std::runtime_error("backbone config: non-positive channel width");
  }
  if (pyramid_levels < 1 ||
      pyramid_levels > static_cast<int>(block_channel_widths.size())) {
    throw std::runtime_error("backbone config: pyramid_levels out of range");
  }
}

void CascadeConfig::validate() const {
  if (num_stages < 1) throw std::runtime_error("cascade config: num_stages must be >= 1");
  if (num_proposals < 1) throw std::runtime_error("cascade config: num_proposals must be >= 1");
  if (encoding_dim < 1) throw std::runtime_error("cascade config: encoding_dim must be >= 1");
  if (roi_output_size < 1) {
    throw std::runtime_error("cascade config: roi_output_size must be >= 1");
  }
  if (num_classes < 1) throw std::runtime_error("cascade config: num_classes must be >= 1");
}

int choose_pyramid_level(double box_area, int num_levels) {
  int lvl = num_levels - 1;
  double thresh = 0.25;
  while (lvl > 0 && box_area < thresh) {
    thresh /= 4.0;
    --lvl;
  }
  return lvl;
}

RoiBinGrid roi_bin_grid(const Box& box, int map_h, int map_w, int out_size) {
  Xyxy r = to_xyxy(box);
  r.x0 = std::clamp(r.x0, 0.0, 1.0);
  r.y0 = std::clamp(r.y0, 0.0, 1.0);
  r.x1 = std::clamp(r.x1, 0.0, 1.0);
  r.y1 = std::clamp(r.y1, 0.0, 1.0);
  double y0f = r.y0 * map_h, y1f = r.y1 * map_h;
  double x0f = r.x0 * map_w, x1f = r.x1 * map_w;
  int k = out_size;
  RoiBinGrid grid;
  grid.out_size = k;
  grid.y0.resize(static_cast<size_t>(k) * k);
  grid.y1.resize(static_cast<size_t>(k) * k);
  grid.x0.resize(static_cast<size_t>(k) * k);
  grid.x1.resize(static_cast<size_t>(k) * k);
  for (int by = 0; by < k; ++by) {
    double ya = y0f + (y1f - y0f) * by / k;
    double yb = y0f + (y1f - y0f) * (by + 1) / k;
    int yc0 = std::clamp(static_cast<int>(std::floor(ya)), 0, map_h - 1);
    int yc1 = std::clamp(static_cast<int>(std::ceil(yb)), yc0 + 1, map_h);
    for (int bx = 0; bx < k; ++bx) {
      double xa = x0f + (x1f - x0f) * bx / k;
      double xb = x0f + (x1f - x0f) * (bx + 1) / k;
      int xc0 = std::clamp(static_cast<int>(std::floor(xa)), 0, map_w - 1);
      int xc1 = std::clamp(static_cast<int>(std::ceil(xb)), xc0 + 1, map_w);
      size_t bin = static_cast<size_t>(by) * k + bx;
      grid.y0[bin] = yc0;
      grid.y1[bin] = yc1;
      grid.x0[bin] = xc0;
      grid.x1[bin] = xc1;
    }
  }
  return grid;
}

Var roi_pool(Tape& t, Var map, const Box& box, int out_size) {
  const Tensor& m = t.value(map);
  return t.roi_max_pool(map, roi_bin_grid(box, m.shape[1], m.shape[2], out_size));
}

Var roi_align(Tape& t, Var map, const Box& box, int out_size) {
  const Tensor& m = t.value(map);
  int map_h = m.shape[1], map_w = m.shape[2];
  Xyxy r = to_xyxy(box);
  r.x0 = std::clamp(r.x0, 0.0, 1.0);
  r.y0 = std::clamp(r.y0, 0.0, 1.0);
  r.x1 = std::clamp(r.x1, 0.0, 1.0);
  r.y1 = std::clamp(r.y1, 0.0, 1.0);
  double y0f = r.y0 * map_h, span_y = (r.y1 - r.y0) * map_h;
  double x0f = r.x0 * map_w, span_x = (r.x1 - r.x0) * map_w;
  std::vector<SamplePoint> pts;
  pts.reserve(static_cast<size_t>(out_size) * out_size);
  for (int by = 0; by < out_size; ++by) {
    for (int bx = 0; bx < out_size; ++bx) {
      pts.push_back({y0f + span_y * (by + 0.5) / out_size, x0f + span_x * (bx + 0.5) / out_size});
    }
  }
  return t.bilinear_sample(map, pts);
}

SparseDetector::SparseDetector(BackboneConfig bb, CascadeConfig cc, uint64_t seed)
    : bb_(std::move(bb)), cc_(cc) {
  bb_.validate();
  cc_.validate();
  class_ids_.resize(cc_.num_classes);
  for (int c = 0; c < cc_.num_classes; ++c) class_ids_[c] = c;
  build_params(seed);
}

void SparseDetector::set_class_ids(std::vector<int> ids) {
  if (static_cast<int>(ids.size()) != cc_.num_classes) {
    throw std::runtime_error("detector: " + std::to_string(ids.size()) +
                             " class ids for num_classes " + std::to_string(cc_.num_classes));
  }
  class_ids_ = std::move(ids);
}

void SparseDetector::reinit_classifiers(const std::vector<int>& new_class_ids, uint64_t seed) {
  int n = static_cast<int>(new_class_ids.size());
  if (n < 1) throw std::runtime_error("reinit_classifiers: need at least one class");
  RngStream rng(derive_seed(seed, 0x22));
  int d = cc_.encoding_dim;
  for (int s = 0; s < cc_.num_stages; ++s) {
    std::string base = "stage" + std::to_string(s);
    params_.reassign(base + ".fcls.w", uniform_init({d, n}, d, rng));
    params_.reassign(base + ".fcls.b", Tensor::full({n}, focal_prior_bias()));
  }
  cc_.num_classes = n;
  class_ids_ = new_class_ids;
}

void SparseDetector::build_params(uint64_t seed) {
  RngStream rng(derive_seed(seed, 0x11));
  int nb = static_cast<int>(bb_.block_channel_widths.size());
  int in_ch = 3;
  for (int b = 0; b < nb; ++b) {
    int out_ch = bb_.block_channel_widths[b];
    ParamGroup g = b < 2 ? ParamGroup::kBackboneBottom : ParamGroup::kOther;
    std::string base = "backbone.b" + std::to_string(b + 1);
    params_.create(base + ".c1.w", uniform_init({in_ch * 9, out_ch}, in_ch * 9, rng), g);
    params_.create(base + ".c1.b", Tensor::zeros({out_ch}), g);
    params_.create(base + ".c2.w", uniform_init({out_ch * 9, out_ch}, out_ch * 9, rng), g);
    params_.create(base + ".c2.b", Tensor::zeros({out_ch}), g);
    in_ch = out_ch;
  }
  int d = cc_.encoding_dim;
  int L = bb_.pyramid_levels;
  for (int lv = 0; lv < L; ++lv) {
    int block = nb - L + lv;  // level 0 taps the finest participating block
    int bc = bb_.block_channel_widths[block];
    std::string base = "fpn.l" + std::to_string(lv);
    params_.create(base + ".lat.w", uniform_init({bc, d}, bc, rng), ParamGroup::kOther);
    params_.create(base + ".lat.b", Tensor::zeros({d}), ParamGroup::kOther);
    params_.create(base + ".out.w", uniform_init({d * 9, d}, d * 9, rng), ParamGroup::kOther);
    params_.create(base + ".out.b", Tensor::zeros({d}), ParamGroup::kOther);
  }
  {
    Tensor b0({cc_.num_proposals, 4});
    for (int p = 0; p < cc_.num_proposals; ++p) {
      b0.at2(p, 0) = logit_clamped(rng.uniform(0.25, 0.75));
      b0.at2(p, 1) = logit_clamped(rng.uniform(0.25, 0.75));
      b0.at2(p, 2) = logit_clamped(rng.uniform(0.3, 0.8));
      b0.at2(p, 3) = logit_clamped(rng.uniform(0.3, 0.8));
    }
    params_.create("proposals.b0", std::move(b0), ParamGroup::kOther);
    params_.create("proposals.q0", uniform_init({cc_.num_proposals, d}, d, rng),
                   ParamGroup::kOther);
  }
  for (int s = 0; s < cc_.num_stages; ++s) {
    std::string base = "stage" + std::to_string(s);
    for (const char* nm : {"wq", "wk", "wv", "wo"}) {
      params_.create(base + ".attn." + nm, uniform_init({d, d}, d, rng), ParamGroup::kOther);
    }
    for (const char* nm : {"bq", "bk", "bv", "bo"}) {
      params_.create(base + ".attn." + nm, Tensor::zeros({d}), ParamGroup::kOther);
    }
    params_.create(base + ".norm1.g", Tensor::full({d}, 1.0), ParamGroup::kOther);
    params_.create(base + ".norm1.b", Tensor::zeros({d}), ParamGroup::kOther);
    params_.create(base + ".ffn.w1", uniform_init({d, 2 * d}, d, rng), ParamGroup::kOther);
    params_.create(base + ".ffn.b1", Tensor::zeros({2 * d}), ParamGroup::kOther);
    params_.create(base + ".ffn.w2", uniform_init({2 * d, d}, 2 * d, rng), ParamGroup::kOther);
    params_.create(base + ".ffn.b2", Tensor::zeros({d}), ParamGroup::kOther);
    params_.create(base + ".norm2.g", Tensor::full({d}, 1.0), ParamGroup::kOther);
    params_.create(base + ".norm2.b", Tensor::zeros({d}), ParamGroup::kOther);
    for (const char* dec : {"dbox", "dcls"}) {
      std::string db = base + "." + dec;
      params_.create(db + ".w1", uniform_init({d, d}, d, rng), ParamGroup::kOther);
      params_.create(db + ".b1", Tensor::zeros({d}), ParamGroup::kOther);
      params_.create(db + ".w2", uniform_init({d, d}, d, rng), ParamGroup::kOther);
      params_.create(db + ".b2", Tensor::zeros({d}), ParamGroup::kOther);
    }
    params_.create(base + ".fbox.w", uniform_init({d, 4}, d, rng), ParamGroup::kOther);
    params_.create(base + ".fbox.b", Tensor::zeros({4}), ParamGroup::kOther);
    params_.create(base + ".fcls.w", uniform_init({d, cc_.num_classes}, d, rng),
                   ParamGroup::kClassifier);
    params_.create(base + ".fcls.b", Tensor::full({cc_.num_classes}, focal_prior_bias()),
                   ParamGroup::kClassifier);
  }
}

std::vector<Var> SparseDetector::backbone_forward(Tape& t, const Tensor& image) {
  if (image.ndim() != 3 || image.shape[0] != 3) {
    throw std::runtime_error("backbone: expected 3-channel [3,H,W] image, got " +
                             shape_str(image.shape));
  }
  int nb = static_cast<int>(bb_.block_channel_widths.size());
  Var x = t.constant(image);
  std::vector<Var> block_out;
  for (int b = 0; b < nb; ++b) {
    std::string base = "backbone.b" + std::to_string(b + 1);
    x = t.relu(conv2d(t, x, t.leaf(params_.get(base + ".c1.w")),
                      t.leaf(params_.get(base + ".c1.b")), 3, 2, 1));
    x = t.relu(conv2d(t, x, t.leaf(params_.get(base + ".c2.w")),
                      t.leaf(params_.get(base + ".c2.b")), 3, 1, 1));
    block_out.push_back(x);
  }
  int L = bb_.pyramid_levels;
  std::vector<Var> pyramid(L);
  Var above{};  // running top-down path
  for (int lv = L - 1; lv >= 0; --lv) {
    std::string base = "fpn.l" + std::to_string(lv);
    Var lat = conv2d(t, block_out[nb - L + lv], t.leaf(params_.get(base + ".lat.w")),
                     t.leaf(params_.get(base + ".lat.b")), 1, 1, 0);
    Var merged = lv == L - 1 ? lat : t.add(lat, t.upsample2x(above));
    above = merged;
    pyramid[lv] = conv2d(t, merged, t.leaf(params_.get(base + ".out.w")),
                         t.leaf(params_.get(base + ".out.b")), 3, 1, 1);
  }
  return pyramid;
}

StageOutput SparseDetector::head_stage(Tape& t, int stage, Var q_prev, Var b_prev,
                                       const std::vector<Var>& pyramid) {
  if (stage < 0 || stage >= cc_.num_stages) {
    throw std::runtime_error("head_stage: stage " + std::to_string(stage) + " out of range [0," +
                             std::to_string(cc_.num_stages) + ")");
  }
  int P = cc_.num_proposals;
  int d = cc_.encoding_dim;
  int k = cc_.roi_output_size;
  int cells_per_roi = k * k;
  const Tensor& bvals = t.value(b_prev);
  std::string base = "stage" + std::to_string(stage);

  std::vector<Var> roi_cells;
  roi_cells.reserve(P);
  for (int p = 0; p < P; ++p) {
    Box box{bvals.at2(p, 0), bvals.at2(p, 1), bvals.at2(p, 2), bvals.at2(p, 3)};
    int lvl = choose_pyramid_level(box.w * box.h, static_cast<int>(pyramid.size()));
    Var pooled = roi_pool(t, pyramid[lvl], box, k);        // [d,k,k]
    roi_cells.push_back(t.transpose(t.reshape(pooled, {d, cells_per_roi})));
  }
  Var cells = t.concat(roi_cells, 0);  // [P*k*k, d]

  auto lin = [&](Var in, const char* w, const char* b) {
    return linear(t, in, t.leaf(params_.get(base + w)), t.leaf(params_.get(base + b)));
  };
  Var Q = lin(q_prev, ".attn.wq", ".attn.bq");
  Var K = lin(cells, ".attn.wk", ".attn.bk");
  Var V = lin(cells, ".attn.wv", ".attn.bv");
  std::vector<Var> att_rows;
  att_rows.reserve(P);
  for (int p = 0; p < P; ++p) {
    att_rows.push_back(sdpa(t, t.slice_rows(Q, p, 1), t.slice_rows(K, p * cells_per_roi, cells_per_roi),
                            t.slice_rows(V, p * cells_per_roi, cells_per_roi)));
  }
  Var att = lin(t.concat(att_rows, 0), ".attn.wo", ".attn.bo");
  Var h = t.layer_norm(t.add(q_prev, att), t.leaf(params_.get(base + ".norm1.g")),
                       t.leaf(params_.get(base + ".norm1.b")));
  Var f = lin(t.relu(lin(h, ".ffn.w1", ".ffn.b1")), ".ffn.w2", ".ffn.b2");
  Var q = t.layer_norm(t.add(h, f), t.leaf(params_.get(base + ".norm2.g")),
                       t.leaf(params_.get(base + ".norm2.b")));
  Var u = lin(t.relu(lin(q, ".dbox.w1", ".dbox.b1")), ".dbox.w2", ".dbox.b2");
  Var v = lin(t.relu(lin(q, ".dcls.w1", ".dcls.b1")), ".dcls.w2", ".dcls.b2");
  Var delta = lin(u, ".fbox.w", ".fbox.b");
  Var b_base = cc_.detach_boxes ? t.detach(b_prev) : b_prev;
  Var boxes = t.sigmoid(t.add(t.logit(b_base), delta));
  Var logits = lin(v, ".fcls.w", ".fcls.b");
  return StageOutput{q, u, v, boxes, logits};
}

std::vector<StageOutput> SparseDetector::forward(Tape& t, const Tensor& image) {
  std::vector<Var> pyramid = backbone_forward(t, image);
  Var q = t.leaf(params_.get("proposals.q0"));
  Var b = t.sigmoid(t.leaf(params_.get("proposals.b0")));
  std::vector<StageOutput> outs;
  outs.reserve(cc_.num_stages);
  for (int s = 0; s < cc_.num_stages; ++s) {
    StageOutput so = head_stage(t, s, q, b, pyramid);
    q = so.q;
    b = so.boxes;
    outs.push_back(so);
  }
  return outs;
}

std::vector<Detection> SparseDetector::detect(const Tensor& image, double score_floor) {
  Tape t;
  std::vector<StageOutput> outs = forward(t, image);
  const Tensor& logits = t.value(outs.back().logits);
  const Tensor& boxes = t.value(outs.back().boxes);
  std::vector<Detection> dets;
  for (int p = 0; p < cc_.num_proposals; ++p) {
    for (int c = 0; c < cc_.num_classes; ++c) {
      double score = 1.0 / (1.0 + std::exp(-logits.at2(p, c)));
      if (score > score_floor) {
        dets.push_back(Detection{-1, class_ids_[c], score,
                                 Box{boxes.at2(p, 0), boxes.at2(p, 1), boxes.at2(p, 2),
                                     boxes.at2(p, 3)}});
      }
    }
  }
  sort_detections(dets);
  return dets;
}

void sort_detections(std::vector<Detection>& dets) {
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    if (a.category_id != b.category_id) return a.category_id < b.category_id;
    if (a.box.cx != b.box.cx) return a.box.cx < b.box.cx;
    if (a.box.cy != b.box.cy) return a.box.cy < b.box.cy;
    if (a.box.w != b.box.w) return a.box.w < b.box.w;
    return a.box.h < b.box.h;
  });
}

std::string SparseDetector::manifest_json() const {
  json j;
  j["backbone"] = {{"block_channel_widths", bb_.block_channel_widths},
                   {"pyramid_levels", bb_.pyramid_levels}};
  j["cascade"] = {{"num_stages", cc_.num_stages},
                  {"num_proposals", cc_.num_proposals},
                  {"encoding_dim", cc_.encoding_dim},
                  {"roi_output_size", cc_.roi_output_size},
                  {"num_classes", cc_.num_classes},
                  {"detach_boxes", cc_.detach_boxes}};
  j["class_ids"] = class_ids_;
  return j.dump();
}

SparseDetector SparseDetector::from_manifest_json(const std::string& json_text) {
  json j = json::parse(json_text);
  BackboneConfig bb;
  bb.block_channel_widths = j.at("backbone").at("block_channel_widths").get<std::vector<int>>();
  bb.pyramid_levels = j.at("backbone").at("pyramid_levels").get<int>();
  CascadeConfig cc;
  const json& jc = j.at("cascade");
  cc.num_stages = jc.at("num_stages").get<int>();
  cc.num_proposals = jc.at("num_proposals").get<int>();
  cc.encoding_dim = jc.at("encoding_dim").get<int>();
  cc.roi_output_size = jc.at("roi_output_size").get<int>();
  cc.num_classes = jc.at("num_classes").get<int>();
  cc.detach_boxes = jc.at("detach_boxes").get<bool>();
  SparseDetector det(bb, cc, 0);
  det.set_class_ids(j.at("class_ids").get<std::vector<int>>());
  return det;
}

}  // namespace fsod
