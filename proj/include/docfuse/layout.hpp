#pragma once
// Layout-aware inputs: relative attention biases over 1D token positions and
// 2D box geometry, plus per-token visual embeddings pooled from a page
// feature grid.
//
// Bucketing is bidirectional: the sign of the offset selects a table half,
// |offset| maps linearly up to num_buckets/4 and logarithmically out to
// max_distance, clamped beyond. Spatial offsets are first quantized to
// integer thousandths of a page.

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "docfuse/common.hpp"
#include "docfuse/tensor.hpp"

namespace docfuse {

// Reserved token ids shared by the corpus generator, model, and CLI.
constexpr int32_t kPadId = 0;
constexpr int32_t kEosId = 1;
constexpr int32_t kQueryMarkId = 2;

struct BoundingBox {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int page = 0;

  void validate() const {
    if (!(x0 <= x1 && y0 <= y1))
      throw ValidationError("box has inverted corners");
    if (x0 < 0 || y0 < 0 || x1 > 1 || y1 > 1)
      throw ValidationError("box coordinates outside [0,1]");
    if (page < 0) throw ValidationError("negative page index");
  }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }
};

inline int32_t bucket_relative_position(int64_t delta, int num_buckets, int64_t max_distance) {
  if (num_buckets < 4) throw ConfigError("bucket count must be >= 4");
  if (max_distance <= 0) throw ConfigError("max_distance must be > 0");
  int32_t base = 0;
  int half = num_buckets / 2;
  int64_t mag;
  if (delta > 0) {
    base = static_cast<int32_t>(half);
    mag = delta;
  } else {
    mag = -delta;
  }
  const int64_t max_exact = half / 2;
  if (mag < max_exact) return base + static_cast<int32_t>(mag);
  const double frac = std::log(static_cast<double>(mag) / static_cast<double>(max_exact)) /
                      std::log(static_cast<double>(max_distance) / static_cast<double>(max_exact));
  int64_t b = max_exact + static_cast<int64_t>(frac * static_cast<double>(half - max_exact));
  b = std::min<int64_t>(b, half - 1);
  return base + static_cast<int32_t>(b);
}

inline int32_t bucket_spatial_distance(double delta, int num_buckets, int64_t max_distance = 1000) {
  const int64_t q = static_cast<int64_t>(std::llround(delta * 1000.0));
  return bucket_relative_position(q, num_buckets, max_distance);
}

struct BiasConfig {
  int num_heads = 4;
  int num_buckets_1d = 32;
  int64_t max_distance_1d = 128;
  int num_buckets_2d = 32;
  int64_t max_distance_2d = 1000;
};

template <typename S>
struct BiasTables {
  BiasConfig cfg;
  TensorPtr<S> bias_1d;  // [heads, buckets_1d]
  TensorPtr<S> bias_h;   // [heads, buckets_2d]
  TensorPtr<S> bias_v;   // [heads, buckets_2d]

  static BiasTables init(const BiasConfig& cfg, Rng& rng, double stddev) {
    BiasTables t;
    t.cfg = cfg;
    t.bias_1d = randn_tensor<S>({cfg.num_heads, cfg.num_buckets_1d}, rng, stddev, true);
    t.bias_h = randn_tensor<S>({cfg.num_heads, cfg.num_buckets_2d}, rng, stddev, true);
    t.bias_v = randn_tensor<S>({cfg.num_heads, cfg.num_buckets_2d}, rng, stddev, true);
    return t;
  }
};

// Bucket index planes for a (query, key) grid; shared across heads.
struct BiasIndexPlan {
  int64_t rows = 0, cols = 0;
  std::vector<int32_t> idx_1d, idx_h, idx_v;
};

// Relative offsets are key minus query: entry [i][j] describes token j as
// seen from token i. 2D offsets use box centroids in the page frame, so
// pages share one coordinate system and page breaks live in the 1D term.
inline BiasIndexPlan bias_index_plan(const std::vector<int64_t>& q_positions,
                                     const std::vector<BoundingBox>& q_boxes,
                                     const std::vector<int64_t>& k_positions,
                                     const std::vector<BoundingBox>& k_boxes,
                                     const BiasConfig& cfg) {
  if (q_positions.size() != q_boxes.size() || k_positions.size() != k_boxes.size())
    throw DimensionError("positions and boxes differ in length");
  BiasIndexPlan plan;
  plan.rows = static_cast<int64_t>(q_positions.size());
  plan.cols = static_cast<int64_t>(k_positions.size());
  const size_t total = q_positions.size() * k_positions.size();
  plan.idx_1d.resize(total);
  plan.idx_h.resize(total);
  plan.idx_v.resize(total);
  for (size_t i = 0; i < q_positions.size(); ++i) {
    for (size_t j = 0; j < k_positions.size(); ++j) {
      const size_t at = i * k_positions.size() + j;
      plan.idx_1d[at] = bucket_relative_position(k_positions[j] - q_positions[i],
                                                 cfg.num_buckets_1d, cfg.max_distance_1d);
      plan.idx_h[at] = bucket_spatial_distance(k_boxes[j].cx() - q_boxes[i].cx(),
                                               cfg.num_buckets_2d, cfg.max_distance_2d);
      plan.idx_v[at] = bucket_spatial_distance(k_boxes[j].cy() - q_boxes[i].cy(),
                                               cfg.num_buckets_2d, cfg.max_distance_2d);
    }
  }
  return plan;
}

// bias[h][i][j] = t1d[h][b1(pos_j - pos_i)] + th[h][bh(cx_j - cx_i)]
//              + tv[h][bv(cy_j - cy_i)], added to attention logits.
template <typename S>
TensorPtr<S> attention_bias(Tape<S>& tape, const BiasTables<S>& tables,
                            const std::vector<int64_t>& positions,
                            const std::vector<BoundingBox>& boxes) {
  const auto plan = bias_index_plan(positions, boxes, positions, boxes, tables.cfg);
  auto b1 = bias_gather(tape, tables.bias_1d, plan.idx_1d, plan.rows, plan.cols);
  auto bh = bias_gather(tape, tables.bias_h, plan.idx_h, plan.rows, plan.cols);
  auto bv = bias_gather(tape, tables.bias_v, plan.idx_v, plan.rows, plan.cols);
  return add(tape, add(tape, b1, bh), bv);
}

// ---------------------------------------------------------------------------
// Visual features

// Per-page feature planes, stacked: data laid out [pages, H, W, d_vis].
struct FeatureGrid {
  int pages = 1;
  int h = 0, w = 0, d_vis = 0;
  std::vector<double> data;

  void validate() const {
    if (h < 1 || w < 1 || d_vis < 1 || pages < 1)
      throw ValidationError("feature grid dims must be >= 1");
    if (static_cast<int64_t>(data.size()) !=
        static_cast<int64_t>(pages) * h * w * d_vis)
      throw ValidationError("feature grid data length mismatch");
    for (double v : data)
      if (!std::isfinite(v)) throw ValidationError("non-finite feature grid value");
  }
  double at(int page, int i, int j, int c) const {
    return data[((static_cast<int64_t>(page) * h + i) * w + j) * d_vis + c];
  }
};

// Area-weighted mix of grid cells overlapping the box, as sparse row weights
// into the page's flattened [H*W, d_vis] plane. A zero-area box snaps to its
// containing cell. Weights sum to 1.
inline std::vector<std::pair<int64_t, double>> roi_cell_weights(const FeatureGrid& grid,
                                                               const BoundingBox& box) {
  box.validate();
  if (box.page >= grid.pages)
    throw ValidationError("box page " + std::to_string(box.page) + " outside grid of " +
                          std::to_string(grid.pages));
  const int64_t page_off = static_cast<int64_t>(box.page) * grid.h * grid.w;
  std::vector<std::pair<int64_t, double>> out;
  const double bw = box.x1 - box.x0, bh = box.y1 - box.y0;
  if (bw <= 0.0 || bh <= 0.0) {
    int j = std::min(static_cast<int>(box.cx() * grid.w), grid.w - 1);
    int i = std::min(static_cast<int>(box.cy() * grid.h), grid.h - 1);
    out.emplace_back(page_off + static_cast<int64_t>(i) * grid.w + j, 1.0);
    return out;
  }
  const double cw = 1.0 / grid.w, ch = 1.0 / grid.h;
  const int j0 = std::max(0, static_cast<int>(box.x0 / cw));
  const int j1 = std::min(grid.w - 1, static_cast<int>(box.x1 / cw - 1e-12));
  const int i0 = std::max(0, static_cast<int>(box.y0 / ch));
  const int i1 = std::min(grid.h - 1, static_cast<int>(box.y1 / ch - 1e-12));
  double total = 0.0;
  for (int i = i0; i <= i1; ++i) {
    const double oy = std::max(0.0, std::min(box.y1, (i + 1) * ch) - std::max(box.y0, i * ch));
    for (int j = j0; j <= j1; ++j) {
      const double ox = std::max(0.0, std::min(box.x1, (j + 1) * cw) - std::max(box.x0, j * cw));
      const double a = ox * oy;
      if (a <= 0.0) continue;
      out.emplace_back(page_off + static_cast<int64_t>(i) * grid.w + j, a);
      total += a;
    }
  }
  if (out.empty() || total <= 0.0) {
    out.clear();
    int j = std::min(static_cast<int>(box.cx() * grid.w), grid.w - 1);
    int i = std::min(static_cast<int>(box.cy() * grid.h), grid.h - 1);
    out.emplace_back(page_off + static_cast<int64_t>(i) * grid.w + j, 1.0);
    return out;
  }
  for (auto& [_, wgt] : out) wgt /= total;
  return out;
}

// Pools grid features under each box and projects d_vis -> d.
// proj: [d_vis, d] weight tensor. Returns [n, d].
template <typename S>
TensorPtr<S> roi_visual_embed(Tape<S>& tape, const FeatureGrid& grid,
                              const std::vector<BoundingBox>& boxes,
                              const TensorPtr<S>& proj) {
  grid.validate();
  if (proj->rank() != 2 || proj->shape[0] != grid.d_vis)
    throw DimensionError("projection shape " + shape_str(proj->shape) +
                         " does not accept d_vis=" + std::to_string(grid.d_vis));
  auto cells = make_tensor<S>(
      Shape{static_cast<int64_t>(grid.pages) * grid.h * grid.w, grid.d_vis});
  for (int64_t i = 0; i < cells->size(); ++i) cells->data[i] = static_cast<S>(grid.data[i]);
  std::vector<std::vector<std::pair<int64_t, double>>> mixes;
  mixes.reserve(boxes.size());
  for (const auto& b : boxes) mixes.push_back(roi_cell_weights(grid, b));
  auto pooled = sparse_row_mix(tape, cells, mixes);
  return matmul(tape, pooled, proj);
}

// One token of a layout document: id, optional surface text, box with page.
struct LayoutToken {
  int32_t id = 0;
  std::string text;
  BoundingBox box;
};

struct LayoutDocument {
  std::vector<LayoutToken> tokens;
  bool has_grid = false;
  FeatureGrid grid;
  int num_pages = 1;
  int evidence_page = -1;  // -1 when not annotated

  void validate() const {
    for (const auto& t : tokens) {
      t.box.validate();
      if (t.box.page >= num_pages)
        throw ValidationError("token page outside document page count");
    }
    if (has_grid) {
      grid.validate();
      if (grid.pages < num_pages)
        throw ValidationError("feature grid has fewer pages than the document");
    }
  }
};

// Two strided 3x3 convolutions with ReLU between, mapping a rasterized page
// [H, W, c_in] to a quarter-resolution feature plane [H/4, W/4, d_vis].
template <typename S>
struct ConvFeatureParams {
  TensorPtr<S> k1;  // [3,3,c_in,mid]
  TensorPtr<S> k2;  // [3,3,mid,d_vis]

  static ConvFeatureParams init(int c_in, int mid, int d_vis, Rng& rng) {
    ConvFeatureParams p;
    p.k1 = randn_tensor<S>({3, 3, c_in, mid}, rng, 1.0 / std::sqrt(9.0 * c_in), true);
    p.k2 = randn_tensor<S>({3, 3, mid, d_vis}, rng, 1.0 / std::sqrt(9.0 * mid), true);
    return p;
  }
};

template <typename S>
TensorPtr<S> conv_features(Tape<S>& tape, const TensorPtr<S>& page,
                           const ConvFeatureParams<S>& p) {
  auto h1 = relu(tape, conv2d(tape, page, p.k1, 2, 1));
  return conv2d(tape, h1, p.k2, 2, 1);
}

}  // namespace docfuse
