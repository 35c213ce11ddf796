#pragma once

// Brute-force reference implementations shared by the unit tests and the acceptance run.

#include <torch/torch.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "detgan/losses.hpp"
#include "detgan/types.hpp"

namespace detgan::test {

// Counts unit cells of a 1/4-pixel grid covered by each box.
inline double grid_iou(const Box& a, const Box& b) {
  constexpr int kSub = 4;
  long inter = 0, ua = 0, ub = 0;
  for (int y = 0; y < 48 * kSub; ++y) {
    for (int x = 0; x < 48 * kSub; ++x) {
      const double cx = (x + 0.5) / kSub, cy = (y + 0.5) / kSub;
      const bool in_a = cx > a.x_min && cx < a.x_max() && cy > a.y_min && cy < a.y_max();
      const bool in_b = cx > b.x_min && cx < b.x_max() && cy > b.y_min && cy < b.y_max();
      ua += in_a;
      ub += in_b;
      inter += in_a && in_b;
    }
  }
  const long uni = ua + ub - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline std::vector<double> values(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kFloat64).contiguous().reshape({-1});
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

inline double clamp01(double p) { return std::min(std::max(p, kLogEpsilon), 1.0 - kLogEpsilon); }

inline double smooth_l1_oracle(const std::array<double, 4>& a, const std::array<double, 4>& b) {
  double s = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double d = std::abs(a[i] - b[i]);
    s += d < 1.0 ? 0.5 * d * d : d - 0.5;
  }
  return s;
}

// Direct convolution: 3x3 kernels, stride 2, zero padding 1, ReLU between layers.
inline std::vector<double> random_conv_oracle(const std::vector<double>& img, std::int64_t c, std::int64_t h, std::int64_t w,
                                       const std::vector<torch::Tensor>& kernels) {
  std::vector<double> x = img;
  for (std::size_t layer = 0; layer < kernels.size(); ++layer) {
    const auto k = values(kernels[layer]);
    const auto out_c = kernels[layer].size(0);
    const auto oh = (h + 2 - 3) / 2 + 1, ow = (w + 2 - 3) / 2 + 1;
    std::vector<double> y(static_cast<std::size_t>(out_c * oh * ow), 0.0);
    for (std::int64_t o = 0; o < out_c; ++o)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) {
          double acc = 0.0;
          for (std::int64_t ci = 0; ci < c; ++ci)
            for (int di = 0; di < 3; ++di)
              for (int dj = 0; dj < 3; ++dj) {
                const auto yi = 2 * i - 1 + di, xj = 2 * j - 1 + dj;
                if (yi < 0 || yi >= h || xj < 0 || xj >= w) continue;
                acc += k[static_cast<std::size_t>(((o * c + ci) * 3 + di) * 3 + dj)] *
                       x[static_cast<std::size_t>((ci * h + yi) * w + xj)];
              }
          if (layer + 1 < kernels.size()) acc = std::max(0.0, acc);
          y[static_cast<std::size_t>((o * oh + i) * ow + j)] = acc;
        }
    x = std::move(y);
    c = out_c;
    h = oh;
    w = ow;
  }
  return x;
}

// All-point AP written as a sum over true positives of the best precision reached at
// or beyond that rank.
inline double ap_by_enumeration(const std::vector<bool>& tp_in_rank_order, std::size_t total_truths) {
  const auto n = tp_in_rank_order.size();
  std::vector<double> precision(n);
  std::size_t tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    tp += tp_in_rank_order[k];
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  double ap = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!tp_in_rank_order[k]) continue;
    double best = 0.0;
    for (std::size_t j = k; j < n; ++j) best = std::max(best, precision[j]);
    ap += best / static_cast<double>(total_truths);
  }
  return 100.0 * ap;
}

// Per-image penalized IoU coded from scratch: best-overlap greedy pairing in score order.
inline double penalized_iou_oracle(const std::vector<std::vector<Detection>>& dets, const std::vector<std::vector<Box>>& gts) {
  double sum = 0.0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    std::vector<int> used(gts[i].size(), 0);
    double matched = 0.0;
    std::size_t pairs = 0;
    for (const auto& d : dets[i]) {
      int best = -1;
      double bv = 0.0;
      for (std::size_t g = 0; g < gts[i].size(); ++g) {
        const double v = iou(d.box, gts[i][g]);
        if (!used[g] && v > bv) {
          bv = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        used[static_cast<std::size_t>(best)] = 1;
        matched += bv;
        ++pairs;
      }
    }
    const auto denom = dets[i].size() + gts[i].size() - pairs;
    sum += denom ? matched / static_cast<double>(denom) : 0.0;
  }
  return dets.empty() ? 0.0 : 100.0 * sum / static_cast<double>(dets.size());
}

}  // namespace detgan::test
