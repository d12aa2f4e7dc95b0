#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "taft/ops.hpp"
#include "taft/tensor.hpp"

namespace taft {

// Pooled fractional occupancy of each class per coarse cell. fg + bg = 1
// everywhere because the source mask is a binary partition.
template <class T>
struct SoftLabel {
  int h = 0, w = 0;
  std::vector<T> fg, bg;
};

enum class ClassTag : uint8_t { fg = 0, bg = 1 };

template <class T>
struct Prototype {
  Tensor<T> vector;
  ClassTag tag = ClassTag::fg;
  int shot_index = -1;
};

// Learned per-class reference vectors, length D, trained by the auxiliary
// loss only. Stored unnormalized; normalization happens in assemble_matrices.
template <class T>
struct ReferenceSet {
  Tensor<T> r_fg;
  Tensor<T> r_bg;
};

// Unit-column prototype matrix C and reference matrix R, both D x 2 with the
// foreground column first.
template <class T>
struct MatrixPair {
  Tensor<T> C;
  Tensor<T> R;
};

template <class T>
struct LossReport {
  Tensor<T> seg_loss;
  Tensor<T> aux_loss;
  int query_count = 0;
};

inline constexpr double kWeightSumEps = 1e-6;
inline constexpr double kNormEps = 1e-8;

// Average-pools a binary mask into per-cell class fractions.
template <class T>
SoftLabel<T> downsample_soft_label(const std::vector<uint8_t>& mask, int h, int w, int factor) {
  if (h < 1 || w < 1 || static_cast<size_t>(h) * w != mask.size()) {
    throw DimensionError("downsample_soft_label: mask size does not match extents");
  }
  if (factor < 1 || h % factor != 0 || w % factor != 0) {
    throw DimensionError("downsample_soft_label: extents not divisible by factor " +
                         std::to_string(factor));
  }
  SoftLabel<T> out;
  out.h = h / factor;
  out.w = w / factor;
  out.fg.assign(static_cast<size_t>(out.h) * out.w, T(0));
  out.bg.assign(out.fg.size(), T(0));
  const T inv = T(1) / static_cast<T>(factor * factor);
  for (int y = 0; y < h; ++y) {
    const int oy = y / factor;
    for (int x = 0; x < w; ++x) {
      const size_t cell = static_cast<size_t>(oy) * out.w + x / factor;
      if (mask[static_cast<size_t>(y) * w + x]) out.fg[cell] += inv;
      else out.bg[cell] += inv;
    }
  }
  return out;
}

// Weighted mean of feature pixels under soft-label weights.
template <class T>
Prototype<T> compute_class_prototype(const Tensor<T>& feature, const std::vector<T>& weights,
                                     ClassTag tag, int shot_index = -1,
                                     double weight_sum_eps = kWeightSumEps) {
  double wsum = 0.0;
  for (const T w : weights) wsum += static_cast<double>(w);
  if (!(wsum > weight_sum_eps)) {
    throw DegenerateSupportError("class prototype: weight sum " + std::to_string(wsum) +
                                 " below threshold (tag " +
                                 (tag == ClassTag::fg ? "fg" : "bg") + ")");
  }
  return Prototype<T>{weighted_spatial_mean(feature, weights), tag, shot_index};
}

// Arithmetic mean of per-shot prototypes of one class.
template <class T>
Prototype<T> aggregate_shot_prototypes(const std::vector<Prototype<T>>& shots) {
  if (shots.empty()) throw DimensionError("aggregate_shot_prototypes: empty shot list");
  Tensor<T> acc = shots[0].vector;
  for (size_t i = 1; i < shots.size(); ++i) {
    if (shots[i].tag != shots[0].tag) {
      throw DimensionError("aggregate_shot_prototypes: mixed class tags");
    }
    acc = add(acc, shots[i].vector);
  }
  if (shots.size() > 1) acc = scale(acc, T(1) / static_cast<T>(shots.size()));
  return Prototype<T>{acc, shots[0].tag, -1};
}

namespace detail {

template <class T>
double vector_norm(const Tensor<T>& v) {
  double sq = 0.0;
  for (const T x : v.data()) sq += static_cast<double>(x) * x;
  return std::sqrt(sq);
}

}  // namespace detail

// Normalizes prototypes and references into D x 2 column matrices,
// foreground first.
template <class T>
MatrixPair<T> assemble_matrices(const Prototype<T>& c_fg, const Prototype<T>& c_bg,
                                const ReferenceSet<T>& refs, double norm_eps = kNormEps) {
  const struct {
    const Tensor<T>* v;
    const char* name;
  } checks[] = {{&c_fg.vector, "fg prototype"},
                {&c_bg.vector, "bg prototype"},
                {&refs.r_fg, "fg reference"},
                {&refs.r_bg, "bg reference"}};
  for (const auto& c : checks) {
    const double n = detail::vector_norm(*c.v);
    if (!(n > norm_eps)) {
      throw DegeneratePrototypeError(std::string(c.name) + " has near-zero norm " +
                                     std::to_string(n));
    }
  }
  MatrixPair<T> pair;
  pair.C = concat_columns<T>({l2_normalize(c_fg.vector), l2_normalize(c_bg.vector)});
  pair.R = concat_columns<T>({l2_normalize(refs.r_fg), l2_normalize(refs.r_bg)});
  return pair;
}

// Least-squares transform P = R (C^T C)^-1 C^T mapping prototype directions
// onto reference directions. A ridge > 0 adds ridge * tr(C^T C)/2 * I before
// inversion to survive near-parallel prototypes; ridge = 0 is the exact path.
template <class T>
Tensor<T> compute_transform(const MatrixPair<T>& pair, double ridge,
                            double condition_cap = 1e12) {
  Tensor<T> ct = transpose(pair.C);
  Tensor<T> gram = matmul(ct, pair.C);
  if (ridge > 0.0) {
    const int k = gram.dim(0);
    gram = add(gram, scaled_identity(trace(gram), static_cast<T>(ridge / k), k));
  }
  return matmul(pair.R, matmul(mat_inverse(gram, condition_cap), ct));
}

// Applies P to every pixel: a 1x1 convolution with kernel P.
template <class T>
Tensor<T> apply_transform(const Tensor<T>& p, const Tensor<T>& feature) {
  detail::require_ndim(feature, 3, "apply_transform");
  const int d = feature.dim(0);
  if (p.ndim() != 2 || p.dim(0) != d || p.dim(1) != d) {
    throw DimensionError("apply_transform: transform is " + shape_str(p.shape()) +
                         ", feature channels " + std::to_string(d));
  }
  const int h = feature.dim(1), w = feature.dim(2);
  return reshape(matmul(p, reshape(feature, {d, h * w})), {d, h, w});
}

// Per-pixel class probabilities from inner products with the raw
// (unnormalized) reference vectors.
template <class T>
Tensor<T> reference_prediction(const Tensor<T>& h_a, const ReferenceSet<T>& refs) {
  detail::require_ndim(h_a, 3, "reference_prediction");
  const int d = h_a.dim(0), h = h_a.dim(1), w = h_a.dim(2);
  if (refs.r_fg.numel() != d || refs.r_bg.numel() != d) {
    throw DimensionError("reference_prediction: reference length does not match channels");
  }
  Tensor<T> r = stack_rows<T>({refs.r_fg, refs.r_bg});
  Tensor<T> logits = reshape(matmul(r, reshape(h_a, {d, h * w})), {2, h, w});
  return softmax_channel(logits);
}

// Mean squared error between predicted class probabilities and soft labels,
// averaged over all 2*H*W terms.
template <class T>
Tensor<T> auxiliary_loss(const Tensor<T>& pred, const SoftLabel<T>& label) {
  detail::require_ndim(pred, 3, "auxiliary_loss");
  if (pred.dim(0) != 2 || pred.dim(1) != label.h || pred.dim(2) != label.w) {
    throw DimensionError("auxiliary_loss: prediction " + shape_str(pred.shape()) +
                         " vs label grid " + std::to_string(label.h) + "x" +
                         std::to_string(label.w));
  }
  std::vector<T> target(label.fg);
  target.insert(target.end(), label.bg.begin(), label.bg.end());
  Tensor<T> t = Tensor<T>::from_data(pred.shape(), std::move(target), false);
  Tensor<T> diff = sub(t, pred);
  return scale(sum_all(mul(diff, diff)), T(1) / static_cast<T>(pred.numel()));
}

// Pixel-mean cross entropy of 2-channel logits against a binary mask,
// fused with a stable log-sum-exp so extreme margins stay finite.
template <class T>
Tensor<T> segmentation_loss(const Tensor<T>& logits, const std::vector<uint8_t>& mask) {
  detail::require_ndim(logits, 3, "segmentation_loss");
  const int h = logits.dim(1), w = logits.dim(2);
  if (logits.dim(0) != 2 || mask.size() != static_cast<size_t>(h) * w) {
    throw DimensionError("segmentation_loss: logits " + shape_str(logits.shape()) +
                         " vs mask of " + std::to_string(mask.size()) + " pixels");
  }
  const int64_t plane = static_cast<int64_t>(h) * w;
  const auto& lv = logits.data();
  double total = 0.0;
  for (int64_t px = 0; px < plane; ++px) {
    const double l_fg = lv[static_cast<size_t>(px)];
    const double l_bg = lv[static_cast<size_t>(plane + px)];
    const double m = std::max(l_fg, l_bg);
    const double lse = m + std::log(std::exp(l_fg - m) + std::exp(l_bg - m));
    total += lse - (mask[static_cast<size_t>(px)] ? l_fg : l_bg);
  }
  auto mask_copy = std::make_shared<std::vector<uint8_t>>(mask);
  return make_op_node<T>(
      Shape{1}, {static_cast<T>(total / static_cast<double>(plane))}, {logits},
      [plane, mask_copy](Node<T>& self) {
        Node<T>& p = *self.parents[0];
        if (!p.requires_grad) return;
        const T g = self.grad[0] / static_cast<T>(plane);
        for (int64_t px = 0; px < plane; ++px) {
          const T l_fg = p.value[static_cast<size_t>(px)];
          const T l_bg = p.value[static_cast<size_t>(plane + px)];
          const T m = std::max(l_fg, l_bg);
          const T e_fg = std::exp(l_fg - m);
          const T e_bg = std::exp(l_bg - m);
          const T p_fg = e_fg / (e_fg + e_bg);
          const bool is_fg = (*mask_copy)[static_cast<size_t>(px)] != 0;
          p.grad[static_cast<size_t>(px)] += g * (p_fg - (is_fg ? T(1) : T(0)));
          p.grad[static_cast<size_t>(plane + px)] += g * ((T(1) - p_fg) - (is_fg ? T(0) : T(1)));
        }
      },
      "segmentation_loss");
}

}  // namespace taft
