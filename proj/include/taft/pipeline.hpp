#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "taft/episode.hpp"
#include "taft/gradcheck.hpp"
#include "taft/ops.hpp"
#include "taft/segnet.hpp"
#include "taft/taft.hpp"
#include "taft/tensor.hpp"

namespace taft {

template <class T>
Tensor<T> image_tensor(const Instance& inst) {
  std::vector<T> v(inst.image.begin(), inst.image.end());
  return Tensor<T>::from_data(Shape{3, inst.h, inst.w}, std::move(v), false);
}

// Builds the task transform from an episode's support set: per-shot
// prototypes under average-pooled soft labels, shot aggregation, matrix
// assembly, then the least-squares map onto the references.
template <class T>
Tensor<T> fit_episode_transform(const SegNet<T>& model, const Episode& ep, double ridge) {
  std::vector<Prototype<T>> fg, bg;
  for (size_t i = 0; i < ep.support.size(); ++i) {
    const Instance& inst = ep.support[i];
    auto feats = model.encoder_forward(image_tensor<T>(inst));
    const int factor = inst.h / static_cast<int>(feats.high_level.dim(1));
    auto soft = downsample_soft_label<T>(inst.mask, inst.h, inst.w, factor);
    fg.push_back(compute_class_prototype(feats.high_level, soft.fg, ClassTag::fg,
                                         static_cast<int>(i)));
    bg.push_back(compute_class_prototype(feats.high_level, soft.bg, ClassTag::bg,
                                         static_cast<int>(i)));
  }
  auto pair = assemble_matrices(aggregate_shot_prototypes(fg), aggregate_shot_prototypes(bg),
                                model.refs());
  return compute_transform(pair, ridge);
}

template <class T>
struct EpisodeLosses {
  Tensor<T> seg;
  Tensor<T> aux;
  int query_count = 0;
};

// Full episode forward: fit P on the support set, then per query accumulate
// the reference-prediction loss and the decoder segmentation loss.
template <class T>
EpisodeLosses<T> episode_losses(const SegNet<T>& model, const Episode& ep, double ridge,
                                bool differentiate_through_p = true,
                                bool average_over_queries = true) {
  Tensor<T> p = fit_episode_transform(model, ep, ridge);
  if (!differentiate_through_p) p = detach(p);
  const ReferenceSet<T> refs = model.refs();
  Tensor<T> seg_sum, aux_sum;
  for (const Instance& inst : ep.query) {
    auto feats = model.encoder_forward(image_tensor<T>(inst));
    auto h_a = apply_transform(p, feats.high_level);
    const int factor = inst.h / static_cast<int>(h_a.dim(1));
    auto soft = downsample_soft_label<T>(inst.mask, inst.h, inst.w, factor);
    auto aux_q = auxiliary_loss(reference_prediction(h_a, refs), soft);
    auto logits = model.decoder_forward(model.aspp_forward(h_a), feats.low_level);
    auto seg_q = segmentation_loss(logits, inst.mask);
    seg_sum = seg_sum.defined() ? add(seg_sum, seg_q) : seg_q;
    aux_sum = aux_sum.defined() ? add(aux_sum, aux_q) : aux_q;
  }
  const int nq = static_cast<int>(ep.query.size());
  if (average_over_queries && nq > 1) {
    const T inv = static_cast<T>(1.0 / nq);
    seg_sum = scale(seg_sum, inv);
    aux_sum = scale(aux_sum, inv);
  }
  return EpisodeLosses<T>{seg_sum, aux_sum, nq};
}

struct GroupCheck {
  ParamGroup group;
  GradCheckReport report;
};

// Finite-difference audit of the routed episode gradients. Each group is
// checked against the objective it actually minimizes: encoder seg + aux,
// decoder seg only, references aux only.
template <class T>
std::vector<GroupCheck> episode_gradient_check(
    SegNet<T>& model, const Episode& ep, double ridge, double h, int64_t coords_per_param,
    Rng& rng, double rel_floor = 1e-3,
    const std::function<void(ParameterStore<T>&)>& post_backward_hook = {}) {
  auto losses = episode_losses(model, ep, ridge);
  model.params().zero_grad();
  backward(losses.seg);
  model.params().zero_grad(ParamGroup::references);
  backward(losses.aux);
  if (post_backward_hook) post_backward_hook(model.params());

  const auto loss_value = [&](ParamGroup group) {
    return [&model, &ep, ridge, group]() {
      auto l = episode_losses(model, ep, ridge);
      switch (group) {
        case ParamGroup::encoder:
          return static_cast<double>(l.seg.item()) + static_cast<double>(l.aux.item());
        case ParamGroup::decoder:
          return static_cast<double>(l.seg.item());
        case ParamGroup::references:
          return static_cast<double>(l.aux.item());
      }
      return 0.0;
    };
  };

  std::vector<GroupCheck> out;
  for (const ParamGroup group :
       {ParamGroup::encoder, ParamGroup::decoder, ParamGroup::references}) {
    std::vector<std::pair<std::string, Tensor<T>>> params;
    for (auto& p : model.params().items()) {
      if (p.group == group) params.emplace_back(p.name, p.value);
    }
    out.push_back(GroupCheck{
        group, finite_diff_check(loss_value(group), params, h, coords_per_param, rng, rel_floor)});
  }
  return out;
}

}  // namespace taft
