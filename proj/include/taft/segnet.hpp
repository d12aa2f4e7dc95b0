#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "taft/ops.hpp"
#include "taft/parameter.hpp"
#include "taft/rng.hpp"
#include "taft/taft.hpp"
#include "taft/tensor.hpp"

namespace taft {

// Channel plan and dilation rates for the encoder / ASPP / decoder stack.
// Defaults target a 64x64 canvas; tiny() is the preset for fast gradient
// checks on 32x32 inputs.
struct ModelConfig {
  int in_channels = 3;
  int c1 = 16;
  int c2 = 32;
  int c_low = 32;
  int c4 = 64;
  int c_high = 64;
  std::vector<int> aspp_rates = {1, 2, 4, 6};
  int aspp_branch = 32;
  int aspp_out = 64;
  int dec_proj = 16;
  int dec_mid = 48;

  static ModelConfig tiny() {
    ModelConfig cfg;
    cfg.c1 = 4;
    cfg.c2 = 6;
    cfg.c_low = 6;
    cfg.c4 = 8;
    cfg.c_high = 8;
    cfg.aspp_rates = {1, 2};
    cfg.aspp_branch = 8;
    cfg.aspp_out = 8;
    cfg.dec_proj = 4;
    cfg.dec_mid = 8;
    return cfg;
  }

  // Larger canvases get the wider dilation ladder the coarse grid can absorb.
  static ModelConfig for_canvas(int canvas) {
    ModelConfig cfg;
    if (canvas >= 512) cfg.aspp_rates = {1, 4, 7, 11};
    return cfg;
  }
};

template <class T>
struct FeaturePair {
  Tensor<T> low_level;
  Tensor<T> high_level;
};

// Encoder tapping features at strides 4 and 16, ASPP over the transformed
// high-level feature, and a skip-fusing decoder back to full resolution.
// The final encoder stage holds two stride-2 convolutions so the tap sits at
// stride 4 while the output reaches stride 16.
template <class T>
class SegNet {
 public:
  SegNet(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    Rng rng(seed);
    enc_w1_ = add_conv("enc.conv1", ParamGroup::encoder, cfg.c1, cfg.in_channels, 3, rng);
    enc_b1_ = add_bias("enc.conv1", ParamGroup::encoder, cfg.c1);
    enc_w2_ = add_conv("enc.conv2", ParamGroup::encoder, cfg.c2, cfg.c1, 3, rng);
    enc_b2_ = add_bias("enc.conv2", ParamGroup::encoder, cfg.c2);
    enc_w3_ = add_conv("enc.conv3", ParamGroup::encoder, cfg.c_low, cfg.c2, 3, rng);
    enc_b3_ = add_bias("enc.conv3", ParamGroup::encoder, cfg.c_low);
    enc_w4_ = add_conv("enc.conv4", ParamGroup::encoder, cfg.c4, cfg.c_low, 3, rng);
    enc_b4_ = add_bias("enc.conv4", ParamGroup::encoder, cfg.c4);
    enc_w5_ = add_conv("enc.conv5", ParamGroup::encoder, cfg.c_high, cfg.c4, 3, rng);
    enc_b5_ = add_bias("enc.conv5", ParamGroup::encoder, cfg.c_high);

    aspp_w_.push_back(add_conv("aspp.point", ParamGroup::decoder, cfg.aspp_branch,
                               cfg.c_high, 1, rng));
    aspp_b_.push_back(add_bias("aspp.point", ParamGroup::decoder, cfg.aspp_branch));
    for (size_t i = 0; i < cfg.aspp_rates.size(); ++i) {
      const std::string base = "aspp.rate" + std::to_string(cfg.aspp_rates[i]);
      aspp_w_.push_back(add_conv(base, ParamGroup::decoder, cfg.aspp_branch, cfg.c_high, 3, rng));
      aspp_b_.push_back(add_bias(base, ParamGroup::decoder, cfg.aspp_branch));
    }
    const int cat_ch = cfg.aspp_branch * static_cast<int>(1 + cfg.aspp_rates.size());
    aspp_fuse_w_ = add_conv("aspp.fuse", ParamGroup::decoder, cfg.aspp_out, cat_ch, 1, rng);
    aspp_fuse_b_ = add_bias("aspp.fuse", ParamGroup::decoder, cfg.aspp_out);

    dec_proj_w_ = add_conv("dec.proj", ParamGroup::decoder, cfg.dec_proj, cfg.c_low, 1, rng);
    dec_proj_b_ = add_bias("dec.proj", ParamGroup::decoder, cfg.dec_proj);
    dec_w1_ = add_conv("dec.conv1", ParamGroup::decoder, cfg.dec_mid,
                       cfg.aspp_out + cfg.dec_proj, 3, rng);
    dec_b1_ = add_bias("dec.conv1", ParamGroup::decoder, cfg.dec_mid);
    dec_w2_ = add_conv("dec.conv2", ParamGroup::decoder, cfg.dec_mid, cfg.dec_mid, 3, rng);
    dec_b2_ = add_bias("dec.conv2", ParamGroup::decoder, cfg.dec_mid);
    dec_out_w_ = add_conv("dec.out", ParamGroup::decoder, 2, cfg.dec_mid, 1, rng);
    dec_out_b_ = add_bias("dec.out", ParamGroup::decoder, 2);

    r_fg_ = add_reference("refs.fg", rng);
    r_bg_ = add_reference("refs.bg", rng);
  }

  FeaturePair<T> encoder_forward(const Tensor<T>& image) const {
    if (image.ndim() != 3 || image.dim(0) != cfg_.in_channels || image.dim(1) % 16 != 0 ||
        image.dim(2) % 16 != 0) {
      throw DimensionError("encoder_forward: want " + std::to_string(cfg_.in_channels) +
                           "-channel image with extents divisible by 16, got " +
                           shape_str(image.shape()));
    }
    auto x1 = relu(bias_add(conv2d(image, enc_w1_, 1, 1, 1), enc_b1_));
    auto x2 = relu(bias_add(conv2d(x1, enc_w2_, 2, 1, 1), enc_b2_));
    auto x3 = relu(bias_add(conv2d(x2, enc_w3_, 2, 1, 1), enc_b3_));
    auto x4 = relu(bias_add(conv2d(x3, enc_w4_, 2, 1, 1), enc_b4_));
    auto x5 = relu(bias_add(conv2d(x4, enc_w5_, 2, 1, 1), enc_b5_));
    return FeaturePair<T>{x3, x5};
  }

  Tensor<T> aspp_forward(const Tensor<T>& h_a) const {
    std::vector<Tensor<T>> branches;
    branches.push_back(relu(bias_add(conv2d(h_a, aspp_w_[0], 1, 1, 0), aspp_b_[0])));
    for (size_t i = 0; i < cfg_.aspp_rates.size(); ++i) {
      const int rate = cfg_.aspp_rates[i];
      branches.push_back(
          relu(bias_add(conv2d(h_a, aspp_w_[i + 1], 1, rate, rate), aspp_b_[i + 1])));
    }
    return bias_add(conv2d(concat_channels(branches), aspp_fuse_w_, 1, 1, 0), aspp_fuse_b_);
  }

  Tensor<T> decoder_forward(const Tensor<T>& aspp_out, const Tensor<T>& low_level) const {
    if (low_level.dim(1) != aspp_out.dim(1) * 4 || low_level.dim(2) != aspp_out.dim(2) * 4) {
      throw DimensionError("decoder_forward: low-level grid must be 4x the coarse grid");
    }
    auto up = bilinear_resize(aspp_out, low_level.dim(1), low_level.dim(2));
    auto proj = relu(bias_add(conv2d(low_level, dec_proj_w_, 1, 1, 0), dec_proj_b_));
    auto y = concat_channels<T>({up, proj});
    y = relu(bias_add(conv2d(y, dec_w1_, 1, 1, 1), dec_b1_));
    y = relu(bias_add(conv2d(y, dec_w2_, 1, 1, 1), dec_b2_));
    auto logits = bias_add(conv2d(y, dec_out_w_, 1, 1, 0), dec_out_b_);
    return bilinear_resize(logits, low_level.dim(1) * 4, low_level.dim(2) * 4);
  }

  ReferenceSet<T> refs() const { return ReferenceSet<T>{r_fg_, r_bg_}; }

  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  Tensor<T> add_conv(const std::string& base, ParamGroup group, int c_out, int c_in, int k,
                     Rng& rng) {
    const double std_dev = std::sqrt(2.0 / (static_cast<double>(c_in) * k * k));
    std::vector<T> w(static_cast<size_t>(c_out) * c_in * k * k);
    for (auto& v : w) v = static_cast<T>(rng.normal() * std_dev);
    return store_.add(base + ".w", group, Shape{c_out, c_in, k, k}, std::move(w)).value;
  }

  Tensor<T> add_bias(const std::string& base, ParamGroup group, int c_out) {
    return store_.add(base + ".b", group, Shape{c_out},
                      std::vector<T>(static_cast<size_t>(c_out), T(0)))
        .value;
  }

  Tensor<T> add_reference(const std::string& name, Rng& rng) {
    std::vector<T> v(static_cast<size_t>(cfg_.c_high));
    double sq = 0.0;
    for (auto& x : v) {
      x = static_cast<T>(rng.normal());
      sq += static_cast<double>(x) * x;
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(sq));
    for (auto& x : v) x *= inv;
    return store_.add(name, ParamGroup::references, Shape{cfg_.c_high}, std::move(v)).value;
  }

  ModelConfig cfg_;
  ParameterStore<T> store_;
  Tensor<T> enc_w1_, enc_b1_, enc_w2_, enc_b2_, enc_w3_, enc_b3_, enc_w4_, enc_b4_, enc_w5_,
      enc_b5_;
  std::vector<Tensor<T>> aspp_w_, aspp_b_;
  Tensor<T> aspp_fuse_w_, aspp_fuse_b_;
  Tensor<T> dec_proj_w_, dec_proj_b_, dec_w1_, dec_b1_, dec_w2_, dec_b2_, dec_out_w_, dec_out_b_;
  Tensor<T> r_fg_, r_bg_;
};

// Pixel-wise argmax over the two logit channels; exact ties go to background.
template <class T>
std::vector<uint8_t> predict_mask(const Tensor<T>& logits) {
  if (logits.ndim() != 3 || logits.dim(0) != 2) {
    throw DimensionError("predict_mask: want 2xHxW logits, got " + shape_str(logits.shape()));
  }
  const int64_t plane = static_cast<int64_t>(logits.dim(1)) * logits.dim(2);
  std::vector<uint8_t> mask(static_cast<size_t>(plane));
  const auto& v = logits.data();
  for (int64_t i = 0; i < plane; ++i) {
    mask[static_cast<size_t>(i)] =
        v[static_cast<size_t>(i)] > v[static_cast<size_t>(plane + i)] ? 1 : 0;
  }
  return mask;
}

}  // namespace taft
