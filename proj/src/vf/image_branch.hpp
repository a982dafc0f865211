#pragma once

#include <cstdint>

#include "vf/io_util.hpp"
#include "vf/rng.hpp"
#include "vf/tensor.hpp"

namespace vf {

struct FeatureMap {
  Tensor feats;    // c x h x w
  int stride = 1;  // downsample factor relative to the input image

  int64_t channels() const { return feats.dim(0); }
  int64_t height() const { return feats.dim(1); }
  int64_t width() const { return feats.dim(2); }
};

// Plain strided conv stack standing in for a deep backbone: log2(stride)
// stride-2 stages padded with stride-1 stages to at least four, 3x3 kernels,
// relu after each. c5 is the last stage output; p5 adds one more 3x3 conv and
// is only built when something consumes it.
struct ImageBackboneParams {
  std::vector<Tensor> stage_w;
  std::vector<Tensor> stage_b;
  std::vector<int> stage_stride;
  Tensor p5_w, p5_b;
  bool has_p5 = true;
  int total_stride = 8;
  int64_t out_channels = 64;

  static ImageBackboneParams init(int total_stride, int64_t out_channels, Rng& rng,
                                  bool with_p5 = true);
  std::vector<Tensor*> parameters();
};

struct BackboneOut {
  FeatureMap c5;
  FeatureMap p5;  // feats undefined when the backbone was built without p5
};

// Image must be 3 x H x W with H, W divisible by the total stride.
BackboneOut backbone_forward(const Tensor& image, const ImageBackboneParams& params);

// 1x1 conv changing only the channel count (the reduced map consumed by the
// attention fusion strategies).
struct ReduceDimParams {
  Tensor w, b;  // w: d x c x 1 x 1

  static ReduceDimParams init(int64_t c_in, int64_t d, Rng& rng);
};
FeatureMap reduce_dim(const FeatureMap& z, const ReduceDimParams& params);

// [c x h x w] -> [h*w x c] with row index v * w + u.
Tensor flatten_spatial(const FeatureMap& f);
Tensor unflatten_spatial(const Tensor& flat, int64_t h, int64_t w);

Tensor image_to_tensor(const ImageRgb& img);

}  // namespace vf
