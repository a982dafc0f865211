#include "vf/image_branch.hpp"

#include <cmath>

namespace vf {

namespace {

int log2_exact(int v) {
  int k = 0;
  while ((1 << k) < v) ++k;
  return (1 << k) == v ? k : -1;
}

}  // namespace

ImageBackboneParams ImageBackboneParams::init(int total_stride, int64_t out_channels, Rng& rng,
                                              bool with_p5) {
  int halvings = log2_exact(total_stride);
  if (halvings < 2 || total_stride > 32) {
    fail(ErrorCode::invalid_argument,
         "backbone: stride must be one of 4, 8, 16, 32; got " + std::to_string(total_stride));
  }
  ImageBackboneParams p;
  p.total_stride = total_stride;
  p.out_channels = out_channels;
  p.has_p5 = with_p5;
  int n_stages = std::max(4, halvings);
  int64_t cin = 3;
  for (int s = 0; s < n_stages; ++s) {
    int64_t cout = s + 1 == n_stages ? out_channels
                                     : std::min<int64_t>(out_channels, 16 << s);
    p.stage_w.push_back(Tensor::glorot({cout, cin, 3, 3}, cin * 9, cout * 9, rng));
    p.stage_b.push_back(Tensor::zeros({cout}, true));
    p.stage_stride.push_back(s < halvings ? 2 : 1);
    cin = cout;
  }
  if (with_p5) {
    p.p5_w = Tensor::glorot({out_channels, out_channels, 3, 3}, out_channels * 9,
                            out_channels * 9, rng);
    p.p5_b = Tensor::zeros({out_channels}, true);
  }
  return p;
}

std::vector<Tensor*> ImageBackboneParams::parameters() {
  std::vector<Tensor*> out;
  for (size_t s = 0; s < stage_w.size(); ++s) {
    out.push_back(&stage_w[s]);
    out.push_back(&stage_b[s]);
  }
  if (has_p5) {
    out.push_back(&p5_w);
    out.push_back(&p5_b);
  }
  return out;
}

BackboneOut backbone_forward(const Tensor& image, const ImageBackboneParams& params) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    fail(ErrorCode::shape, "backbone: image must be 3 x H x W, got " + shape_str(image.shape()));
  }
  if (image.dim(1) % params.total_stride != 0 || image.dim(2) % params.total_stride != 0) {
    fail(ErrorCode::shape, "backbone: image extents " + shape_str(image.shape()) +
                               " not divisible by stride " + std::to_string(params.total_stride));
  }
  Tensor h = image;
  for (size_t s = 0; s < params.stage_w.size(); ++s) {
    h = relu(add_channel_bias(conv2d(h, params.stage_w[s], params.stage_stride[s], 1),
                              params.stage_b[s]));
  }
  BackboneOut out;
  out.c5 = FeatureMap{h, params.total_stride};
  if (params.has_p5) {
    out.p5 = FeatureMap{relu(add_channel_bias(conv2d(h, params.p5_w, 1, 1), params.p5_b)),
                        params.total_stride};
  }
  return out;
}

ReduceDimParams ReduceDimParams::init(int64_t c_in, int64_t d, Rng& rng) {
  ReduceDimParams p;
  p.w = Tensor::glorot({d, c_in, 1, 1}, c_in, d, rng);
  p.b = Tensor::zeros({d}, true);
  return p;
}

FeatureMap reduce_dim(const FeatureMap& z, const ReduceDimParams& params) {
  return FeatureMap{add_channel_bias(conv2d(z.feats, params.w, 1, 0), params.b), z.stride};
}

Tensor flatten_spatial(const FeatureMap& f) {
  int64_t c = f.channels(), h = f.height(), w = f.width();
  // [c x h x w] -> transpose to [h*w x c]: row k corresponds to pixel
  // (k div w, k mod w)
  return transpose2d(reshape(f.feats, {c, h * w}));
}

Tensor unflatten_spatial(const Tensor& flat, int64_t h, int64_t w) {
  if (flat.rank() != 2 || flat.dim(0) != h * w) {
    fail(ErrorCode::shape, "unflatten_spatial: " + shape_str(flat.shape()) + " does not cover " +
                               std::to_string(h) + "x" + std::to_string(w));
  }
  return reshape(transpose2d(flat), {flat.dim(1), h, w});
}

Tensor image_to_tensor(const ImageRgb& img) {
  return Tensor::from_data({3, img.height, img.width},
                           std::vector<double>(img.data.begin(), img.data.end()), false);
}

}  // namespace vf
