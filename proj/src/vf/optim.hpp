#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "vf/tensor.hpp"

namespace vf {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// SGD with classical momentum: v = mu * v + g; w -= lr * v.
class SgdMomentum {
 public:
  explicit SgdMomentum(double lr, double momentum = 0.9) : lr_(lr), momentum_(momentum) {}
  void step(std::span<NamedParam> params);

 private:
  double lr_, momentum_;
  std::unordered_map<TensorImpl*, std::vector<double>> velocity_;
};

// AdamW with decoupled weight decay applied before the Adam update.
class AdamW {
 public:
  explicit AdamW(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                 double weight_decay = 0.01)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}
  void step(std::span<NamedParam> params);

 private:
  struct State {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_, weight_decay_;
  int64_t t_ = 0;
  std::unordered_map<TensorImpl*, State> state_;
};

}  // namespace vf
