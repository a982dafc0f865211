#include "vf/optim.hpp"

#include <cmath>

namespace vf {

namespace {

std::span<const double> require_grad(const NamedParam& p) {
  if (!p.tensor.has_grad()) {
    fail(ErrorCode::state, "optimizer: missing gradient for parameter '" + p.name +
                               "' (step before backward?)");
  }
  return p.tensor.grad();
}

}  // namespace

void SgdMomentum::step(std::span<NamedParam> params) {
  for (NamedParam& p : params) {
    auto g = require_grad(p);
    auto w = p.tensor.mutable_data();
    auto& v = velocity_[p.tensor.impl()];
    if (v.empty()) v.assign(w.size(), 0.0);
    for (size_t i = 0; i < w.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      w[i] -= lr_ * v[i];
    }
    p.tensor.clear_grad();
  }
}

void AdamW::step(std::span<NamedParam> params) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (NamedParam& p : params) {
    auto g = require_grad(p);
    auto w = p.tensor.mutable_data();
    auto& s = state_[p.tensor.impl()];
    if (s.m.empty()) {
      s.m.assign(w.size(), 0.0);
      s.v.assign(w.size(), 0.0);
    }
    for (size_t i = 0; i < w.size(); ++i) {
      w[i] -= lr_ * weight_decay_ * w[i];
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
      double mhat = s.m[i] / bc1;
      double vhat = s.v[i] / bc2;
      w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
    p.tensor.clear_grad();
  }
}

}  // namespace vf
