#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "prognet/tensor.hpp"

namespace prognet {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.95;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Bias-corrected Adam with classic L2 weight decay (decay folded into the
// gradient as lambda * theta before the moment updates).
template <typename S>
struct AdamStateT {
  AdamConfig cfg;
  int64_t step_count = 0;
  std::vector<std::vector<S>> m;
  std::vector<std::vector<S>> v;

  AdamStateT() = default;
  explicit AdamStateT(AdamConfig c) : cfg(c) {}

  void init(const std::vector<TensorT<S>>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(static_cast<size_t>(p.numel()), S(0));
      v.emplace_back(static_cast<size_t>(p.numel()), S(0));
    }
    step_count = 0;
  }

  void step(std::vector<TensorT<S>>& params) {
    if (params.size() != m.size())
      throw std::invalid_argument("adam: state holds " + std::to_string(m.size()) +
                                  " slots but got " + std::to_string(params.size()) + " params");
    ++step_count;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (static_cast<size_t>(p.numel()) != m[i].size())
        throw std::invalid_argument("adam: param " + std::to_string(i) + " shape " +
                                    shape_str(p.shape()) + " does not match state of size " +
                                    std::to_string(m[i].size()));
      const auto& g = p.grad();
      auto& data = p.data();
      for (size_t j = 0; j < g.size(); ++j) {
        const S gj = g[j] + static_cast<S>(cfg.weight_decay) * data[j];
        m[i][j] = static_cast<S>(cfg.beta1) * m[i][j] + static_cast<S>(1.0 - cfg.beta1) * gj;
        v[i][j] = static_cast<S>(cfg.beta2) * v[i][j] + static_cast<S>(1.0 - cfg.beta2) * gj * gj;
        const double mh = static_cast<double>(m[i][j]) / bc1;
        const double vh = static_cast<double>(v[i][j]) / bc2;
        data[j] -= static_cast<S>(cfg.lr * mh / (std::sqrt(vh) + cfg.eps));
      }
    }
  }
};

using AdamState = AdamStateT<real_t>;

}  // namespace prognet
