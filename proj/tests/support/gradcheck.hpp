#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "repscope/model.hpp"
#include "repscope/rng.hpp"

namespace repscope::testing {

struct GroupError {
  std::string name;
  double rel_error = 0.0;  // ||analytic - numeric|| / max(||analytic|| + ||numeric||, tiny)
};

// Central differences of the mean cross-entropy at step h for every
// parameter (grouped by layout slot) and every input pixel.
inline std::vector<GroupError> finite_difference_check(const ToyModel& model, std::vector<double> params,
                                                       const Tensor& images, const std::vector<int>& labels,
                                                       double h = 1e-5) {
  const Gradients g = model.backward(params, images, labels);
  auto loss_at = [&](const std::vector<double>& p, const Tensor& x) {
    const ForwardResult r = model.forward(p, x);
    return softmax_cross_entropy(r.logits, labels, nullptr);
  };
  auto group = [](const std::string& name, const std::vector<double>& a, const std::vector<double>& n) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      diff += (a[i] - n[i]) * (a[i] - n[i]);
      na += a[i] * a[i];
      nn += n[i] * n[i];
    }
    const double denom = std::max(std::sqrt(na) + std::sqrt(nn), 1e-12);
    return GroupError{name, std::sqrt(diff) / denom};
  };
  std::vector<GroupError> out;
  for (const auto& slot : model.layout().slots()) {
    std::vector<double> analytic(slot.size), numeric(slot.size);
    for (std::size_t i = 0; i < slot.size; ++i) {
      const std::size_t k = slot.offset + i;
      const double saved = params[k];
      params[k] = saved + h;
      const double lp = loss_at(params, images);
      params[k] = saved - h;
      const double lm = loss_at(params, images);
      params[k] = saved;
      numeric[i] = (lp - lm) / (2.0 * h);
      analytic[i] = g.params[k];
    }
    out.push_back(group(slot.name, analytic, numeric));
  }
  Tensor x = images;
  std::vector<double> analytic(x.size()), numeric(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double lp = loss_at(params, x);
    x[i] = saved - h;
    const double lm = loss_at(params, x);
    x[i] = saved;
    numeric[i] = (lp - lm) / (2.0 * h);
    analytic[i] = g.input[i];
  }
  out.push_back(group("input", analytic, numeric));
  return out;
}

inline Tensor random_images(std::size_t m, std::size_t size, std::size_t channels, std::uint64_t seed) {
  Rng rng(seed);
  Tensor x({m, size, size, channels});
  for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
  return x;
}

// Perturbs every parameter with N(0, scale) noise so that zero-initialised
// biases and unit LayerNorm gains do not hide gradient bugs.
inline std::vector<double> jitter(std::vector<double> params, double scale, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& v : params) v += scale * rng.normal();
  return params;
}

}  // namespace repscope::testing
