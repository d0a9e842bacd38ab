#include "repscope/model.hpp"

#include <cmath>

#include "repscope/error.hpp"

namespace repscope {

std::size_t ParamLayout::add(std::string name, Shape shape) {
  const std::size_t size = shape_volume(shape);
  slots_.push_back({std::move(name), std::move(shape), total_, size});
  total_ += size;
  return slots_.size() - 1;
}

const ParamSlot& ParamLayout::find(std::string_view name) const {
  for (const auto& s : slots_) {
    if (s.name == name) return s;
  }
  throw InvalidArgument("no parameter named '" + std::string(name) + "'");
}

void ToyModel::check_params(std::span<const double> params) const {
  if (params.size() != layout().total()) {
    throw InvalidArgument("parameter vector has " + std::to_string(params.size()) + " entries, model expects " +
                          std::to_string(layout().total()));
  }
}

void ToyModel::check_images(const Tensor& images) const {
  if (images.rank() != 4 || images.dim(1) != image_size() || images.dim(2) != image_size() ||
      images.dim(3) != channels()) {
    throw InvalidArgument("images must be [m, " + std::to_string(image_size()) + ", " + std::to_string(image_size()) +
                          ", " + std::to_string(channels()) + "], got " + shape_to_string(images.shape()));
  }
}

double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits) {
  const std::size_t m = logits.dim(0);
  const std::size_t c = logits.dim(1);
  if (labels.size() != m) throw InvalidArgument("label count does not match batch size");
  if (dlogits) *dlogits = Tensor({m, c});
  double loss = 0.0;
  std::vector<double> p(c);
  for (std::size_t i = 0; i < m; ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || y >= c) throw InvalidArgument("label out of range");
    double mx = logits(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      p[j] = std::exp(logits(i, j) - mx);
      z += p[j];
    }
    loss += std::log(z) - (logits(i, y) - mx);
    if (dlogits) {
      for (std::size_t j = 0; j < c; ++j) {
        (*dlogits)(i, j) = (p[j] / z - (j == y ? 1.0 : 0.0)) / static_cast<double>(m);
      }
    }
  }
  return loss / static_cast<double>(m);
}

std::size_t argmax_lowest(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < scores.size(); ++j) {
    if (scores[j] > scores[best]) best = j;
  }
  return best;
}

}  // namespace repscope
