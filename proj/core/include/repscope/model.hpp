#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "repscope/dump.hpp"
#include "repscope/tensor.hpp"

namespace repscope {

struct ParamSlot {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Named slices of one flat parameter vector.
class ParamLayout {
 public:
  std::size_t add(std::string name, Shape shape);
  const std::vector<ParamSlot>& slots() const { return slots_; }
  const ParamSlot& slot(std::size_t index) const { return slots_[index]; }
  const ParamSlot& find(std::string_view name) const;
  std::size_t total() const { return total_; }

 private:
  std::vector<ParamSlot> slots_;
  std::size_t total_ = 0;
};

struct CapturePoint {
  std::string name;
  LayerKind kind;
  Shape per_example;  // shape without the leading example axis
};

struct ForwardResult {
  Tensor logits;  // [m, classes]
  std::map<std::string, Tensor, std::less<>> captured;
};

struct Gradients {
  double loss = 0.0;            // mean softmax cross-entropy
  std::vector<double> params;   // d loss / d params
  Tensor input;                 // d loss / d images, [m, H, W, C]
  Tensor logits;
};

// Common surface of the toy ViT and toy residual CNN.
class ToyModel {
 public:
  virtual ~ToyModel() = default;

  virtual std::string architecture() const = 0;
  virtual const ParamLayout& layout() const = 0;
  virtual std::vector<double> init_params(std::uint64_t seed) const = 0;
  virtual std::size_t image_size() const = 0;
  virtual std::size_t channels() const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual std::uint64_t seed() const = 0;
  virtual std::string config_json() const = 0;

  virtual std::vector<CapturePoint> capture_points() const = 0;

  // images: [m, H, W, C]. Captures every point whose kind is in `capture`.
  virtual ForwardResult forward(std::span<const double> params, const Tensor& images,
                                const KindSet& capture = {}) const = 0;

  // Exact reverse-mode gradients of the mean cross-entropy over the batch.
  // Examples are split into `workers` fixed chunks; results are identical
  // for a fixed worker count.
  virtual Gradients backward(std::span<const double> params, const Tensor& images, std::span<const int> labels,
                             std::size_t workers = 1) const = 0;

  // For one image [1, H, W, C] and one spatial location of a captured
  // layer, returns d layer[location, c] / d image for every channel c as
  // [channels, H, W, C].
  virtual Tensor feature_input_jacobian(std::span<const double> params, const Tensor& image,
                                        std::string_view layer, std::size_t location) const = 0;

  // Flat spatial index of the centre location of a captured layer, and
  // the side length of its spatial grid. Throws for non-spatial layers.
  virtual std::size_t center_location(std::string_view layer) const = 0;

  // Manifest fields describing the architecture (geometry, CLS, ordering).
  virtual DumpManifest manifest_template() const = 0;

  void check_params(std::span<const double> params) const;
  void check_images(const Tensor& images) const;
};

// Mean softmax cross-entropy of logits [m, C]; writes d loss / d logits.
double softmax_cross_entropy(const Tensor& logits, std::span<const int> labels, Tensor* dlogits);

std::size_t argmax_lowest(std::span<const double> scores);

}  // namespace repscope
