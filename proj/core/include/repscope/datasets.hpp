#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "repscope/tensor.hpp"

namespace repscope {

// Ordered, labelled image set. `id` names the example set exactly: two
// datasets with equal ids hold the same examples in the same order.
struct Dataset {
  std::string id;
  Tensor images;  // [m, H, W, C]
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return images.dim(1); }
  std::size_t channels() const { return images.dim(3); }

  // Examples [begin, end) as a new dataset with id "<id>[begin:end]".
  Dataset slice(std::size_t begin, std::size_t end) const;
  // Examples at `rows`, in that order, under the given id.
  Dataset select(std::span<const std::size_t> rows, std::string new_id) const;
};

// Rows of an [m, ...] tensor in the given order.
Tensor gather_examples(const Tensor& x, std::span<const std::size_t> rows);

// CIFAR-style binary batches: each record is 1 label byte followed by 3072
// pixel bytes (1024 R, 1024 G, 1024 B, row-major 32x32). Pixels are scaled
// to [0, 1].
Dataset load_cifar_binary(const std::vector<std::filesystem::path>& files, std::string id,
                          std::size_t num_classes = 10);

// Raw NPY pair: images [m, H, W, C] and integer-valued labels [m], both
// stored as little-endian float arrays.
Dataset load_npy_dataset(const std::filesystem::path& images, const std::filesystem::path& labels, std::string id);

// Procedural image classification. Every image holds one of 10 shapes
// (square, disk, ring, plus, cross, horizontal bars, vertical bars,
// triangle, L-shape, four dots) at a random position and scale over a
// smooth random background, with pixel noise; pixel values are centred
// around 0. With ShapesTask::colour the label is the shape's colour (one
// of 10 palette entries, jittered) and the shape is random; with
// ShapesTask::shape the label is the shape and the colour is random.
enum class ShapesTask { colour, shape };

struct ShapesSpec {
  ShapesTask task = ShapesTask::colour;
  std::size_t examples = 2048;
  std::size_t image_size = 16;
  std::size_t num_classes = 10;
  double pixel_noise = 0.05;
  double background_amplitude = 0.1;  // per low-frequency wave
  double min_scale = 0.35;  // shape box side as a fraction of the image
  double max_scale = 0.55;
  double colour_jitter = 0.1;  // colour task: uniform per-channel jitter
  std::uint64_t seed = 0;
};
Dataset make_shapes_dataset(const ShapesSpec& spec);

// Two linearly separable classes: the label sets which half (left or right)
// of channel 0 is bright and the sign of a uniform tint in channel 1.
Dataset make_separable_dataset(std::size_t examples, std::size_t image_size, std::uint64_t seed);

// Deterministic balanced sampler: `per_class` examples of each class, in
// class-major order, drawn without replacement from `candidates` (all
// examples when empty).
std::vector<std::size_t> sample_per_class(const std::vector<int>& labels, std::size_t num_classes,
                                          std::size_t per_class, std::uint64_t seed,
                                          std::span<const std::size_t> candidates = {});

}  // namespace repscope
