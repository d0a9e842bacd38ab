#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "repscope/dump.hpp"
#include "repscope/tensor.hpp"

namespace repscope {

enum class Aggregation {
  first_token,
  mean_all,
  mean_excluding_first,
  single_token,
  per_token,  // one probe per token (CLS excluded), accuracies averaged
  resnet_patch_flatten_pool,
};
std::string_view to_string(Aggregation a);
Aggregation parse_aggregation(std::string_view text);

struct ProbeSpec {
  std::size_t shots = 10;  // examples per class
  std::size_t num_classes = 0;  // 0 = take from the dump labels
  std::vector<double> ridge_grid{1e-6, 1e-4, 1e-2, 1.0, 1e2};
  Aggregation aggregation = Aggregation::mean_all;
  std::size_t token = 0;  // single_token
  std::size_t target_channels = 0;  // resnet_patch_flatten_pool; 0 = final-stage channels
  std::size_t max_eval = 0;  // 0 = every example not used for fitting
  std::uint64_t seed = 0;

  void validate() const;
};

// Ridge probe with targets in {-1, 1}^N. Weights are [d + 1, N] with the
// unregularised bias in the last row.
struct Probe {
  Tensor weights;
  double lambda = 0.0;

  Tensor scores(const Tensor& features) const;  // [n, N]
  std::vector<int> predict(const Tensor& features) const;  // argmax, lowest class on ties
};

// Solves W = (X'X + lambda I)^-1 X'Y with an unregularised constant feature
// (implemented by centring X and Y). Uses the d x d system when d <= n and
// the n x n dual otherwise. lambda = 0 with d >= n is rejected.
Probe fit_probe(const Tensor& features, std::span<const int> labels, std::size_t num_classes, double lambda);

// Scores within this distance of the best count as ties at argmax.
inline constexpr double kProbeTieTolerance = 1e-9;

double probe_accuracy(const Probe& probe, const Tensor& features, std::span<const int> labels);

// Fits on `rows` of (features, labels) with lambda picked from the default
// grid on a held-out fifth of each class's shots, then refits on all rows.
Probe fit_probe_selected(const Tensor& features, std::span<const int> labels, std::span<const std::size_t> rows,
                         const ProbeSpec& spec, std::size_t num_classes);

// Space-to-depth by `factor` then average pooling to pooled_size x
// pooled_size: [m, h, w, c] -> [m, pooled_size^2 * c * factor^2].
Tensor space_to_depth(const Tensor& feature_map, std::size_t factor);
Tensor average_pool(const Tensor& feature_map, std::size_t pooled_size);
ActivationMatrix resnet_patch_flatten(const Tensor& feature_map, std::size_t factor, std::size_t pooled_size);
// Smallest power-of-two factor f with c * f^2 >= target_channels.
std::size_t patch_flatten_factor(std::size_t channels, std::size_t target_channels);

struct ProbeLayerResult {
  std::string layer;
  double normalized_depth = 0.0;
  Aggregation aggregation = Aggregation::mean_all;
  double accuracy = 0.0;
  double lambda = 0.0;  // per_token: the most frequently chosen value
  std::size_t train_examples = 0;
  std::size_t val_examples = 0;
  std::size_t test_examples = 0;
};

struct ProbeResult {
  std::vector<ProbeLayerResult> layers;  // manifest order
};

// Probe every layer of the given kinds (default: block outputs and conv
// stage outputs). Shots are drawn from the dump's examples; every other
// example (up to max_eval) is the evaluation set.
ProbeResult probe_curve(const DumpReader& dump, const ProbeSpec& spec, const KindSet& kinds = {},
                        std::size_t workers = 1);

// Feature matrix of one layer under an aggregation (per_token excluded).
Tensor aggregate_features(const Tensor& layer, const DumpManifest& manifest, const LayerEntry& entry,
                          const ProbeSpec& spec);

}  // namespace repscope
