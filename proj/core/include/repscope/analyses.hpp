#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "repscope/cka.hpp"
#include "repscope/dump.hpp"
#include "repscope/model.hpp"

namespace repscope {

// ---- attention distance ----

struct HeadDistance {
  std::size_t head = 0;
  double mean_distance = 0.0;  // pixels
  double spread = 0.0;         // std of the mean across example subsets
};

struct LayerDistanceProfile {
  std::string layer;
  std::vector<HeadDistance> heads;  // ascending by mean_distance, ties by head id
};

struct HeadDistanceProfile {
  std::vector<LayerDistanceProfile> layers;
  std::size_t num_examples_averaged = 0;
  std::size_t subsets = 1;
};

// Mean over examples and spatial query tokens of sum_k A[q,k] * dist(q, k)
// in pixels between patch centres. CLS is never a query; mass on the CLS
// key is dropped and the remaining row renormalised. Per-example values
// are summed in sorted order so the result is exactly invariant to example
// order. `subsets` contiguous example groups give the reported spread.
std::vector<HeadDistance> attention_distance(const AttentionTensor& attn, std::size_t subsets = 1,
                                             double row_tolerance = 1e-4);

// Every attention-weights layer of a dump, over up to `max_examples`
// examples drawn with `seed` (all of them when the dump is smaller).
HeadDistanceProfile attention_distance_profile(const DumpReader& dump, std::size_t max_examples = 512,
                                               std::size_t subsets = 4, std::uint64_t seed = 0);

// Largest possible mean distance for a grid: p * sqrt(2) * (grid - 1).
double attention_diameter(std::size_t grid, std::size_t patch_size);

// ---- effective receptive field ----

enum class ErfVariant { post_residual, pre_residual };
std::string_view to_string(ErfVariant v);
ErfVariant parse_erf_variant(std::string_view text);

struct ReceptiveField {
  std::string layer;      // layer the gradient was taken of
  std::size_t location = 0;
  Tensor raw;             // [H, W] mean |gradient|
  Tensor normalized;      // raw / max(raw), or zeros when raw is all zero
};

// Resolves the layer the gradient is taken of. post_residual uses `layer`
// as given; pre_residual maps a block output (ViT "block{i}.out", CNN
// "stage{s}.block{b}.out") to the long branch of that block (the attention
// sublayer for ViT) and rejects anything else.
std::string resolve_erf_layer(const ToyModel& model, std::string_view layer, ErfVariant variant);

// |d feature[center, c] / d input| averaged over channels c, input channels
// and images (e.g. 32 samples).
ReceptiveField effective_receptive_field(const ToyModel& model, std::span<const double> params,
                                         std::string_view layer, ErfVariant variant, const Tensor& images,
                                         std::size_t workers = 1);

// Fraction of the total receptive-field mass inside the square
// [top, top+size) x [left, left+size).
double window_mass_fraction(const Tensor& field, std::size_t top, std::size_t left, std::size_t size);

// ---- skip / long-branch norms ----

struct BranchNorms {
  std::string name;         // pair key, e.g. "block3.attn" or "stage1.block0"
  std::string skip_layer;
  std::string branch_layer;
  std::vector<double> ratio;       // per token: mean ||z|| / mean ||f(z)||
  std::vector<bool> degenerate;    // mean ||f(z)|| < 1e-12; ratio left at 0
  std::vector<double> cosine;      // per token: mean cos(z, z + f(z))
  double cls_ratio = 0.0;          // token 0 when the model has CLS
  double spatial_ratio = 0.0;      // mean per-token ratio over spatial tokens
  double cls_cosine = 0.0;
  double spatial_cosine = 0.0;
};

struct BranchNormResult {
  bool has_cls_token = false;
  std::vector<BranchNorms> entries;  // manifest order of the skip layers
};

// z, f: [m, T, d] (or conv maps [m, h, w, c]).
BranchNorms compute_branch_norms(const Tensor& z, const Tensor& f, bool has_cls_token);

// Pairs every skip-branch layer with the pre-residual-branch layer of the
// same name prefix.
BranchNormResult branch_norms(const DumpReader& dump);

// ---- spatial localization ----

struct LocalizationMap {
  std::size_t token = 0;          // index in the token layer (CLS included)
  std::size_t row = 0, col = 0;   // grid coordinates of the token
  Tensor scores;                  // [grid, grid]; negative CKA clipped to 0

  std::size_t argmax() const;     // flat index, lowest on ties
  // Own-location score minus the best score elsewhere.
  double own_margin() const;
};

struct PatchGeometry {
  std::size_t grid = 0;
  std::size_t patch_size = 0;
  bool has_cls_token = false;
};

// [m, patch*patch*C] pixels of every grid location, row-major locations.
std::vector<ActivationMatrix> image_patches(const Tensor& images, std::size_t grid, std::size_t patch_size);

// Maps for the given spatial tokens (indices into the token layer) of a
// [m, T, d] layer against raw images [m, H, W, C].
std::vector<LocalizationMap> localization_maps(const Tensor& token_layer, const Tensor& images,
                                               const PatchGeometry& geometry, std::span<const std::size_t> tokens,
                                               const CkaConfig& config, std::size_t workers = 1);

LocalizationMap localization_map(const Tensor& token_layer, const Tensor& images, const PatchGeometry& geometry,
                                 std::size_t token, const CkaConfig& config);

// Geometry of a dumped layer: ViT token layers use the manifest grid; conv
// maps [m, h, w, c] use h with patch image_size / h.
PatchGeometry layer_geometry(const DumpManifest& manifest, const LayerEntry& layer);

// Token indices of the interior grid locations (not on the border).
std::vector<std::size_t> interior_tokens(const PatchGeometry& geometry);

}  // namespace repscope
