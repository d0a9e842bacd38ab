#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "repscope/tensor.hpp"

namespace repscope {

enum class LayerKind {
  block_output,
  attention_output,
  mlp_hidden,
  norm_output,
  pre_residual_branch,
  skip_branch,
  attention_weights,
  conv_stage_output,
};

std::string_view to_string(LayerKind kind);
LayerKind parse_layer_kind(std::string_view text);
using KindSet = std::set<LayerKind>;

struct LayerEntry {
  std::string name;
  LayerKind kind = LayerKind::block_output;
  Shape shape;
  std::string file;  // relative to the dump directory

  friend bool operator==(const LayerEntry&, const LayerEntry&) = default;
};

// On-disk description of one model's layer dumps over one ordered example set.
//
// Beyond the core fields, a manifest may carry:
//   architecture  "vit", "cnn" or empty when unknown
//   block_order   e.g. "pre-norm"
//   whole_layer_includes_cls  whether flattened whole-layer views keep CLS
//   attention_heads  head count for attention-output layers (0 = unknown)
//   images_file / labels_file  raw inputs [m,H,W,C] and labels [m]
struct DumpManifest {
  std::string model_name;
  std::string dataset_id;
  std::size_t num_examples = 0;
  std::size_t image_size = 0;
  std::size_t patch_size = 0;
  std::size_t grid = 0;
  bool has_cls_token = false;
  std::vector<LayerEntry> layers;
  std::uint64_t seed = 0;

  std::string architecture;
  std::string block_order;
  bool whole_layer_includes_cls = true;
  std::size_t attention_heads = 0;
  std::optional<std::string> images_file;
  std::optional<std::string> labels_file;

  const LayerEntry& layer(std::string_view name) const;
  const LayerEntry* find_layer(std::string_view name) const;
  std::vector<const LayerEntry*> layers_of_kind(const KindSet& kinds) const;

  friend bool operator==(const DumpManifest&, const DumpManifest&) = default;
};

std::string manifest_to_json(const DumpManifest& manifest);
DumpManifest manifest_from_json(std::string_view json);

// Throws DataError on the first structural problem (geometry, names, shapes).
void validate_manifest(const DumpManifest& manifest);

inline std::string default_layer_file(std::string_view name) { return "layers/" + std::string(name) + ".npy"; }

struct DumpPayload {
  std::map<std::string, Tensor, std::less<>> layers;
  std::optional<Tensor> images;
  std::optional<Tensor> labels;
};

// Writes <dir>/manifest.json and one f32 NPY file per layer. Fails if the
// payload does not match the manifest.
void write_dump(const DumpManifest& manifest, const DumpPayload& payload, const std::filesystem::path& dir);

// Lazy accessor over a dump directory; individual layers are loaded and
// validated on demand. Distinct layers may be loaded concurrently.
class DumpReader {
 public:
  explicit DumpReader(std::filesystem::path dir);

  const DumpManifest& manifest() const { return manifest_; }
  const std::filesystem::path& dir() const { return dir_; }

  Tensor load(std::string_view layer_name) const;
  bool has_images() const { return manifest_.images_file.has_value(); }
  bool has_labels() const { return manifest_.labels_file.has_value(); }
  Tensor images() const;
  std::vector<int> labels() const;

 private:
  std::filesystem::path dir_;
  DumpManifest manifest_;
};

DumpReader read_dump(const std::filesystem::path& dir);

// Full validation: manifest, every file, attention normalization, branch
// pairing. Returns warnings; throws DataError on errors.
std::vector<std::string> validate_dump(const std::filesystem::path& dir);

// Attention weights of one layer plus the token-grid geometry needed to
// interpret distances.
struct AttentionTensor {
  Tensor values;  // [m, heads, T, T]
  std::size_t grid = 0;
  std::size_t patch_size = 0;
  bool has_cls_token = false;

  std::size_t examples() const { return values.dim(0); }
  std::size_t heads() const { return values.dim(1); }
  std::size_t tokens() const { return values.dim(2); }
};

// Validates shape against the geometry and that every row sums to 1
// within `row_tolerance`.
AttentionTensor make_attention_tensor(Tensor values, std::size_t grid, std::size_t patch_size,
                                      bool has_cls_token, double row_tolerance = 1e-4);

// Reshapes conv feature maps [m,h,w,c] to token layers [m,h*w,c]; 3-D token
// layers pass through unchanged.
Tensor as_token_layer(const Tensor& layer);

inline constexpr std::nullopt_t all_tokens = std::nullopt;

// token = index: the [m, d] slice of that token. token = all_tokens: the
// [m, T*d] row-major flattening (token 0 features first).
ActivationMatrix tokens_as_matrix(const Tensor& layer, std::optional<std::size_t> token, std::string layer_name = {});

// Whole-layer view of any dumped layer: [m, prod(rest)]. When `drop_cls`
// is set, token 0 of a 3-D token layer is removed first.
ActivationMatrix whole_layer_matrix(const Tensor& layer, std::string layer_name, bool drop_cls = false);

}  // namespace repscope
