#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "repscope/model.hpp"

namespace repscope {

enum class HeadType { cls, gap };
// Which residual adds an ablated block drops.
enum class SkipAblation { both, attention_only, mlp_only };

std::string_view to_string(HeadType h);
HeadType parse_head_type(std::string_view text);

struct ViTConfig {
  std::size_t image_size = 16;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t depth = 6;
  std::size_t width = 32;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 10;
  HeadType head_type = HeadType::cls;
  std::set<std::size_t> ablate_skip_at;
  SkipAblation ablation = SkipAblation::both;
  // Token indices that no query may attend to (test hook; empty normally).
  std::vector<std::size_t> masked_keys;
  std::uint64_t seed = 0;

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t spatial_tokens() const { return grid() * grid(); }
  std::size_t tokens() const { return spatial_tokens() + (head_type == HeadType::cls ? 1 : 0); }
  std::size_t cls_offset() const { return head_type == HeadType::cls ? 1 : 0; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
  std::size_t head_dim() const { return width / heads; }
  std::size_t hidden() const { return width * mlp_ratio; }

  void validate() const;
};

// Pre-norm Vision Transformer: patch embedding + learned positions (+ CLS),
// blocks of LN -> MHSA -> add, LN -> GELU MLP -> add, final LN, CLS or
// token-mean readout, linear head. Capture names:
//   embed, block{i}.attn.skip, block{i}.norm1, block{i}.attn.weights,
//   block{i}.attn.heads, block{i}.attn.branch, block{i}.mlp.skip,
//   block{i}.norm2, block{i}.mlp.hidden, block{i}.mlp.branch, block{i}.out,
//   final_norm
class ViT final : public ToyModel {
 public:
  explicit ViT(ViTConfig config);

  const ViTConfig& config() const { return config_; }

  std::string architecture() const override { return "vit"; }
  const ParamLayout& layout() const override { return layout_; }
  std::vector<double> init_params(std::uint64_t seed) const override;
  std::size_t image_size() const override { return config_.image_size; }
  std::size_t channels() const override { return config_.channels; }
  std::size_t num_classes() const override { return config_.num_classes; }
  std::uint64_t seed() const override { return config_.seed; }
  std::string config_json() const override;

  std::vector<CapturePoint> capture_points() const override;
  ForwardResult forward(std::span<const double> params, const Tensor& images,
                        const KindSet& capture = {}) const override;
  Gradients backward(std::span<const double> params, const Tensor& images, std::span<const int> labels,
                     std::size_t workers = 1) const override;
  Tensor feature_input_jacobian(std::span<const double> params, const Tensor& image, std::string_view layer,
                                std::size_t location) const override;
  std::size_t center_location(std::string_view layer) const override;
  DumpManifest manifest_template() const override;

  struct Slots {
    std::size_t patch_w, patch_b, cls, pos;
    struct Block {
      std::size_t ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b, ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };
    std::vector<Block> blocks;
    std::size_t lnf_g, lnf_b, head_w, head_b;
  };
  const Slots& slots() const { return slots_; }

  bool attn_skip(std::size_t block) const;
  bool mlp_skip(std::size_t block) const;

 private:
  ViTConfig config_;
  ParamLayout layout_;
  Slots slots_{};
};

ViTConfig vit_config_from_json(std::string_view json);

}  // namespace repscope
