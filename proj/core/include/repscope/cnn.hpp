#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "repscope/model.hpp"

namespace repscope {

enum class Activation { relu, gelu, identity };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view text);

struct CnnStage {
  std::size_t blocks = 1;
  std::size_t channels = 16;
  std::size_t stride = 1;
};

struct CnnConfig {
  std::size_t image_size = 16;
  std::size_t channels = 3;
  std::size_t stem_channels = 16;
  std::vector<CnnStage> stages{{2, 16, 1}, {2, 32, 2}, {2, 64, 2}};
  std::size_t num_classes = 10;
  Activation activation = Activation::relu;
  std::uint64_t seed = 0;

  void validate() const;
};

// Plain residual CNN: 3x3 stem conv + activation, then basic blocks
// out = act(conv3x3(act(conv3x3(x, stride))) + shortcut(x)) where the
// shortcut is the identity or a strided 1x1 projection, then global
// average pooling and a linear head. Feature maps are [h, w, c] per
// example. Capture names: stem, stage{s}.block{b}.skip,
// stage{s}.block{b}.branch, stage{s}.block{b}.out
class Cnn final : public ToyModel {
 public:
  explicit Cnn(CnnConfig config);

  const CnnConfig& config() const { return config_; }

  std::string architecture() const override { return "cnn"; }
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

  // Smallest |pre-activation| over every ReLU input for these images.
  // Finite-difference checks are only valid when perturbations stay
  // below this margin.
  double activation_margin(std::span<const double> params, const Tensor& images) const;

  struct BlockSpec {
    std::size_t stage, index;
    std::size_t h_in, w_in, c_in, h_out, w_out, c_out, stride;
    bool projection;
    std::size_t conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b;
  };
  const std::vector<BlockSpec>& blocks() const { return blocks_; }
  std::size_t stem_w() const { return stem_w_; }
  std::size_t stem_b() const { return stem_b_; }
  std::size_t head_w() const { return head_w_; }
  std::size_t head_b() const { return head_b_; }
  // Spatial size and channel count of the final feature map.
  std::size_t final_size() const;
  std::size_t final_channels() const;

 private:
  CnnConfig config_;
  ParamLayout layout_;
  std::vector<BlockSpec> blocks_;
  std::size_t stem_w_ = 0, stem_b_ = 0, head_w_ = 0, head_b_ = 0;
};

CnnConfig cnn_config_from_json(std::string_view json);

}  // namespace repscope
