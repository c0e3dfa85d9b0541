#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nptt/checkpoint.hpp"
#include "nptt/tensor.hpp"

NPTT_NAMESPACE_BEGIN

struct ConvStage {
  std::size_t out_channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;

  bool operator==(const ConvStage&) const = default;
};

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::vector<ConvStage> stages{{16, 3, 2}, {32, 3, 2}, {64, 3, 2}};
  std::size_t latent_depth = 32;
  std::size_t input_side = 64;

  // Spatial side of the latent map; throws when it would be < 1.
  std::size_t latent_side() const;
  void validate() const;

  bool operator==(const BackboneConfig&) const = default;
};

// Parses "16:3:2,32:3:2" (out_channels:kernel:stride per stage).
std::vector<ConvStage> parse_stages(const std::string& text);
std::string format_stages(const std::vector<ConvStage>& stages);

// Small CNN f(x; w): [conv -> ReLU] per body stage, then a bias-free 1x1
// convolution to the latent depth followed by a sigmoid, so latent values lie
// in (0, 1).
class Backbone {
 public:
  Backbone() = default;
  static Backbone build(const BackboneConfig& config, std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }

  // [N x C x S x S] -> [N x D x H x W]
  Tensor forward(const Tensor& batch) const;

  // Parameter groups; the optimizer gives each its own learning rate.
  std::vector<Tensor> body_parameters() const;
  std::vector<Tensor> head_parameters() const { return {head_}; }

  std::vector<Tensor>& stage_weights() { return weights_; }
  std::vector<Tensor>& stage_biases() { return biases_; }
  Tensor& head() { return head_; }

  void save(Checkpoint& ckpt) const;
  static Backbone load(const Checkpoint& ckpt);

  Backbone clone() const;

 private:
  BackboneConfig config_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
  Tensor head_;
};

NPTT_NAMESPACE_END
