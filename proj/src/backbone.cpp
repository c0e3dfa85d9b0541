#include "nptt/backbone.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "nptt/ops.hpp"

NPTT_NAMESPACE_BEGIN

std::size_t BackboneConfig::latent_side() const {
  std::size_t side = input_side;
  for (const auto& s : stages) {
    side = conv_output_extent(side, s.kernel, s.stride, s.kernel / 2);
    if (side == 0) break;
  }
  return side;
}

void BackboneConfig::validate() const {
  if (in_channels == 0) throw std::invalid_argument("backbone needs at least one input channel");
  if (latent_depth == 0) throw std::invalid_argument("latent depth must be >= 1");
  for (const auto& s : stages) {
    if (s.out_channels == 0 || s.kernel == 0 || s.stride == 0) {
      throw std::invalid_argument("backbone stage extents must be positive");
    }
  }
  if (input_side == 0 || latent_side() == 0) {
    throw std::invalid_argument("backbone config maps input side " + std::to_string(input_side) +
                                " to an empty latent map");
  }
}

std::vector<ConvStage> parse_stages(const std::string& text) {
  std::vector<ConvStage> stages;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    ConvStage s;
    char c1 = 0;
    char c2 = 0;
    std::istringstream part(item);
    if (!(part >> s.out_channels >> c1 >> s.kernel >> c2 >> s.stride) || c1 != ':' || c2 != ':') {
      throw std::invalid_argument("bad stage '" + item + "', expected out:kernel:stride");
    }
    stages.push_back(s);
  }
  return stages;
}

std::string format_stages(const std::vector<ConvStage>& stages) {
  std::ostringstream out;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    out << (i ? "," : "") << stages[i].out_channels << ':' << stages[i].kernel << ':' << stages[i].stride;
  }
  return out.str();
}

Backbone Backbone::build(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Backbone b;
  b.config_ = config;
  std::mt19937_64 rng(seed);
  std::size_t channels = config.in_channels;
  for (const auto& s : config.stages) {
    const std::size_t fan_in = channels * s.kernel * s.kernel;
    // He initialization for ReLU layers.
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    std::vector<Real> w(s.out_channels * fan_in);
    for (auto& v : w) v = static_cast<Real>(dist(rng));
    b.weights_.push_back(Tensor::from({s.out_channels, channels, s.kernel, s.kernel}, std::move(w), true));
    b.biases_.push_back(Tensor::zeros({s.out_channels}, true));
    channels = s.out_channels;
  }
  // Xavier-uniform on the 1x1 layer.
  const double bound = std::sqrt(6.0 / static_cast<double>(channels + config.latent_depth));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> h(config.latent_depth * channels);
  for (auto& v : h) v = static_cast<Real>(dist(rng));
  b.head_ = Tensor::from({config.latent_depth, channels, 1, 1}, std::move(h), true);
  return b;
}

Tensor Backbone::forward(const Tensor& batch) const {
  if (batch.rank() != 4 || batch.dim(1) != config_.in_channels || batch.dim(2) != config_.input_side ||
      batch.dim(3) != config_.input_side) {
    throw std::invalid_argument("backbone expects [N x " + std::to_string(config_.in_channels) + " x " +
                                std::to_string(config_.input_side) + " x " + std::to_string(config_.input_side) +
                                "], got " + shape_str(batch.shape()));
  }
  // Pixels in [0, 1] are mapped to [-1, 1] so mid-gray input sits at zero.
  Tensor x = scale(add_scalar(batch, Real(-0.5)), Real(2));
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    const auto& s = config_.stages[i];
    x = relu(conv2d(x, weights_[i], biases_[i], s.stride, s.kernel / 2));
  }
  return sigmoid(conv2d(x, head_, 1, 0));
}

std::vector<Tensor> Backbone::body_parameters() const {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    out.push_back(weights_[i]);
    out.push_back(biases_[i]);
  }
  return out;
}

void Backbone::save(Checkpoint& ckpt) const {
  ckpt.put_scalar("backbone/in_channels", static_cast<double>(config_.in_channels));
  ckpt.put_scalar("backbone/latent_depth", static_cast<double>(config_.latent_depth));
  ckpt.put_scalar("backbone/input_side", static_cast<double>(config_.input_side));
  std::vector<float> stages;
  for (const auto& s : config_.stages) {
    stages.insert(stages.end(), {static_cast<float>(s.out_channels), static_cast<float>(s.kernel),
                                 static_cast<float>(s.stride)});
  }
  ckpt.put("backbone/stages", {config_.stages.size(), 3}, std::move(stages));
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    ckpt.put("backbone/stage" + std::to_string(i) + "/weight", weights_[i]);
    ckpt.put("backbone/stage" + std::to_string(i) + "/bias", biases_[i]);
  }
  ckpt.put("backbone/head", head_);
}

Backbone Backbone::load(const Checkpoint& ckpt) {
  Backbone b;
  b.config_.in_channels = static_cast<std::size_t>(ckpt.scalar("backbone/in_channels"));
  b.config_.latent_depth = static_cast<std::size_t>(ckpt.scalar("backbone/latent_depth"));
  b.config_.input_side = static_cast<std::size_t>(ckpt.scalar("backbone/input_side"));
  const auto& st = ckpt.get("backbone/stages");
  b.config_.stages.clear();
  for (std::size_t i = 0; i + 2 < st.payload.size(); i += 3) {
    b.config_.stages.push_back({static_cast<std::size_t>(st.payload[i]), static_cast<std::size_t>(st.payload[i + 1]),
                                static_cast<std::size_t>(st.payload[i + 2])});
  }
  b.config_.validate();
  for (std::size_t i = 0; i < b.config_.stages.size(); ++i) {
    b.weights_.push_back(ckpt.tensor("backbone/stage" + std::to_string(i) + "/weight", true));
    b.biases_.push_back(ckpt.tensor("backbone/stage" + std::to_string(i) + "/bias", true));
  }
  b.head_ = ckpt.tensor("backbone/head", true);
  return b;
}

Backbone Backbone::clone() const {
  Backbone b;
  b.config_ = config_;
  auto copy = [](const Tensor& t) {
    Tensor c = t.clone();
    c.set_requires_grad(t.requires_grad());
    return c;
  };
  for (const auto& w : weights_) b.weights_.push_back(copy(w));
  for (const auto& bias : biases_) b.biases_.push_back(copy(bias));
  b.head_ = copy(head_);
  return b;
}

NPTT_NAMESPACE_END
