#include "nptt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "nptt/ops.hpp"

NPTT_NAMESPACE_BEGIN

// ---- Config ------------------------------------------------------------------------

void TrainConfig::validate() const {
  backbone.validate();
  if (height < 1) throw TrainError("height must be >= 1");
  if (epochs < 1) throw TrainError("epochs must be >= 1");
  if (batch_size < 1) throw TrainError("batch_size must be >= 1");
  if (lr_body < 0 || lr_head < 0 || lr_prototypes < 0) throw TrainError("learning rates must be non-negative");
  if (!(gamma > 0)) throw TrainError("gamma must be positive");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw TrainError("Adam moment decays must be in [0, 1)");
  if (!(adam_eps > 0)) throw TrainError("adam_eps must be positive");
  for (std::size_t i = 1; i < milestones.size(); ++i) {
    if (milestones[i] <= milestones[i - 1]) throw TrainError("milestones must be strictly increasing");
  }
  augment.validate();
}

double TrainConfig::decay_factor(std::size_t epoch) const {
  double f = 1.0;
  for (auto m : milestones) {
    if (epoch > m) f *= gamma;
  }
  return f;
}

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw TrainError("config key '" + key + "': '" + v + "' is not a number");
  }
}

std::size_t to_size(const std::string& key, const std::string& v) {
  const double d = to_double(key, v);
  if (d < 0 || d != std::floor(d)) throw TrainError("config key '" + key + "': '" + v + "' is not a count");
  return static_cast<std::size_t>(d);
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw TrainError("config key '" + key + "': '" + v + "' is not a boolean");
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(10);
  out << v;
  return out.str();
}

}  // namespace

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto sep = line.find('=');
    if (sep == std::string::npos) sep = line.find(':');
    if (sep == std::string::npos) throw TrainError("config line " + std::to_string(line_no) + ": expected key = value");
    auto key = trim(line.substr(0, sep));
    auto value = trim(line.substr(sep + 1));
    if (key.empty()) throw TrainError("config line " + std::to_string(line_no) + ": empty key");
    out[key] = value;
  }
  return out;
}

void apply_config(const std::map<std::string, std::string>& values, TrainConfig& c) {
  for (const auto& [key, v] : values) {
    if (key == "height") c.height = to_size(key, v);
    else if (key == "in_channels") c.backbone.in_channels = to_size(key, v);
    else if (key == "stages") c.backbone.stages = parse_stages(v);
    else if (key == "latent_depth") c.backbone.latent_depth = to_size(key, v);
    else if (key == "input_side") c.backbone.input_side = to_size(key, v);
    else if (key == "leaf_normalization") {
      if (v == "softmax") c.leaf_normalization = LeafNormalization::softmax;
      else if (v == "l1") c.leaf_normalization = LeafNormalization::l1;
      else throw TrainError("leaf_normalization must be softmax or l1");
    }
    else if (key == "epochs") c.epochs = to_size(key, v);
    else if (key == "batch_size") c.batch_size = to_size(key, v);
    else if (key == "lr_body") c.lr_body = to_double(key, v);
    else if (key == "lr_head") c.lr_head = to_double(key, v);
    else if (key == "lr_prototypes") c.lr_prototypes = to_double(key, v);
    else if (key == "milestones") {
      c.milestones.clear();
      std::stringstream in(v);
      std::string item;
      while (std::getline(in, item, ',')) {
        item = trim(item);
        if (!item.empty()) c.milestones.push_back(to_size(key, item));
      }
    }
    else if (key == "gamma") c.gamma = to_double(key, v);
    else if (key == "beta1") c.beta1 = to_double(key, v);
    else if (key == "beta2") c.beta2 = to_double(key, v);
    else if (key == "adam_eps") c.adam_eps = to_double(key, v);
    else if (key == "frozen_epochs") c.frozen_epochs = to_size(key, v);
    else if (key == "seed") c.seed = to_size(key, v);
    else if (key == "augment") c.augment.enabled = to_bool(key, v);
    else if (key == "flip_p") c.augment.horizontal_flip_p = static_cast<Real>(to_double(key, v));
    else if (key == "brightness_lo") c.augment.brightness_lo = static_cast<Real>(to_double(key, v));
    else if (key == "brightness_hi") c.augment.brightness_hi = static_cast<Real>(to_double(key, v));
    else throw TrainError("unknown config key '" + key + "'");
  }
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw TrainError("cannot open config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  TrainConfig c;
  apply_config(parse_key_values(buf.str()), c);
  return c;
}

std::string format_config(const TrainConfig& c) {
  std::ostringstream out;
  out << "height = " << c.height << '\n'
      << "in_channels = " << c.backbone.in_channels << '\n'
      << "stages = " << format_stages(c.backbone.stages) << '\n'
      << "latent_depth = " << c.backbone.latent_depth << '\n'
      << "input_side = " << c.backbone.input_side << '\n'
      << "leaf_normalization = " << (c.leaf_normalization == LeafNormalization::softmax ? "softmax" : "l1") << '\n'
      << "epochs = " << c.epochs << '\n'
      << "batch_size = " << c.batch_size << '\n'
      << "lr_body = " << fmt(c.lr_body) << '\n'
      << "lr_head = " << fmt(c.lr_head) << '\n'
      << "lr_prototypes = " << fmt(c.lr_prototypes) << '\n'
      << "milestones = ";
  for (std::size_t i = 0; i < c.milestones.size(); ++i) out << (i ? "," : "") << c.milestones[i];
  out << '\n'
      << "gamma = " << fmt(c.gamma) << '\n'
      << "beta1 = " << fmt(c.beta1) << '\n'
      << "beta2 = " << fmt(c.beta2) << '\n'
      << "adam_eps = " << fmt(c.adam_eps) << '\n'
      << "frozen_epochs = " << c.frozen_epochs << '\n'
      << "seed = " << c.seed << '\n'
      << "augment = " << (c.augment.enabled ? "true" : "false") << '\n'
      << "flip_p = " << fmt(c.augment.horizontal_flip_p) << '\n'
      << "brightness_lo = " << fmt(c.augment.brightness_lo) << '\n'
      << "brightness_hi = " << fmt(c.augment.brightness_hi) << '\n';
  return out.str();
}

// ---- Loss ----------------------------------------------------------------------------

double cross_entropy(std::span<const Real> prediction, std::span<const Real> target) {
  if (prediction.size() != target.size()) throw TrainError("prediction and target sizes differ");
  std::size_t ones = 0;
  std::size_t hot = 0;
  for (std::size_t k = 0; k < target.size(); ++k) {
    if (target[k] == Real(1)) {
      ++ones;
      hot = k;
    } else if (target[k] != Real(0)) {
      throw TrainError("target is not one-hot");
    }
  }
  if (ones != 1) throw TrainError("target is not one-hot");
  if (!(prediction[hot] > Real(0))) throw TrainError("prediction for the true class must be positive");
  return -std::log(static_cast<double>(prediction[hot]));
}

Tensor cross_entropy_loss(const Tensor& prediction, std::span<const std::size_t> labels) {
  // Tiny floor so an underflowed probability yields a large finite loss.
  const Tensor picked = pick(prediction, labels);
  std::vector<Real> floored(picked.values().begin(), picked.values().end());
  bool any_floored = false;
  for (auto& v : floored) {
    if (v < std::numeric_limits<Real>::min()) {
      v = std::numeric_limits<Real>::min();
      any_floored = true;
    }
  }
  if (!any_floored) return neg(mean(log(picked)));
  const Tensor safe = record_op(picked.shape(), std::move(floored), {picked}, [picked](std::span<const Real> g) {
    auto gp = grad_sink(picked);
    auto v = picked.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (v[i] >= std::numeric_limits<Real>::min()) gp[i] += g[i];
    }
  });
  return neg(mean(log(safe)));
}

Tensor tree_nll_loss(const Tensor& path_prob, std::span<const double> leaf_log_dist,
                     std::span<const std::size_t> labels) {
  const std::size_t n = labels.size();
  if (path_prob.rank() != 2 || path_prob.dim(0) != n || n == 0) throw TrainError("path probabilities must be N x L");
  const std::size_t leaves = path_prob.dim(1);
  if (leaf_log_dist.size() % leaves != 0) throw TrainError("leaf distributions do not match the leaf count");
  const std::size_t k = leaf_log_dist.size() / leaves;
  const auto pi = path_prob.values();

  // Per sample: log yhat_y and the leaf weights sigma_l(y) / yhat_y.
  std::vector<double> weights(n * leaves, 0.0);
  double total_loss = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t y = labels[s];
    if (y >= k) throw TrainError("label out of range in loss");
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < leaves; ++l) {
      if (pi[s * leaves + l] > Real(0)) top = std::max(top, std::log(static_cast<double>(pi[s * leaves + l])) + leaf_log_dist[l * k + y]);
    }
    if (top == -std::numeric_limits<double>::infinity()) throw TrainError("true class has zero probability in every reachable leaf");
    double total = 0;
    for (std::size_t l = 0; l < leaves; ++l) {
      if (pi[s * leaves + l] > Real(0)) total += std::exp(std::log(static_cast<double>(pi[s * leaves + l])) + leaf_log_dist[l * k + y] - top);
    }
    const double log_yhat = top + std::log(total);
    total_loss -= log_yhat;
    for (std::size_t l = 0; l < leaves; ++l) weights[s * leaves + l] = std::exp(leaf_log_dist[l * k + y] - log_yhat);
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  return record_op({}, {static_cast<Real>(total_loss * inv_n)}, {path_prob},
                   [path_prob, weights = std::move(weights), inv_n](std::span<const Real> g) {
                     auto gp = grad_sink(path_prob);
                     for (std::size_t i = 0; i < weights.size(); ++i) {
                       gp[i] -= static_cast<Real>(g[0] * inv_n * weights[i]);
                     }
                   });
}

// ---- Adam ----------------------------------------------------------------------------

Adam::Adam(std::vector<Group> groups, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& g : groups_) {
    auto& m = first_.emplace_back();
    auto& v = second_.emplace_back();
    for (const auto& p : g.params) {
      if (!p.requires_grad()) throw TrainError("optimizer parameter does not require grad");
      m.emplace_back(p.numel(), 0.0);
      v.emplace_back(p.numel(), 0.0);
    }
  }
}

void Adam::zero_grad() {
  for (auto& g : groups_) {
    for (auto& p : g.params) p.zero_grad();
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
    auto& group = groups_[gi];
    for (std::size_t pi = 0; pi < group.params.size(); ++pi) {
      auto& p = group.params[pi];
      auto values = p.values();
      auto grad = p.grad();
      auto& m = first_[gi][pi];
      auto& v = second_[gi][pi];
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double g = grad[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        if (group.lr == 0.0) continue;
        const double update = group.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
        values[i] = static_cast<Real>(values[i] - update);
      }
    }
  }
}

Adam make_optimizer(ProtoTreeModel& model, const TrainConfig& config) {
  std::vector<Adam::Group> groups(3);
  groups[kBodyGroup] = {model.backbone.body_parameters(), config.lr_body};
  groups[kHeadGroup] = {model.backbone.head_parameters(), config.lr_head};
  groups[kPrototypeGroup] = {{model.tree.prototypes()}, config.lr_prototypes};
  return Adam(std::move(groups), config.beta1, config.beta2, config.adam_eps);
}

// ---- Leaf update ----------------------------------------------------------------------

void EpochLeafAccumulator::begin(const ProtoTree& tree, std::size_t num_batches) {
  if (num_batches == 0) throw TrainError("an epoch needs at least one batch");
  leaves_ = tree.topology().num_leaves();
  classes_ = tree.num_classes();
  num_batches_ = num_batches;
  batches_seen_ = 0;
  const auto logits = tree.leaf_logits().values();
  snapshot_.assign(logits.begin(), logits.end());
  snapshot_log_dist_ = tree.leaf_log_distributions();
  running_ = snapshot_;
}

void EpochLeafAccumulator::update_batch(std::span<const Real> path_prob, std::span<const std::size_t> labels) {
  const std::size_t batch = labels.size();
  if (path_prob.size() != batch * leaves_) throw TrainError("leaf update received inconsistent batch shapes");
  const double share = 1.0 / static_cast<double>(num_batches_);
  for (std::size_t i = 0; i < running_.size(); ++i) running_[i] -= share * snapshot_[i];
  std::vector<double> terms(leaves_);
  for (std::size_t n = 0; n < batch; ++n) {
    const std::size_t y = labels[n];
    if (y >= classes_) throw TrainError("label out of range in leaf update");
    // sigma_l(y) * pi_l / yhat_y with yhat_y = sum_l pi_l sigma_l(y), as a
    // softmax over leaves of log pi_l + log sigma_l(y).
    const double top = log_terms(path_prob.subspan(n * leaves_, leaves_), y, terms);
    if (top == -std::numeric_limits<double>::infinity()) continue;
    double total = 0;
    for (double t : terms) total += std::exp(t - top);
    const double log_yhat = top + std::log(total);
    for (std::size_t l = 0; l < leaves_; ++l) running_[l * classes_ + y] += std::exp(terms[l] - log_yhat);
  }
  ++batches_seen_;
}

double EpochLeafAccumulator::log_terms(std::span<const Real> pi, std::size_t y, std::vector<double>& terms) const {
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < leaves_; ++l) {
    terms[l] = pi[l] > Real(0) ? std::log(static_cast<double>(pi[l])) + snapshot_log_dist_[l * classes_ + y]
                               : -std::numeric_limits<double>::infinity();
    top = std::max(top, terms[l]);
  }
  return top;
}

void EpochLeafAccumulator::commit(ProtoTree& tree) const {
  auto logits = tree.leaf_logits().values();
  if (logits.size() != running_.size()) throw TrainError("tree changed shape during the epoch");
  // The telescoped decrement cancels the snapshot up to rounding; the update is
  // a sum of non-negative terms.
  for (std::size_t i = 0; i < running_.size(); ++i) logits[i] = static_cast<Real>(std::max(running_[i], 0.0));
}

// ---- Epoch loop ------------------------------------------------------------------------

std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0x5eedu,
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

EpochMetrics train_epoch(ProtoTreeModel& model, Adam& optimizer, const Dataset& data, const TrainConfig& config,
                         std::size_t epoch) {
  data.validate(false);
  if (data.num_classes() != model.num_classes()) throw TrainError("dataset classes do not match the model");
  const std::size_t n = data.size();
  const std::size_t bs = std::min(config.batch_size, n);
  const std::size_t num_batches = (n + bs - 1) / bs;
  const auto perm = epoch_permutation(n, config.seed, epoch);

  const double decay = config.decay_factor(epoch);
  optimizer.set_lr(kBodyGroup, epoch <= config.frozen_epochs ? 0.0 : config.lr_body * decay);
  optimizer.set_lr(kHeadGroup, config.lr_head * decay);
  optimizer.set_lr(kPrototypeGroup, config.lr_prototypes * decay);

  EpochLeafAccumulator leaves;
  leaves.begin(model.tree, num_batches);

  EpochMetrics metrics;
  metrics.epoch = epoch;
  double loss_total = 0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < num_batches; ++b) {
    const std::size_t begin = b * bs;
    const std::size_t end = std::min(n, begin + bs);
    std::vector<Image> images;
    std::vector<std::size_t> labels;
    for (std::size_t i = begin; i < end; ++i) {
      const std::size_t item = perm[i];
      std::seed_seq seq{static_cast<std::uint32_t>(config.seed), static_cast<std::uint32_t>(config.seed >> 32),
                        static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(item)};
      std::mt19937_64 rng(seq);
      images.push_back(augment(data.images[item], config.augment, draw_augment(config.augment, rng)));
      labels.push_back(data.labels[item]);
    }

    const auto forward = model.forward(stack_images(images));
    const auto leaf_log_dist = model.tree.leaf_log_distributions();
    const Tensor loss = tree_nll_loss(forward.path_prob, leaf_log_dist, labels);
    const double loss_value = loss.item();
    if (!std::isfinite(loss_value)) {
      throw TrainError("non-finite loss in epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
    }
    optimizer.zero_grad();
    loss.backward();
    optimizer.step();

    leaves.update_batch(forward.path_prob.values(), labels);

    loss_total += loss_value * static_cast<double>(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto row = forward.prediction.values().subspan(i * model.num_classes(), model.num_classes());
      correct += argmax(row) == labels[i];
    }
  }
  leaves.commit(model.tree);

  metrics.mean_loss = loss_total / static_cast<double>(n);
  metrics.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return metrics;
}

TrainResult train(const Dataset& train_set, const Dataset* test_set, const TrainConfig& config,
                  const EpochCallback& on_epoch) {
  config.validate();
  train_set.validate();
  if (train_set.side != config.backbone.input_side || train_set.channels != config.backbone.in_channels) {
    throw TrainError("training images are " + std::to_string(train_set.channels) + "x" + std::to_string(train_set.side) +
                     " but the backbone expects " + std::to_string(config.backbone.in_channels) + "x" +
                     std::to_string(config.backbone.input_side));
  }
  TrainResult result;
  result.model = ProtoTreeModel::create(config.backbone, config.height, train_set.num_classes(), config.seed);
  result.model.tree.set_normalization(config.leaf_normalization);
  Adam optimizer = make_optimizer(result.model, config);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    auto m = train_epoch(result.model, optimizer, train_set, config, epoch);
    if (test_set) m.test_accuracy = soft_accuracy(result.model, *test_set);
    if (on_epoch) on_epoch(m);
    result.history.push_back(m);
  }
  return result;
}

std::string metrics_csv_header() { return "epoch,loss,train_acc,test_acc"; }

std::string metrics_csv_row(const EpochMetrics& m) {
  char buf[128];
  if (m.test_accuracy) {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f", m.epoch, m.mean_loss, m.train_accuracy, *m.test_accuracy);
  } else {
    std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,", m.epoch, m.mean_loss, m.train_accuracy);
  }
  return buf;
}

NPTT_NAMESPACE_END
