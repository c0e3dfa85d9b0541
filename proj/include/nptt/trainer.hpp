#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nptt/backbone.hpp"
#include "nptt/data.hpp"
#include "nptt/model.hpp"
#include "nptt/prototree.hpp"

NPTT_NAMESPACE_BEGIN

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  // Model shape.
  std::size_t height = 4;
  BackboneConfig backbone;
  LeafNormalization leaf_normalization = LeafNormalization::softmax;

  // Optimisation.
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double lr_body = 1e-3;
  double lr_head = 1e-3;
  double lr_prototypes = 1e-3;
  std::vector<std::size_t> milestones;
  double gamma = 0.5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t frozen_epochs = 0;  // body learning rate is 0 for these epochs
  std::uint64_t seed = 0;

  AugmentConfig augment;

  void validate() const;
  // Learning-rate multiplier for 1-based epoch t.
  double decay_factor(std::size_t epoch) const;
};

// Flat "key = value" document; '#' starts a comment.
std::map<std::string, std::string> parse_key_values(const std::string& text);
// Applies known keys to `config`; unknown keys throw.
void apply_config(const std::map<std::string, std::string>& values, TrainConfig& config);
TrainConfig load_train_config(const std::string& path);
std::string format_config(const TrainConfig& config);

// -sum_k y_k log(yhat_k) for one sample; `target` must be one-hot.
double cross_entropy(std::span<const Real> prediction, std::span<const Real> target);
// Batch mean of -log(prediction[n, label[n]]), differentiable.
Tensor cross_entropy_loss(const Tensor& prediction, std::span<const std::size_t> labels);
// Same loss for a tree, evaluated from path probabilities [N x L] and
// log leaf distributions [L x K] in log space. Differentiable in path_prob.
Tensor tree_nll_loss(const Tensor& path_prob, std::span<const double> leaf_log_dist,
                     std::span<const std::size_t> labels);

// Adam with one learning rate per parameter group.
class Adam {
 public:
  struct Group {
    std::vector<Tensor> params;
    double lr = 1e-3;
  };

  Adam(std::vector<Group> groups, double beta1, double beta2, double eps);

  void zero_grad();
  void set_lr(std::size_t group, double lr) { groups_.at(group).lr = lr; }
  void step();

 private:
  std::vector<Group> groups_;
  std::vector<std::vector<std::vector<double>>> first_;
  std::vector<std::vector<std::vector<double>>> second_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
};

enum ParamGroup : std::size_t { kBodyGroup = 0, kHeadGroup = 1, kPrototypeGroup = 2 };

Adam make_optimizer(ProtoTreeModel& model, const TrainConfig& config);

// Derivative-free leaf update interleaved with mini-batches. At epoch start
// the current leaf parameters are snapshotted; each batch subtracts 1/B of
// the snapshot and adds that batch's share of
//   sum_{x,y} (sigma(c_l) * y * pi_l) / yhat
// so after all B batches the running vector is the full-pass result.
// yhat is recomputed from pi and the snapshot in log space, so a class whose
// leaf probabilities underflow in single precision still keeps its mass.
class EpochLeafAccumulator {
 public:
  void begin(const ProtoTree& tree, std::size_t num_batches);

  // path_prob [N x L] from the forward pass of one batch.
  void update_batch(std::span<const Real> path_prob, std::span<const std::size_t> labels);

  std::size_t num_batches() const { return num_batches_; }
  std::size_t batches_seen() const { return batches_seen_; }
  const std::vector<double>& running() const { return running_; }
  const std::vector<double>& snapshot() const { return snapshot_; }
  const std::vector<double>& snapshot_log_distributions() const { return snapshot_log_dist_; }

  // Writes the running vector into the tree's leaf parameters.
  void commit(ProtoTree& tree) const;

 private:
  double log_terms(std::span<const Real> pi, std::size_t y, std::vector<double>& terms) const;

  std::size_t leaves_ = 0;
  std::size_t classes_ = 0;
  std::size_t num_batches_ = 0;
  std::size_t batches_seen_ = 0;
  std::vector<double> snapshot_;
  std::vector<double> snapshot_log_dist_;
  std::vector<double> running_;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double mean_loss = 0;
  double train_accuracy = 0;
  std::optional<double> test_accuracy;
};

// Deterministic per-epoch shuffle of [0, n).
std::vector<std::size_t> epoch_permutation(std::size_t n, std::uint64_t seed, std::size_t epoch);

// One pass of mini-batch training: gradient steps on the backbone and
// prototypes, interleaved leaf updates, leaf commit at the end.
EpochMetrics train_epoch(ProtoTreeModel& model, Adam& optimizer, const Dataset& data, const TrainConfig& config,
                         std::size_t epoch);

struct TrainResult {
  ProtoTreeModel model;
  std::vector<EpochMetrics> history;
};

using EpochCallback = std::function<void(const EpochMetrics&)>;

TrainResult train(const Dataset& train_set, const Dataset* test_set, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

NPTT_NAMESPACE_END
