#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nptt/data.hpp"
#include "nptt/model.hpp"
#include "nptt/prototree.hpp"

NPTT_NAMESPACE_BEGIN

class RefineError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- Pruning ----------------------------------------------------------------

struct PruneReport {
  double tau = 0;
  std::size_t leaves_removed = 0;
  std::size_t internal_removed = 0;
  std::size_t original_leaves = 0;
  std::size_t original_internal = 0;
  double fraction_pruned = 0;  // internal_removed / original_internal
  bool tau_not_above_uniform = false;  // tau <= 1/K, pruning may remove useful leaves
};

// max(0.01, 1.2 / K)
double default_prune_threshold(std::size_t num_classes);

struct PruneResult {
  ProtoTree tree;
  PruneReport report;
  // Old prototype row -> new row, kNone when removed. Same for nodes.
  std::vector<int> prototype_map;
  std::vector<int> node_map;
};

// Removes leaves with max sigma(c) <= tau, drops subtrees left without
// leaves and collapses their parents. Ids are reassigned in pre-order.
// Throws RefineError if every leaf would go.
PruneResult prune_tree(const ProtoTree& tree, double tau);

// Prunes the model in place, remapping projection records when present.
PruneReport prune(ProtoTreeModel& model, double tau);

std::string prune_report_csv(const PruneReport& report);

// ---- Projection -------------------------------------------------------------

// Replaces every prototype with its nearest latent patch from `train`.
// Constrained: only images whose label is the top class of some leaf below
// the prototype's node; an empty pool falls back to the full set. Ties go to
// the smaller image index, then row-major patch order.
std::vector<ProjectionRecord> project(ProtoTreeModel& model, const Dataset& train, bool constrained);

// Same search on precomputed latents [N x D x H x W]; does not modify anything.
std::vector<ProjectionRecord> nearest_training_patches(const ProtoTree& tree, const Tensor& latents,
                                                       std::span<const std::size_t> labels, bool constrained);

double mean_projection_distance(std::span<const ProjectionRecord> records);
std::string projection_csv(std::span<const ProjectionRecord> records);

// ---- Hard inference ---------------------------------------------------------

enum class Strategy { soft, max_path, greedy };

Strategy parse_strategy(const std::string& name);
std::string strategy_name(Strategy s);

struct PathStep {
  std::size_t node = 0;
  bool went_right = false;
  Real p_right = 0;
};

struct HardPrediction {
  std::vector<Real> distribution;
  std::size_t leaf = 0;
  std::vector<PathStep> path;
};

// strategy must be max_path or greedy. Greedy goes right iff p_right > 0.5.
// max_path picks argmax path probability, smallest leaf index on ties.
HardPrediction hard_predict(const ProtoTree& tree, const RoutingTrace& trace, Strategy strategy);
HardPrediction hard_predict(const ProtoTreeModel& model, const Image& image, Strategy strategy);

// Predicted class per sample under the given strategy.
std::vector<std::size_t> predict_classes(const ProtoTreeModel& model, const Inference& inference, Strategy strategy);
std::vector<std::size_t> predict_classes(const ProtoTreeModel& model, const Dataset& data, Strategy strategy);

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels);

// Fraction of samples whose hard prediction agrees with the soft one.
double fidelity(const ProtoTreeModel& model, const Dataset& data, Strategy strategy);
double fidelity(const ProtoTreeModel& model, const Inference& inference, Strategy strategy);

// ---- Ensembles --------------------------------------------------------------

// Mean of the soft predictions, [N x K] row-major.
std::vector<Real> ensemble_predict(std::span<const ProtoTreeModel> models, std::span<const Image> images);
std::vector<Real> ensemble_predict(std::span<const ProtoTreeModel* const> models, std::span<const Image> images);
double ensemble_accuracy(std::span<const ProtoTreeModel* const> models, const Dataset& data);

// ---- Path statistics --------------------------------------------------------

struct PathLengthStats {
  double mean = 0;
  double stddev = 0;
  std::size_t min = 0;
  std::size_t max = 0;
};

// Greedy root-to-leaf depths over the dataset.
PathLengthStats path_length_stats(const ProtoTreeModel& model, const Dataset& data);
PathLengthStats path_length_stats(const ProtoTree& tree, const Inference& inference);

NPTT_NAMESPACE_END
