#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "nptt/checkpoint.hpp"
#include "nptt/tensor.hpp"

NPTT_NAMESPACE_BEGIN

inline constexpr int kNone = -1;

struct TreeNode {
  int left = kNone;
  int right = kNone;
  int parent = kNone;
  int prototype = kNone;  // row of the prototype bank, internal nodes only
  int leaf = kNone;       // row of the leaf parameters, leaves only

  bool is_leaf() const { return leaf != kNone; }
  bool operator==(const TreeNode&) const = default;
};

// Binary tree whose internal nodes each own one prototype row and whose
// leaves each own one row of class logits. Leaf indices run left to right.
class TreeTopology {
 public:
  TreeTopology() = default;

  // Full tree of the given height: 2^h leaves and 2^h - 1 internal nodes.
  // Node ids and prototype indices follow pre-order.
  static TreeTopology full(std::size_t height);

  // Validates that `nodes` form a binary tree rooted at `root` where every
  // internal node has two children and prototype/leaf indices are bijections.
  static TreeTopology from_nodes(std::vector<TreeNode> nodes, std::size_t root);

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const TreeNode& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t root() const { return root_; }
  std::size_t num_nodes() const { return nodes_.size(); }
  std::size_t num_internal() const { return internal_nodes_.size(); }
  std::size_t num_leaves() const { return leaf_nodes_.size(); }
  std::size_t height() const;
  std::size_t depth(std::size_t node_id) const;

  // Node id owning prototype row / leaf row.
  std::size_t node_of_prototype(std::size_t prototype) const { return internal_nodes_.at(prototype); }
  std::size_t node_of_leaf(std::size_t leaf) const { return leaf_nodes_.at(leaf); }

  // Leaf indices in the subtree rooted at `node_id`, left to right.
  std::vector<std::size_t> leaves_under(std::size_t node_id) const;
  // Node ids from the root down to the leaf, inclusive.
  std::vector<std::size_t> path_to_leaf(std::size_t leaf) const;

  void save(Checkpoint& ckpt, const std::string& prefix) const;
  static TreeTopology load(const Checkpoint& ckpt, const std::string& prefix);

  bool operator==(const TreeTopology& other) const { return root_ == other.root_ && nodes_ == other.nodes_; }

 private:
  std::vector<TreeNode> nodes_;
  std::size_t root_ = 0;
  std::vector<std::size_t> internal_nodes_;
  std::vector<std::size_t> leaf_nodes_;
};

// Read-only view of one latent map laid out [D x H x W].
struct LatentView {
  std::span<const Real> values;
  std::size_t depth = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  Real at(std::size_t d, std::size_t i, std::size_t j) const { return values[(d * height + i) * width + j]; }
  // Sample `n` of an [N x D x H x W] tensor.
  static LatentView of(const Tensor& latents, std::size_t n);
};

struct PatchLocation {
  std::size_t i = 0;
  std::size_t j = 0;
  bool operator==(const PatchLocation&) const = default;
};

struct NearestPatch {
  PatchLocation location;
  Real distance = 0;
};

// Euclidean distance of `prototype` to every patch of `latent`, minimised.
// Ties go to the smallest row-major index.
NearestPatch nearest_patch(const LatentView& latent, std::span<const Real> prototype);
Real patch_distance(const LatentView& latent, PatchLocation at, std::span<const Real> prototype);

// Probability of taking the right edge for a given nearest-patch distance.
Real edge_probability(Real distance);

// Leaf path probabilities for one sample given p_right per prototype row.
std::vector<Real> route_values(const TreeTopology& topology, std::span<const Real> p_right);

// Differentiable pieces of the forward pass.
// latents [N x D x H x W], prototypes [P x D] -> distances [N x P]; the chosen
// flat patch index per (n, p) is written to `argmin`.
Tensor min_patch_distances(const Tensor& latents, const Tensor& prototypes, std::vector<std::size_t>& argmin);
// p_right [N x P] -> path probabilities [N x L].
Tensor path_probabilities(const Tensor& p_right, const TreeTopology& topology);

struct RoutingTrace {
  std::vector<Real> p_right;  // per prototype row; p_left is 1 - p_right
  std::vector<PatchLocation> location;
  std::vector<Real> distance;
  std::vector<Real> path_prob;  // per leaf
};

struct TreeForward {
  Tensor distances;   // [N x P]
  Tensor p_right;     // [N x P]
  Tensor path_prob;   // [N x L]
  Tensor prediction;  // [N x K]
  std::vector<std::size_t> argmin;
  std::size_t latent_width = 0;

  std::size_t batch() const { return prediction.dim(0); }
  RoutingTrace trace(std::size_t sample) const;
};

enum class LeafNormalization { softmax, l1 };

class ProtoTree {
 public:
  ProtoTree() = default;
  ProtoTree(TreeTopology topology, Tensor prototypes, Tensor leaf_logits,
            LeafNormalization normalization = LeafNormalization::softmax);

  // Prototypes ~ N(0.5, 0.1), leaf logits zero.
  static ProtoTree init(std::size_t height, std::size_t num_classes, std::size_t depth, std::uint64_t seed);

  const TreeTopology& topology() const { return topology_; }
  const Tensor& prototypes() const { return prototypes_; }
  Tensor& prototypes() { return prototypes_; }
  const Tensor& leaf_logits() const { return leaf_logits_; }
  Tensor& leaf_logits() { return leaf_logits_; }
  std::size_t num_classes() const { return leaf_logits_.dim(1); }
  std::size_t depth() const { return prototypes_.dim(1); }
  LeafNormalization normalization() const { return normalization_; }
  void set_normalization(LeafNormalization n) { normalization_ = n; }

  // sigma(c) for every leaf: [L x K], never part of the tape.
  Tensor leaf_distributions() const;
  std::vector<Real> leaf_distribution(std::size_t leaf) const;
  // log sigma(c_l) for every leaf, row-major [L x K], in double so that
  // saturated leaves keep a finite log-probability for minority classes.
  std::vector<double> leaf_log_distributions() const;

  TreeForward forward(const Tensor& latents) const;

  void save(Checkpoint& ckpt) const;
  static ProtoTree load(const Checkpoint& ckpt);
  ProtoTree clone() const;

 private:
  TreeTopology topology_;
  Tensor prototypes_;
  Tensor leaf_logits_;
  LeafNormalization normalization_ = LeafNormalization::softmax;
};

// Normalises each row of non-negative leaf parameters.
std::vector<Real> normalize_leaf(std::span<const Real> logits, LeafNormalization mode);
std::vector<double> log_normalize_leaf(std::span<const Real> logits, LeafNormalization mode);

NPTT_NAMESPACE_END
