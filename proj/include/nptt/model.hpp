#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "nptt/backbone.hpp"
#include "nptt/checkpoint.hpp"
#include "nptt/data.hpp"
#include "nptt/prototree.hpp"

NPTT_NAMESPACE_BEGIN

// Where a prototype was copied from during projection.
struct ProjectionRecord {
  std::size_t prototype = 0;
  std::size_t node = 0;
  std::size_t image_index = 0;  // index into the training set used for projection
  PatchLocation location;
  Real distance = 0;            // prototype-to-patch distance before replacement
  bool constrained = false;
  bool fell_back = false;       // constrained pool was empty, searched all images
};

struct ProtoTreeModel {
  Backbone backbone;
  ProtoTree tree;
  std::uint64_t seed = 0;

  bool projected = false;
  std::vector<ProjectionRecord> projection;
  // Source image of each projected prototype, kept so exports stay faithful
  // without the training set.
  std::vector<Image> projection_sources;

  static ProtoTreeModel create(const BackboneConfig& backbone, std::size_t height, std::size_t num_classes,
                               std::uint64_t seed);

  std::size_t num_classes() const { return tree.num_classes(); }
  std::size_t input_side() const { return backbone.config().input_side; }

  TreeForward forward(const Tensor& images) const { return tree.forward(backbone.forward(images)); }

  void save(Checkpoint& ckpt) const;
  Checkpoint to_checkpoint() const;
  static ProtoTreeModel load(const Checkpoint& ckpt);
  static ProtoTreeModel load(const std::string& path) { return load(Checkpoint::load(path)); }
  void save(const std::string& path) const { to_checkpoint().save(path); }

  ProtoTreeModel clone() const;
};

// Gradient-free inference over a whole dataset, batched and optionally split
// across worker threads. Per-sample results do not depend on the batching.
struct Inference {
  std::size_t count = 0;
  std::size_t prototypes = 0;
  std::size_t leaves = 0;
  std::size_t classes = 0;
  std::size_t latent_width = 0;
  std::vector<Real> distances;   // [N x P]
  std::vector<Real> p_right;     // [N x P]
  std::vector<std::size_t> argmin;
  std::vector<Real> path_prob;   // [N x L]
  std::vector<Real> prediction;  // [N x K]

  std::span<const Real> prediction_of(std::size_t n) const { return std::span(prediction).subspan(n * classes, classes); }
  std::span<const Real> p_right_of(std::size_t n) const { return std::span(p_right).subspan(n * prototypes, prototypes); }
  std::span<const Real> path_prob_of(std::size_t n) const { return std::span(path_prob).subspan(n * leaves, leaves); }
  RoutingTrace trace(std::size_t n) const;
  std::size_t predicted_class(std::size_t n) const;
};

Inference infer(const ProtoTreeModel& model, std::span<const Image> images, std::size_t batch_size = 64);
Inference infer(const ProtoTreeModel& model, const Dataset& data, std::size_t batch_size = 64);

// Latent maps [N x D x H x W] of the given images, computed without a tape.
Tensor compute_latents(const Backbone& backbone, std::span<const Image> images, std::size_t batch_size = 64);

double soft_accuracy(const ProtoTreeModel& model, const Dataset& data);
double accuracy_of(const Inference& inference, std::span<const std::size_t> labels);

// Worker count from NPTT_THREADS (defaults to 1).
std::size_t worker_threads();

std::size_t argmax(std::span<const Real> values);

NPTT_NAMESPACE_END
