#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nptt/model.hpp"
#include "nptt/prototree.hpp"
#include "nptt/trainer.hpp"

using namespace nptt;

namespace {

// Height-2 tree on a 1x1x1 latent equal to 0, so each prototype value is its
// own distance. Root p_right 0.6, left child 0.5, right child 0.25 give
// pi = (0.2, 0.2, 0.45, 0.15) over leaves left to right.
ProtoTree hand_tree() {
  const std::vector<Real> protos{-std::log(Real(0.6)), -std::log(Real(0.5)), -std::log(Real(0.25))};
  const std::vector<Real> leaves{1, 0, 0, 1, 1, 0, 0, 1};
  return ProtoTree(TreeTopology::full(2), Tensor::from({3, 1}, protos, true), Tensor::from({4, 2}, leaves),
                   LeafNormalization::l1);
}

Tensor zero_latent() { return Tensor::zeros({1, 1, 1, 1}); }

}  // namespace

TEST(Topology, FullTreeCountsAndPreorder) {
  for (std::size_t h = 1; h <= 6; ++h) {
    const auto t = TreeTopology::full(h);
    EXPECT_EQ(t.num_leaves(), std::size_t{1} << h);
    EXPECT_EQ(t.num_internal(), (std::size_t{1} << h) - 1);
    EXPECT_EQ(t.height(), h);
  }
  const auto t = TreeTopology::full(2);
  // Pre-order: root, left internal, two leaves, right internal, two leaves.
  EXPECT_EQ(t.node(0).prototype, 0);
  EXPECT_EQ(t.node(1).prototype, 1);
  EXPECT_EQ(t.node(2).leaf, 0);
  EXPECT_EQ(t.node(3).leaf, 1);
  EXPECT_EQ(t.node(4).prototype, 2);
  EXPECT_EQ(t.node(6).leaf, 3);
  EXPECT_EQ(t.path_to_leaf(2), (std::vector<std::size_t>{0, 4, 5}));
  EXPECT_EQ(t.leaves_under(4), (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(t.depth(5), 2u);
}

TEST(Topology, FromNodesRejectsMalformedTrees) {
  auto nodes = TreeTopology::full(1).nodes();
  EXPECT_NO_THROW(TreeTopology::from_nodes(nodes, 0));
  auto broken = nodes;
  broken[0].right = kNone;
  EXPECT_ANY_THROW(TreeTopology::from_nodes(broken, 0));
  auto duplicate = nodes;
  duplicate[2].leaf = 0;
  EXPECT_ANY_THROW(TreeTopology::from_nodes(duplicate, 0));
}

TEST(Routing, HandComputedPathProbabilities) {
  const auto tree = hand_tree();
  const auto fw = tree.forward(zero_latent());
  const std::vector<Real> expected{0.2f, 0.2f, 0.45f, 0.15f};
  for (std::size_t l = 0; l < 4; ++l) EXPECT_NEAR(fw.path_prob.at({0, l}), expected[l], 1e-6);
  EXPECT_NEAR(fw.prediction.at({0, 0}), 0.65, 1e-6);
  EXPECT_NEAR(fw.prediction.at({0, 1}), 0.35, 1e-6);
}

TEST(Routing, HandComputedLoss) {
  const auto tree = hand_tree();
  const auto fw = tree.forward(zero_latent());
  const std::vector<std::size_t> label{1};
  EXPECT_NEAR(cross_entropy_loss(fw.prediction, label).item(), -std::log(0.35), 1e-6);
  EXPECT_NEAR(tree_nll_loss(fw.path_prob, tree.leaf_log_distributions(), label).item(), -std::log(0.35), 1e-6);
}

TEST(Routing, UniformLeavesGiveLogKLoss) {
  auto tree = ProtoTree::init(3, 4, 5, 1);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<Real> z(2 * 5 * 3 * 3);
  for (auto& v : z) v = u(rng);
  const auto fw = tree.forward(Tensor::from({2, 5, 3, 3}, z));
  const std::vector<std::size_t> labels{0, 3};
  EXPECT_NEAR(cross_entropy_loss(fw.prediction, labels).item(), std::log(4.0), 1e-5);
}

TEST(Routing, RouteValuesSumToOne) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (std::size_t h = 1; h <= 6; ++h) {
    const auto topo = TreeTopology::full(h);
    for (int s = 0; s < 50; ++s) {
      std::vector<Real> p(topo.num_internal());
      for (auto& v : p) v = static_cast<Real>(u(rng));
      double total = 0;
      for (Real v : route_values(topo, p)) total += v;
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
}

TEST(Routing, EdgeProbabilityIsExpNegDistance) {
  EXPECT_FLOAT_EQ(edge_probability(0), 1);
  EXPECT_NEAR(edge_probability(2), std::exp(-2.0), 1e-7);
}

TEST(Patches, NearestPatchMatchesExhaustiveSearch) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0, 1);
  const std::size_t d = 3, h = 4, w = 5;
  std::vector<Real> z(d * h * w), proto(d);
  for (auto& v : z) v = u(rng);
  for (auto& v : proto) v = u(rng);
  const LatentView view{z, d, h, w};
  const auto got = nearest_patch(view, proto);
  double best = INFINITY;
  PatchLocation at;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double sq = 0;
      for (std::size_t c = 0; c < d; ++c) sq += std::pow(view.at(c, i, j) - proto[c], 2);
      if (std::sqrt(sq) < best) best = std::sqrt(sq), at = {i, j};
    }
  EXPECT_EQ(got.location, at);
  EXPECT_NEAR(got.distance, best, 1e-6);
  EXPECT_NEAR(patch_distance(view, at, proto), best, 1e-6);
}

TEST(Patches, TiesGoToFirstRowMajorPatch) {
  std::vector<Real> z(1 * 2 * 2, Real(0.5));
  const std::vector<Real> proto{0.5};
  const auto got = nearest_patch(LatentView{z, 1, 2, 2}, proto);
  EXPECT_EQ(got.location, (PatchLocation{0, 0}));
  z[0] = 0.9f;
  EXPECT_EQ(nearest_patch(LatentView{z, 1, 2, 2}, proto).location, (PatchLocation{0, 1}));
}

TEST(Patches, ForwardArgminAgreesWithNearestPatch) {
  auto tree = ProtoTree::init(2, 3, 4, 5);
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> u(0, 1);
  std::vector<Real> z(2 * 4 * 3 * 3);
  for (auto& v : z) v = u(rng);
  const Tensor latents = Tensor::from({2, 4, 3, 3}, z);
  const auto fw = tree.forward(latents);
  for (std::size_t n = 0; n < 2; ++n) {
    const auto trace = fw.trace(n);
    for (std::size_t p = 0; p < 3; ++p) {
      const auto row = tree.prototypes().values().subspan(p * 4, 4);
      const auto np = nearest_patch(LatentView::of(latents, n), row);
      EXPECT_EQ(trace.location[p], np.location);
      EXPECT_NEAR(trace.p_right[p], std::exp(-np.distance), 1e-6);
    }
  }
}

TEST(Leaves, SoftmaxAndL1Normalisation) {
  const std::vector<Real> logits{0, std::log(Real(3))};
  const auto s = normalize_leaf(logits, LeafNormalization::softmax);
  EXPECT_NEAR(s[0], 0.25, 1e-6);
  EXPECT_NEAR(s[1], 0.75, 1e-6);
  const std::vector<Real> counts{1, 3};
  const auto l1 = normalize_leaf(counts, LeafNormalization::l1);
  EXPECT_NEAR(l1[1], 0.75, 1e-6);
  const std::vector<Real> zeros{0, 0};
  EXPECT_NEAR(normalize_leaf(zeros, LeafNormalization::l1)[0], 0.5, 1e-6);
  const auto logs = log_normalize_leaf(logits, LeafNormalization::softmax);
  EXPECT_NEAR(logs[1], std::log(0.75), 1e-6);
}

TEST(Leaves, LogDistributionsStayFiniteWhenSaturated) {
  ProtoTree tree(TreeTopology::full(1), Tensor::from({1, 1}, {0.5f}, true), Tensor::from({2, 2}, {200, 0, 0, 0}));
  const auto logs = tree.leaf_log_distributions();
  EXPECT_TRUE(std::isfinite(logs[1]));
  EXPECT_NEAR(logs[1], -200.0, 1e-3);
}

TEST(Leaves, LeafParametersRejectGradients) {
  EXPECT_THROW(ProtoTree(TreeTopology::full(1), Tensor::zeros({1, 2}, true), Tensor::zeros({2, 3}, true)),
               std::invalid_argument);
  EXPECT_THROW(ProtoTree(TreeTopology::full(1), Tensor::zeros({2, 2}, true), Tensor::zeros({2, 3})),
               std::invalid_argument);
}

TEST(Leaves, InitIsUniformAndPrototypesNearHalf) {
  const auto tree = ProtoTree::init(4, 5, 16, 7);
  for (std::size_t l = 0; l < 16; ++l) {
    for (Real p : tree.leaf_distribution(l)) EXPECT_NEAR(p, 0.2, 1e-6);
  }
  double mean = 0;
  for (Real v : tree.prototypes().values()) mean += v;
  mean /= static_cast<double>(tree.prototypes().numel());
  EXPECT_NEAR(mean, 0.5, 0.02);
}

TEST(Checkpointing, TreeRoundTripIsExact) {
  const auto tree = ProtoTree::init(3, 4, 6, 8);
  Checkpoint ckpt;
  tree.save(ckpt);
  const auto back = ProtoTree::load(Checkpoint::from_bytes(ckpt.to_bytes()));
  EXPECT_EQ(back.topology(), tree.topology());
  EXPECT_TRUE(std::equal(back.prototypes().values().begin(), back.prototypes().values().end(),
                         tree.prototypes().values().begin()));
  EXPECT_EQ(back.normalization(), tree.normalization());
}
