#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "nptt/model.hpp"
#include "nptt/ops.hpp"
#include "nptt/trainer.hpp"
#include "toy.hpp"

using namespace nptt;

namespace {

Dataset tiny_dataset(std::size_t n, std::size_t side, std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0, 1);
  Dataset d;
  d.side = side;
  for (std::size_t k = 0; k < classes; ++k) d.class_names.push_back("c" + std::to_string(k));
  for (std::size_t i = 0; i < n; ++i) {
    Image im(3, side, side);
    for (auto& p : im.pixels) p = u(rng);
    d.images.push_back(std::move(im));
    d.labels.push_back(i % classes);
  }
  return d;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.height = 3;
  c.backbone.input_side = 8;
  c.backbone.stages = parse_stages("4:3:2,6:3:2");
  c.backbone.latent_depth = 4;
  return c;
}

// Full-dataset leaf update evaluated with double accumulation, given the
// path probabilities of every sample.
std::vector<double> two_pass(const ProtoTree& tree, const Inference& inf, std::span<const std::size_t> labels) {
  const std::size_t L = inf.leaves, K = inf.classes;
  std::vector<double> dist(L * K);
  for (std::size_t l = 0; l < L; ++l) {
    const auto row = tree.leaf_distribution(l);
    std::copy(row.begin(), row.end(), dist.begin() + static_cast<long>(l * K));
  }
  std::vector<double> out(L * K, 0);
  for (std::size_t n = 0; n < inf.count; ++n) {
    const auto pi = inf.path_prob_of(n);
    const std::size_t y = labels[n];
    double yhat = 0;
    for (std::size_t l = 0; l < L; ++l) yhat += pi[l] * dist[l * K + y];
    for (std::size_t l = 0; l < L; ++l) out[l * K + y] += dist[l * K + y] * pi[l] / yhat;
  }
  return out;
}

}  // namespace

TEST(Config, ParsesKeyValuesAndRejectsUnknownKeys) {
  const auto kv = parse_key_values("# comment\nheight = 5\n\nstages=8:3:2\nmilestones = 10, 20\n");
  TrainConfig c;
  apply_config(kv, c);
  EXPECT_EQ(c.height, 5u);
  EXPECT_EQ(c.backbone.stages.size(), 1u);
  EXPECT_EQ(c.milestones, (std::vector<std::size_t>{10, 20}));
  EXPECT_THROW(apply_config({{"bogus", "1"}}, c), TrainError);
  EXPECT_THROW(apply_config({{"height", "two"}}, c), TrainError);
  EXPECT_THROW(apply_config({{"leaf_normalization", "max"}}, c), TrainError);
  EXPECT_ANY_THROW(parse_key_values("no equals sign\n"));
}

TEST(Config, FormatRoundTrips) {
  TrainConfig c = toy::config(9);
  c.milestones = {5, 7};
  c.leaf_normalization = LeafNormalization::l1;
  TrainConfig back;
  apply_config(parse_key_values(format_config(c)), back);
  EXPECT_EQ(format_config(back), format_config(c));
  EXPECT_EQ(back.backbone, c.backbone);
  EXPECT_EQ(back.seed, 9u);
}

TEST(Config, ValidationAndDecay) {
  TrainConfig c;
  c.milestones = {10, 20};
  c.gamma = 0.5;
  EXPECT_DOUBLE_EQ(c.decay_factor(10), 1.0);
  EXPECT_DOUBLE_EQ(c.decay_factor(11), 0.5);
  EXPECT_DOUBLE_EQ(c.decay_factor(21), 0.25);
  c.milestones = {20, 10};
  EXPECT_THROW(c.validate(), TrainError);
  TrainConfig d;
  d.lr_body = -1;
  EXPECT_THROW(d.validate(), TrainError);
  TrainConfig e;
  e.epochs = 0;
  EXPECT_THROW(e.validate(), TrainError);
}

TEST(Loss, CrossEntropyOfOneHot) {
  const std::vector<Real> pred{0.65f, 0.35f};
  const std::vector<Real> target{0, 1};
  EXPECT_NEAR(cross_entropy(pred, target), -std::log(0.35), 1e-6);
  const std::vector<Real> not_one_hot{0.5f, 0.5f};
  EXPECT_THROW(cross_entropy(pred, not_one_hot), TrainError);
}

TEST(Loss, LogSpaceLossMatchesDirectLoss) {
  const auto model = ProtoTreeModel::create(tiny_config().backbone, 3, 3, 4);
  auto tree = model.tree.clone();
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0, 3);
  for (auto& v : tree.leaf_logits().values()) v = u(rng);
  const auto data = tiny_dataset(6, 8, 3, 6);
  const auto fw = tree.forward(model.backbone.forward(stack_images(data.images)));
  const double direct = cross_entropy_loss(fw.prediction, data.labels).item();
  const double logspace = tree_nll_loss(fw.path_prob, tree.leaf_log_distributions(), data.labels).item();
  EXPECT_NEAR(logspace, direct, 1e-5);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor p = Tensor::from({2}, {1.0f, -1.0f}, true);
  Adam opt({{{p}, 0.1}}, 0.9, 0.999, 1e-8);
  opt.zero_grad();
  sum(mul(p, Tensor::from({2}, {3.0f, -0.5f}))).backward();
  opt.step();
  // Bias-corrected first step is lr * sign(g).
  EXPECT_NEAR(p.values()[0], 0.9, 1e-6);
  EXPECT_NEAR(p.values()[1], -0.9, 1e-6);
  opt.zero_grad();
  EXPECT_EQ(p.grad()[0], 0);
}

TEST(Adam, ZeroLearningRateFreezesGroup) {
  Tensor a = Tensor::from({1}, {1.0f}, true);
  Tensor b = Tensor::from({1}, {1.0f}, true);
  Adam opt({{{a}, 0.0}, {{b}, 0.1}}, 0.9, 0.999, 1e-8);
  sum(add(a, b)).backward();
  opt.step();
  EXPECT_EQ(a.values()[0], 1.0f);
  EXPECT_NE(b.values()[0], 1.0f);
}

TEST(Shuffle, PermutationIsDeterministicAndComplete) {
  const auto a = epoch_permutation(50, 3, 2);
  const auto b = epoch_permutation(50, 3, 2);
  const auto c = epoch_permutation(50, 3, 3);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(LeafUpdate, InterleavedBatchesMatchTwoPassOracle) {
  const auto data = tiny_dataset(10, 8, 3, 7);
  auto base = ProtoTreeModel::create(tiny_config().backbone, 3, 3, 8);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(0, 2);
  for (auto& v : base.tree.leaf_logits().values()) v = u(rng);
  const auto oracle = two_pass(base.tree, infer(base, data), data.labels);
  for (std::size_t batches : {1, 2, 5}) {
    auto model = base.clone();
    TrainConfig c = tiny_config();
    c.batch_size = data.size() / batches;
    c.lr_body = c.lr_head = c.lr_prototypes = 0;
    auto opt = make_optimizer(model, c);
    train_epoch(model, opt, data, c, 1);
    const auto got = model.tree.leaf_logits().values();
    for (std::size_t i = 0; i < oracle.size(); ++i) {
      EXPECT_NEAR(got[i], oracle[i], 1e-5 * std::max(1.0, std::abs(oracle[i]))) << "B=" << batches << " i=" << i;
    }
  }
}

TEST(LeafUpdate, AccumulatorTelescopesSnapshot) {
  auto tree = ProtoTree::init(2, 2, 3, 1);
  for (auto& v : tree.leaf_logits().values()) v = 1.5f;
  EpochLeafAccumulator acc;
  acc.begin(tree, 3);
  const std::vector<Real> pi{0.25f, 0.25f, 0.25f, 0.25f};
  const std::vector<std::size_t> label{1};
  for (int b = 0; b < 3; ++b) acc.update_batch(pi, label);
  EXPECT_EQ(acc.batches_seen(), 3u);
  // After B batches the snapshot has been fully subtracted: only sample shares remain.
  for (std::size_t l = 0; l < 4; ++l) {
    EXPECT_NEAR(acc.running()[l * 2 + 0], 0.0, 1e-12);
    EXPECT_NEAR(acc.running()[l * 2 + 1], 3 * 0.25, 1e-9);
  }
  acc.commit(tree);
  EXPECT_NEAR(tree.leaf_logits().at({0, 1}), 0.75, 1e-6);
}

TEST(LeafUpdate, MassSurvivesUnderflowingLeaves) {
  // Class 1 has probability ~e^-200 in every leaf; the update must still give it mass.
  auto tree = ProtoTree::init(1, 2, 3, 1);
  tree.leaf_logits().values()[0] = 200;
  tree.leaf_logits().values()[2] = 200;
  EpochLeafAccumulator acc;
  acc.begin(tree, 1);
  const std::vector<Real> pi{0.7f, 0.3f};
  const std::vector<std::size_t> label{1};
  acc.update_batch(pi, label);
  EXPECT_NEAR(acc.running()[1], 0.7, 1e-6);
  EXPECT_NEAR(acc.running()[3], 0.3, 1e-6);
}

TEST(Training, FrozenEpochsKeepBodyFixed) {
  const auto data = tiny_dataset(8, 8, 2, 10);
  TrainConfig c = tiny_config();
  c.frozen_epochs = 1;
  auto model = ProtoTreeModel::create(c.backbone, c.height, 2, 1);
  const auto before = model.backbone.body_parameters()[0].clone();
  auto opt = make_optimizer(model, c);
  train_epoch(model, opt, data, c, 1);
  const auto after = model.backbone.body_parameters()[0];
  EXPECT_TRUE(std::equal(before.values().begin(), before.values().end(), after.values().begin()));
  train_epoch(model, opt, data, c, 2);
  EXPECT_FALSE(std::equal(before.values().begin(), before.values().end(), after.values().begin()));
}

TEST(Training, RejectsMismatchedData) {
  auto data = tiny_dataset(4, 8, 2, 11);
  TrainConfig c = tiny_config();
  c.backbone.input_side = 16;
  EXPECT_THROW(train(data, nullptr, c), TrainError);
}

TEST(Training, IdenticalSeedsGiveIdenticalCheckpointsAndMetrics) {
  const auto [train_set, test_set] = gen_synthetic(toy::data_options());
  TrainConfig c = toy::config(4);
  c.epochs = 2;
  c.augment.enabled = true;
  std::string csv[2], bytes[2];
  std::vector<std::vector<Real>> shift;
  for (int run = 0; run < 2; ++run) {
    // Odd-sized allocations between runs move later buffers to other alignments.
    for (std::size_t i = 1; i < 200; ++i) shift.emplace_back(i * 3);
    const auto r = train(train_set, &test_set, c);
    for (const auto& m : r.history) csv[run] += metrics_csv_row(m) + "\n";
    bytes[run] = r.model.to_checkpoint().to_bytes();
  }
  EXPECT_EQ(csv[0], csv[1]);
  EXPECT_EQ(bytes[0], bytes[1]);
}

TEST(Training, ToyTaskReachesHighTrainAccuracy) {
  const auto [train_set, test_set] = gen_synthetic(toy::data_options());
  const auto r = train(train_set, nullptr, toy::config());
  EXPECT_GT(r.history.back().train_accuracy, 0.95);
}
