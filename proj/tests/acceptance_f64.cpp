#include "acceptance_f64.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <random>

#include "nptt/gradcheck.hpp"
#include "nptt/model.hpp"
#include "nptt/trainer.hpp"

namespace acceptance64 {
namespace {

using namespace nptt;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, double a, double b = 0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, format, a, b);
  return buf;
}

std::vector<Image> random_images(std::size_t n, std::size_t side, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0, 1);
  std::vector<Image> out;
  for (std::size_t i = 0; i < n; ++i) {
    Image im(3, side, side);
    for (auto& p : im.pixels) p = unit(rng);
    out.push_back(std::move(im));
  }
  return out;
}

BackboneConfig two_stage(std::size_t side) {
  BackboneConfig bb;
  bb.input_side = side;
  bb.stages = {{8, 3, 2}, {8, 3, 2}};
  bb.latent_depth = 6;
  return bb;
}

}  // namespace

Outcome gradient_check() {
  const auto start = Clock::now();
  std::mt19937_64 rng(1);
  auto model = ProtoTreeModel::create(two_stage(8), 2, 3, 7);
  // Non-uniform leaves so the loss depends on every routing decision.
  std::uniform_real_distribution<double> u(0, 2);
  for (auto& v : model.tree.leaf_logits().values()) v = u(rng);
  const auto images = random_images(6, 8, rng);
  const std::vector<std::size_t> labels{0, 1, 2, 0, 1, 2};
  const Tensor batch = stack_images(images);

  std::vector<Tensor> params = model.backbone.body_parameters();
  for (const auto& h : model.backbone.head_parameters()) params.push_back(h);
  params.push_back(model.tree.prototypes());
  const auto r = check_gradients([&] { return cross_entropy_loss(model.forward(batch).prediction, labels); }, params,
                                 1e-5);
  Outcome o;
  o.seconds = seconds_since(start);
  o.pass = r.max_rel_error < 1e-4 && r.untouched.empty() && o.seconds < 10;
  o.detail = std::to_string(r.checked) + " entries in " + std::to_string(params.size()) +
             " tensors, max rel error " + fmt("%.3g", r.max_rel_error) + fmt(", %.2f s", o.seconds);
  return o;
}

Outcome routing_normalization() {
  const auto start = Clock::now();
  std::mt19937_64 rng(2);
  double worst_pi = 0, worst_y = 0;
  std::size_t total = 0;
  for (std::size_t h = 1; h <= 6; ++h) {
    auto model = ProtoTreeModel::create(two_stage(8), h, 5, 10 + h);
    std::uniform_real_distribution<double> u(-3, 3);
    for (auto& v : model.tree.leaf_logits().values()) v = u(rng);
    const std::size_t count = 1000 / 6 + (h <= 1000 % 6 ? 1 : 0);
    const auto images = random_images(count, 8, rng);
    const Inference inf = infer(model, images);
    for (std::size_t n = 0; n < count; ++n) {
      double spi = 0, sy = 0;
      for (double v : inf.path_prob_of(n)) spi += v;
      for (double v : inf.prediction_of(n)) sy += v;
      worst_pi = std::max(worst_pi, std::abs(spi - 1));
      worst_y = std::max(worst_y, std::abs(sy - 1));
    }
    total += count;
  }
  Outcome o;
  o.seconds = seconds_since(start);
  o.pass = total == 1000 && worst_pi <= 1e-6 && worst_y <= 1e-6;
  o.detail = std::to_string(total) + " inputs, heights 1-6, max |sum pi - 1| " + fmt("%.3g", worst_pi) +
             ", max |sum yhat - 1| " + fmt("%.3g", worst_y);
  return o;
}

Outcome leaf_update_oracle() {
  const auto start = Clock::now();
  std::mt19937_64 rng(3);
  const std::size_t n = 20, k = 3;
  Dataset data;
  data.side = 8;
  data.images = random_images(n, 8, rng);
  for (std::size_t i = 0; i < n; ++i) data.labels.push_back(i % k);
  data.class_names = {"a", "b", "c"};
  auto base = ProtoTreeModel::create(two_stage(8), 3, k, 5);
  std::uniform_real_distribution<double> u(0, 3);
  for (auto& v : base.tree.leaf_logits().values()) v = u(rng);

  // Two passes: path probabilities of the whole set first, then the update.
  const auto& topo = base.tree.topology();
  const std::size_t leaves = topo.num_leaves();
  std::vector<std::vector<double>> dist(leaves);
  for (std::size_t l = 0; l < leaves; ++l) {
    const auto row = base.tree.leaf_distribution(l);
    dist[l].assign(row.begin(), row.end());
  }
  const Tensor z = compute_latents(base.backbone, data.images);
  std::vector<std::vector<double>> pi(n, std::vector<double>(leaves, 1.0));
  for (std::size_t s = 0; s < n; ++s) {
    const auto view = LatentView::of(z, s);
    std::vector<double> p_right(topo.num_internal());
    for (std::size_t p = 0; p < p_right.size(); ++p) {
      double best = INFINITY;
      for (std::size_t i = 0; i < view.height; ++i)
        for (std::size_t j = 0; j < view.width; ++j) {
          double sq = 0;
          for (std::size_t c = 0; c < view.depth; ++c) {
            const double diff = view.at(c, i, j) - base.tree.prototypes().values()[p * view.depth + c];
            sq += diff * diff;
          }
          best = std::min(best, std::sqrt(sq));
        }
      p_right[p] = std::exp(-best);
    }
    for (std::size_t l = 0; l < leaves; ++l) {
      const auto path = topo.path_to_leaf(l);
      for (std::size_t d = 0; d + 1 < path.size(); ++d) {
        const auto& node = topo.node(path[d]);
        const double pr = p_right[static_cast<std::size_t>(node.prototype)];
        pi[s][l] *= node.right == static_cast<int>(path[d + 1]) ? pr : 1 - pr;
      }
    }
  }
  std::vector<double> oracle(leaves * k, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t y = data.labels[s];
    double yhat = 0;
    for (std::size_t l = 0; l < leaves; ++l) yhat += pi[s][l] * dist[l][y];
    for (std::size_t l = 0; l < leaves; ++l) oracle[l * k + y] += dist[l][y] * pi[s][l] / yhat;
  }

  double worst = 0;
  for (std::size_t batches : {1, 2, 5}) {
    auto model = base.clone();
    TrainConfig cfg;
    cfg.height = 3;
    cfg.backbone = model.backbone.config();
    cfg.batch_size = n / batches;
    cfg.lr_body = cfg.lr_head = cfg.lr_prototypes = 0;
    auto opt = make_optimizer(model, cfg);
    train_epoch(model, opt, data, cfg, 1);
    const auto got = model.tree.leaf_logits().values();
    for (std::size_t i = 0; i < oracle.size(); ++i) worst = std::max(worst, std::abs(got[i] - oracle[i]));
  }
  Outcome o;
  o.seconds = seconds_since(start);
  o.pass = worst <= 1e-6 && o.seconds < 30;
  o.detail = "B in {1, 2, 5}, " + std::to_string(leaves) + " leaves x " + std::to_string(k) +
             " classes, max abs diff " + fmt("%.3g", worst) + fmt(", %.2f s", o.seconds);
  return o;
}

}  // namespace acceptance64
