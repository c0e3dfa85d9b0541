#include "selftest.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "nptt/checkpoint.hpp"
#include "nptt/gradcheck.hpp"
#include "nptt/model.hpp"
#include "nptt/ops.hpp"
#include "nptt/prototree.hpp"
#include "nptt/trainer.hpp"

namespace nptt_selftest {
namespace {

using namespace nptt;

struct Reporter {
  std::ostream& out;
  int failures = 0;

  void report(const std::string& name, bool ok, const std::string& detail) {
    out << (ok ? "PASS " : "FAIL ") << name << ": " << detail << "\n";
    if (!ok) ++failures;
  }
};

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

std::vector<Image> random_images(std::size_t n, std::size_t side, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0, 1);
  std::vector<Image> images;
  for (std::size_t i = 0; i < n; ++i) {
    Image img(3, side, side);
    for (auto& p : img.pixels) p = unit(rng);
    images.push_back(std::move(img));
  }
  return images;
}

void randomize_leaves(ProtoTree& tree, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 2);
  for (auto& v : tree.leaf_logits().values()) v = u(rng);
}

BackboneConfig small_backbone(std::size_t side) {
  BackboneConfig cfg;
  cfg.stages = {{6, 3, 2}, {8, 3, 2}};
  cfg.latent_depth = 5;
  cfg.input_side = side;
  return cfg;
}

void check_gradients_small_tree(Reporter& r) {
  std::mt19937_64 rng(11);
  auto model = ProtoTreeModel::create(small_backbone(8), 2, 3, 5);
  randomize_leaves(model.tree, rng);
  const auto images = random_images(4, 8, rng);
  const std::vector<std::size_t> labels{0, 1, 2, 1};
  const Tensor batch = stack_images(images);

  std::vector<Tensor> params = model.backbone.body_parameters();
  for (const auto& h : model.backbone.head_parameters()) params.push_back(h);
  params.push_back(model.tree.prototypes());

  const auto ce = check_gradients(
      [&] { return cross_entropy_loss(model.forward(batch).prediction, labels); }, params);
  r.report("gradient cross-entropy", ce.max_rel_error < 1e-4 && ce.untouched.empty(),
           std::to_string(ce.checked) + " entries, max rel error " + fmt("%.3g", ce.max_rel_error));

  const auto leaf_log = model.tree.leaf_log_distributions();
  const auto nll = check_gradients(
      [&] { return tree_nll_loss(model.forward(batch).path_prob, leaf_log, labels); }, params);
  r.report("gradient log-space loss", nll.max_rel_error < 1e-4 && nll.untouched.empty(),
           std::to_string(nll.checked) + " entries, max rel error " + fmt("%.3g", nll.max_rel_error));
}

void check_conv(Reporter& r) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g(0, 1);
  const std::size_t n = 2, c = 3, h = 7, w = 6, f = 4, k = 3, stride = 2, pad = 1;
  std::vector<double> in(n * c * h * w), ker(f * c * k * k), bias(f);
  for (auto& v : in) v = g(rng);
  for (auto& v : ker) v = g(rng);
  for (auto& v : bias) v = g(rng);
  const Tensor out = conv2d(Tensor::from({n, c, h, w}, in), Tensor::from({f, c, k, k}, ker), Tensor::from({f}, bias),
                            stride, pad);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (w + 2 * pad - k) / stride + 1;
  double worst = out.shape() == Shape{n, f, oh, ow} ? 0 : 1e9;
  for (std::size_t b = 0; b < n && worst < 1; ++b)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          double acc = bias[o];
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t dy = 0; dy < k; ++dy)
              for (std::size_t dx = 0; dx < k; ++dx) {
                const long iy = static_cast<long>(y * stride + dy) - static_cast<long>(pad);
                const long ix = static_cast<long>(x * stride + dx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
                acc += in[((b * c + ci) * h + iy) * w + ix] * ker[((o * c + ci) * k + dy) * k + dx];
              }
          worst = std::max(worst, std::abs(acc - out.at({b, o, y, x})));
        }
  r.report("conv2d matches direct loop", worst < 1e-12, "max abs diff " + fmt("%.3g", worst));
}

void check_softmax(Reporter& r) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g(0, 30);
  const std::size_t rows = 50, cols = 9;
  std::vector<double> x(rows * cols);
  for (auto& v : x) v = g(rng);
  const Tensor s = softmax(Tensor::from({rows, cols}, x));
  double worst = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    long double m = x[i * cols];
    for (std::size_t j = 1; j < cols; ++j) m = std::max<long double>(m, x[i * cols + j]);
    long double z = 0;
    for (std::size_t j = 0; j < cols; ++j) z += std::exp(static_cast<long double>(x[i * cols + j]) - m);
    double row = 0;
    for (std::size_t j = 0; j < cols; ++j) {
      const long double ref = std::exp(static_cast<long double>(x[i * cols + j]) - m) / z;
      worst = std::max(worst, static_cast<double>(std::abs(ref - s.values()[i * cols + j])));
      row += s.values()[i * cols + j];
    }
    worst = std::max(worst, std::abs(row - 1));
  }
  r.report("softmax matches extended precision", worst < 1e-12, "max abs diff " + fmt("%.3g", worst));
}

void check_routing(Reporter& r) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(0, 1);
  double worst_pi = 0, worst_y = 0;
  std::size_t samples = 0;
  for (std::size_t h = 1; h <= 6; ++h) {
    auto tree = ProtoTree::init(h, 4, 3, h);
    randomize_leaves(tree, rng);
    const auto dist = tree.leaf_distributions();
    const std::size_t count = 1000 / 6 + (h <= 1000 % 6 ? 1 : 0);
    for (std::size_t s = 0; s < count; ++s, ++samples) {
      std::vector<double> p(tree.topology().num_internal());
      for (auto& v : p) v = unit(rng);
      const auto pi = route_values(tree.topology(), p);
      double total = 0;
      std::vector<double> y(4, 0);
      for (std::size_t l = 0; l < pi.size(); ++l) {
        total += pi[l];
        for (std::size_t k = 0; k < 4; ++k) y[k] += pi[l] * dist.values()[l * 4 + k];
      }
      worst_pi = std::max(worst_pi, std::abs(total - 1));
      worst_y = std::max(worst_y, std::abs(y[0] + y[1] + y[2] + y[3] - 1));
    }
  }
  r.report("routing normalisation", worst_pi <= 1e-6 && worst_y <= 1e-6,
           std::to_string(samples) + " samples, max |sum pi - 1| " + fmt("%.3g", worst_pi) + ", max |sum yhat - 1| " +
               fmt("%.3g", worst_y));
}

// Full-dataset leaf update computed directly from latents, without the tape.
std::vector<double> two_pass_leaves(const ProtoTreeModel& model, const Dataset& data) {
  const auto& topo = model.tree.topology();
  const std::size_t leaves = topo.num_leaves(), k = model.num_classes();
  const auto dist = model.tree.leaf_distributions();
  const Tensor z = model.backbone.forward(stack_images(data.images));
  const std::size_t d = z.dim(1), hw = z.dim(2) * z.dim(3);
  const auto proto = model.tree.prototypes().values();
  std::vector<double> out(leaves * k, 0);
  for (std::size_t n = 0; n < data.size(); ++n) {
    std::vector<double> p_right(topo.num_internal());
    for (std::size_t p = 0; p < p_right.size(); ++p) {
      double best = INFINITY;
      for (std::size_t c = 0; c < hw; ++c) {
        double sq = 0;
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = z.values()[(n * d + j) * hw + c] - proto[p * d + j];
          sq += diff * diff;
        }
        best = std::min(best, std::sqrt(sq));
      }
      p_right[p] = std::exp(-best);
    }
    std::vector<double> pi(leaves, 1);
    for (std::size_t l = 0; l < leaves; ++l) {
      const auto path = topo.path_to_leaf(l);
      for (std::size_t s = 0; s + 1 < path.size(); ++s) {
        const auto& node = topo.node(path[s]);
        const double pr = p_right[node.prototype];
        pi[l] *= node.right == static_cast<int>(path[s + 1]) ? pr : 1 - pr;
      }
    }
    const std::size_t y = data.labels[n];
    double yhat = 0;
    for (std::size_t l = 0; l < leaves; ++l) yhat += pi[l] * dist.values()[l * k + y];
    for (std::size_t l = 0; l < leaves; ++l) out[l * k + y] += dist.values()[l * k + y] * pi[l] / yhat;
  }
  return out;
}

void check_leaf_update(Reporter& r) {
  std::mt19937_64 rng(6);
  auto base = ProtoTreeModel::create(small_backbone(8), 3, 3, 9);
  randomize_leaves(base.tree, rng);
  Dataset data;
  data.side = 8;
  data.images = random_images(10, 8, rng);
  for (std::size_t i = 0; i < 10; ++i) data.labels.push_back(i % 3);
  data.class_names = {"a", "b", "c"};

  const auto oracle = two_pass_leaves(base, data);
  for (std::size_t batches : {1, 2, 5}) {
    auto model = base.clone();
    TrainConfig cfg;
    cfg.height = 3;
    cfg.backbone = model.backbone.config();
    cfg.epochs = 1;
    cfg.batch_size = (data.size() + batches - 1) / batches;
    cfg.lr_body = cfg.lr_head = cfg.lr_prototypes = 0;
    auto opt = make_optimizer(model, cfg);
    train_epoch(model, opt, data, cfg, 1);
    double worst = 0;
    const auto got = model.tree.leaf_logits().values();
    for (std::size_t i = 0; i < oracle.size(); ++i) worst = std::max(worst, std::abs(got[i] - oracle[i]));
    r.report("leaf update B=" + std::to_string(batches), worst <= 1e-6, "max abs diff " + fmt("%.3g", worst));
  }
}

void check_checkpoint(Reporter& r) {
  const auto model = ProtoTreeModel::create(small_backbone(8), 2, 3, 21);
  const std::string bytes = model.to_checkpoint().to_bytes();
  const auto back = ProtoTreeModel::load(Checkpoint::from_bytes(bytes));
  r.report("checkpoint round trip", back.to_checkpoint().to_bytes() == bytes,
           std::to_string(bytes.size()) + " bytes");
}

}  // namespace

int run(std::ostream& out) {
  Reporter r{out};
  const std::vector<std::function<void(Reporter&)>> checks{check_gradients_small_tree, check_conv, check_softmax,
                                                           check_routing, check_leaf_update, check_checkpoint};
  for (const auto& check : checks) {
    try {
      check(r);
    } catch (const std::exception& e) {
      r.report("exception", false, e.what());
    }
  }
  return r.failures;
}

}  // namespace nptt_selftest
