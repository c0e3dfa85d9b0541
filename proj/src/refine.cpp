#include "nptt/refine.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

NPTT_NAMESPACE_BEGIN

// ---- Pruning ----------------------------------------------------------------

double default_prune_threshold(std::size_t num_classes) {
  if (num_classes == 0) throw RefineError("number of classes must be positive");
  return std::max(0.01, 1.2 / static_cast<double>(num_classes));
}

PruneResult prune_tree(const ProtoTree& tree, double tau) {
  if (!std::isfinite(tau)) throw RefineError("pruning threshold must be finite");
  const TreeTopology& topo = tree.topology();
  const std::size_t k = tree.num_classes();

  std::vector<bool> keep_leaf(topo.num_leaves());
  for (std::size_t l = 0; l < topo.num_leaves(); ++l) {
    const auto dist = tree.leaf_distribution(l);
    keep_leaf[l] = static_cast<double>(*std::max_element(dist.begin(), dist.end())) > tau;
  }
  if (std::none_of(keep_leaf.begin(), keep_leaf.end(), [](bool b) { return b; })) {
    throw RefineError("pruning with tau " + std::to_string(tau) + " would remove every leaf");
  }

  // Survivor of each old subtree: the subtree itself, one of its children
  // when the sibling is gone, or nothing.
  std::vector<int> survivor(topo.num_nodes(), kNone);
  std::function<int(std::size_t)> resolve = [&](std::size_t id) -> int {
    const TreeNode& n = topo.node(id);
    if (n.is_leaf()) return survivor[id] = keep_leaf[static_cast<std::size_t>(n.leaf)] ? static_cast<int>(id) : kNone;
    const int l = resolve(static_cast<std::size_t>(n.left));
    const int r = resolve(static_cast<std::size_t>(n.right));
    if (l == kNone && r == kNone) return survivor[id] = kNone;
    if (l == kNone) return survivor[id] = r;
    if (r == kNone) return survivor[id] = l;
    return survivor[id] = static_cast<int>(id);
  };
  const int new_root_old = resolve(topo.root());

  PruneResult result;
  result.prototype_map.assign(topo.num_internal(), kNone);
  result.node_map.assign(topo.num_nodes(), kNone);

  // Rebuild in pre-order from the surviving structure.
  std::vector<TreeNode> nodes;
  std::vector<Real> protos;
  std::vector<Real> leaves;
  const std::size_t depth = tree.depth();
  const auto old_protos = tree.prototypes().values();
  const auto old_leaves = tree.leaf_logits().values();
  int next_proto = 0;
  int next_leaf = 0;
  std::function<int(std::size_t, int)> emit = [&](std::size_t old_id, int parent) -> int {
    const TreeNode& n = topo.node(old_id);
    const int id = static_cast<int>(nodes.size());
    nodes.push_back({});
    nodes[static_cast<std::size_t>(id)].parent = parent;
    result.node_map[old_id] = id;
    if (n.is_leaf()) {
      nodes[static_cast<std::size_t>(id)].leaf = next_leaf++;
      const auto row = old_leaves.subspan(static_cast<std::size_t>(n.leaf) * k, k);
      leaves.insert(leaves.end(), row.begin(), row.end());
      return id;
    }
    result.prototype_map[static_cast<std::size_t>(n.prototype)] = next_proto;
    nodes[static_cast<std::size_t>(id)].prototype = next_proto++;
    const auto row = old_protos.subspan(static_cast<std::size_t>(n.prototype) * depth, depth);
    protos.insert(protos.end(), row.begin(), row.end());
    const int left = emit(static_cast<std::size_t>(survivor[static_cast<std::size_t>(n.left)]), id);
    const int right = emit(static_cast<std::size_t>(survivor[static_cast<std::size_t>(n.right)]), id);
    nodes[static_cast<std::size_t>(id)].left = left;
    nodes[static_cast<std::size_t>(id)].right = right;
    return id;
  };
  emit(static_cast<std::size_t>(new_root_old), kNone);

  const std::size_t new_internal = static_cast<std::size_t>(next_proto);
  const std::size_t new_leaves = static_cast<std::size_t>(next_leaf);
  const bool was_grad = tree.prototypes().requires_grad();
  result.tree = ProtoTree(TreeTopology::from_nodes(std::move(nodes), 0),
                          Tensor::from({new_internal, depth}, std::move(protos), was_grad),
                          Tensor::from({new_leaves, k}, std::move(leaves)), tree.normalization());

  PruneReport& rep = result.report;
  rep.tau = tau;
  rep.original_leaves = topo.num_leaves();
  rep.original_internal = topo.num_internal();
  rep.leaves_removed = rep.original_leaves - new_leaves;
  rep.internal_removed = rep.original_internal - new_internal;
  rep.fraction_pruned = static_cast<double>(rep.internal_removed) / static_cast<double>(rep.original_internal);
  rep.tau_not_above_uniform = tau <= 1.0 / static_cast<double>(k);
  return result;
}

PruneReport prune(ProtoTreeModel& model, double tau) {
  PruneResult r = prune_tree(model.tree, tau);
  if (model.projected) {
    const bool with_sources = model.projection_sources.size() == model.projection.size();
    std::vector<std::pair<ProjectionRecord, std::size_t>> kept;
    for (std::size_t i = 0; i < model.projection.size(); ++i) {
      ProjectionRecord rec = model.projection[i];
      const int p = r.prototype_map.at(rec.prototype);
      if (p == kNone) continue;
      rec.prototype = static_cast<std::size_t>(p);
      rec.node = static_cast<std::size_t>(r.node_map.at(rec.node));
      kept.emplace_back(rec, i);
    }
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.first.prototype < b.first.prototype; });
    std::vector<ProjectionRecord> records;
    std::vector<Image> sources;
    for (auto& [rec, i] : kept) {
      records.push_back(rec);
      if (with_sources) sources.push_back(std::move(model.projection_sources[i]));
    }
    model.projection = std::move(records);
    model.projection_sources = std::move(sources);
  }
  model.tree = std::move(r.tree);
  return r.report;
}

std::string prune_report_csv(const PruneReport& report) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%.6f,%zu,%zu,%zu,%zu,%.6f\n", report.tau, report.leaves_removed,
                report.internal_removed, report.original_leaves, report.original_internal, report.fraction_pruned);
  return "tau,leaves_removed,internal_removed,original_leaves,original_internal,fraction_pruned\n" +
         std::string(buf);
}

// ---- Projection -------------------------------------------------------------

std::vector<ProjectionRecord> nearest_training_patches(const ProtoTree& tree, const Tensor& latents,
                                                       std::span<const std::size_t> labels, bool constrained) {
  if (latents.rank() != 4) throw RefineError("latents must be N x D x H x W");
  const std::size_t count = latents.dim(0);
  if (count == 0) throw RefineError("projection needs at least one training image");
  if (labels.size() != count) throw RefineError("labels do not match the number of latents");
  if (latents.dim(1) != tree.depth()) throw RefineError("latent depth does not match the prototypes");

  const TreeTopology& topo = tree.topology();
  const std::size_t depth = tree.depth();
  const std::size_t protos = topo.num_internal();
  std::vector<ProjectionRecord> records(protos);

  auto search = [&](std::size_t p) {
    ProjectionRecord& rec = records[p];
    rec.prototype = p;
    rec.node = topo.node_of_prototype(p);
    rec.constrained = constrained;

    std::set<std::size_t> allowed;
    if (constrained) {
      for (std::size_t leaf : topo.leaves_under(rec.node)) allowed.insert(argmax(tree.leaf_distribution(leaf)));
    }
    auto pool_has = [&](std::size_t n) { return !constrained || allowed.count(labels[n]) > 0; };
    bool any = false;
    for (std::size_t n = 0; n < count && !any; ++n) any = pool_has(n);
    if (!any) rec.fell_back = true;

    const auto proto = tree.prototypes().values().subspan(p * depth, depth);
    bool found = false;
    for (std::size_t n = 0; n < count; ++n) {
      if (any && !pool_has(n)) continue;
      const NearestPatch near = nearest_patch(LatentView::of(latents, n), proto);
      if (!found || near.distance < rec.distance) {
        found = true;
        rec.image_index = n;
        rec.location = near.location;
        rec.distance = near.distance;
      }
    }
  };

  const std::size_t workers = std::min(worker_threads(), protos);
  if (workers <= 1) {
    for (std::size_t p = 0; p < protos; ++p) search(p);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t p = w; p < protos; p += workers) search(p);
      });
    }
    for (auto& t : pool) t.join();
  }
  return records;
}

std::vector<ProjectionRecord> project(ProtoTreeModel& model, const Dataset& train, bool constrained) {
  train.validate();
  if (train.side != model.input_side()) {
    throw RefineError("training images are " + std::to_string(train.side) + "px but the model expects " +
                      std::to_string(model.input_side()) + "px");
  }
  const Tensor latents = compute_latents(model.backbone, train.images);
  auto records = nearest_training_patches(model.tree, latents, train.labels, constrained);

  const std::size_t depth = model.tree.depth();
  auto protos = model.tree.prototypes().values();
  std::vector<Image> sources;
  for (const auto& rec : records) {
    const LatentView view = LatentView::of(latents, rec.image_index);
    for (std::size_t d = 0; d < depth; ++d) protos[rec.prototype * depth + d] = view.at(d, rec.location.i, rec.location.j);
    sources.push_back(train.images[rec.image_index]);
  }
  model.projected = true;
  model.projection = records;
  model.projection_sources = std::move(sources);
  return records;
}

double mean_projection_distance(std::span<const ProjectionRecord> records) {
  if (records.empty()) return 0;
  double total = 0;
  for (const auto& r : records) total += r.distance;
  return total / static_cast<double>(records.size());
}

std::string projection_csv(std::span<const ProjectionRecord> records) {
  std::ostringstream out;
  out << "prototype,node,image,i,j,distance,constrained,fell_back\n";
  char buf[64];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%.6f", static_cast<double>(r.distance));
    out << r.prototype << ',' << r.node << ',' << r.image_index << ',' << r.location.i << ',' << r.location.j << ','
        << buf << ',' << (r.constrained ? 1 : 0) << ',' << (r.fell_back ? 1 : 0) << '\n';
  }
  return out.str();
}

// ---- Hard inference ---------------------------------------------------------

Strategy parse_strategy(const std::string& name) {
  if (name == "soft") return Strategy::soft;
  if (name == "max_path") return Strategy::max_path;
  if (name == "greedy") return Strategy::greedy;
  throw RefineError("unknown strategy '" + name + "' (expected soft, max_path or greedy)");
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::soft:
      return "soft";
    case Strategy::max_path:
      return "max_path";
    case Strategy::greedy:
      return "greedy";
  }
  return "?";
}

HardPrediction hard_predict(const ProtoTree& tree, const RoutingTrace& trace, Strategy strategy) {
  const TreeTopology& topo = tree.topology();
  if (trace.p_right.size() != topo.num_internal() || trace.path_prob.size() != topo.num_leaves()) {
    throw RefineError("routing trace does not match the tree");
  }
  HardPrediction out;
  if (strategy == Strategy::max_path) {
    out.leaf = argmax(trace.path_prob);
    const auto ids = topo.path_to_leaf(out.leaf);
    for (std::size_t s = 0; s + 1 < ids.size(); ++s) {
      const TreeNode& n = topo.node(ids[s]);
      out.path.push_back({ids[s], n.right == static_cast<int>(ids[s + 1]),
                          trace.p_right[static_cast<std::size_t>(n.prototype)]});
    }
  } else if (strategy == Strategy::greedy) {
    std::size_t id = topo.root();
    while (!topo.node(id).is_leaf()) {
      const TreeNode& n = topo.node(id);
      const Real p = trace.p_right[static_cast<std::size_t>(n.prototype)];
      const bool right = p > Real(0.5);
      out.path.push_back({id, right, p});
      id = static_cast<std::size_t>(right ? n.right : n.left);
    }
    out.leaf = static_cast<std::size_t>(topo.node(id).leaf);
  } else {
    throw RefineError("hard_predict needs the max_path or greedy strategy");
  }
  out.distribution = tree.leaf_distribution(out.leaf);
  return out;
}

HardPrediction hard_predict(const ProtoTreeModel& model, const Image& image, Strategy strategy) {
  const Inference inf = infer(model, std::span(&image, 1));
  return hard_predict(model.tree, inf.trace(0), strategy);
}

std::vector<std::size_t> predict_classes(const ProtoTreeModel& model, const Inference& inference, Strategy strategy) {
  std::vector<std::size_t> out(inference.count);
  for (std::size_t n = 0; n < inference.count; ++n) {
    if (strategy == Strategy::soft) {
      out[n] = inference.predicted_class(n);
    } else {
      out[n] = argmax(hard_predict(model.tree, inference.trace(n), strategy).distribution);
    }
  }
  return out;
}

std::vector<std::size_t> predict_classes(const ProtoTreeModel& model, const Dataset& data, Strategy strategy) {
  return predict_classes(model, infer(model, data), strategy);
}

double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels) {
  if (predicted.size() != labels.size()) throw RefineError("prediction and label counts differ");
  if (labels.empty()) throw RefineError("accuracy of an empty dataset is undefined");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

double fidelity(const ProtoTreeModel& model, const Inference& inference, Strategy strategy) {
  if (inference.count == 0) throw RefineError("fidelity of an empty dataset is undefined");
  const auto soft = predict_classes(model, inference, Strategy::soft);
  const auto hard = predict_classes(model, inference, strategy);
  return accuracy(hard, soft);
}

double fidelity(const ProtoTreeModel& model, const Dataset& data, Strategy strategy) {
  if (data.size() == 0) throw RefineError("fidelity of an empty dataset is undefined");
  return fidelity(model, infer(model, data), strategy);
}

// ---- Ensembles --------------------------------------------------------------

std::vector<Real> ensemble_predict(std::span<const ProtoTreeModel* const> models, std::span<const Image> images) {
  if (models.empty()) throw RefineError("ensemble needs at least one model");
  const std::size_t k = models.front()->num_classes();
  for (const auto* m : models) {
    if (m->num_classes() != k) throw RefineError("ensemble members disagree on the number of classes");
  }
  std::vector<double> sum(images.size() * k, 0.0);
  for (const auto* m : models) {
    const Inference inf = infer(*m, images);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += inf.prediction[i];
  }
  std::vector<Real> out(sum.size());
  const double inv = 1.0 / static_cast<double>(models.size());
  for (std::size_t i = 0; i < sum.size(); ++i) out[i] = static_cast<Real>(sum[i] * inv);
  return out;
}

std::vector<Real> ensemble_predict(std::span<const ProtoTreeModel> models, std::span<const Image> images) {
  std::vector<const ProtoTreeModel*> ptrs;
  for (const auto& m : models) ptrs.push_back(&m);
  return ensemble_predict(std::span<const ProtoTreeModel* const>(ptrs), images);
}

double ensemble_accuracy(std::span<const ProtoTreeModel* const> models, const Dataset& data) {
  const auto pred = ensemble_predict(models, data.images);
  const std::size_t k = models.front()->num_classes();
  std::vector<std::size_t> cls(data.size());
  for (std::size_t n = 0; n < data.size(); ++n) cls[n] = argmax(std::span(pred).subspan(n * k, k));
  return accuracy(cls, data.labels);
}

// ---- Path statistics --------------------------------------------------------

PathLengthStats path_length_stats(const ProtoTree& tree, const Inference& inference) {
  PathLengthStats s;
  if (inference.count == 0) return s;
  std::vector<std::size_t> lengths(inference.count);
  for (std::size_t n = 0; n < inference.count; ++n) {
    lengths[n] = hard_predict(tree, inference.trace(n), Strategy::greedy).path.size();
  }
  double total = 0;
  for (auto l : lengths) total += static_cast<double>(l);
  s.mean = total / static_cast<double>(lengths.size());
  double var = 0;
  for (auto l : lengths) var += (static_cast<double>(l) - s.mean) * (static_cast<double>(l) - s.mean);
  s.stddev = std::sqrt(var / static_cast<double>(lengths.size()));
  s.min = *std::min_element(lengths.begin(), lengths.end());
  s.max = *std::max_element(lengths.begin(), lengths.end());
  return s;
}

PathLengthStats path_length_stats(const ProtoTreeModel& model, const Dataset& data) {
  return path_length_stats(model.tree, infer(model, data));
}

NPTT_NAMESPACE_END
