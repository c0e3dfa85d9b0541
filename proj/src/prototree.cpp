#include "nptt/prototree.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>

#include "nptt/ops.hpp"

NPTT_NAMESPACE_BEGIN

namespace {

// Guard inside the derivative of sqrt at an exact match.
constexpr Real kSqrtGradEps = Real(1e-12);

}  // namespace

// ---- Topology -------------------------------------------------------------------

TreeTopology TreeTopology::full(std::size_t height) {
  if (height < 1) throw std::invalid_argument("tree height must be >= 1");
  if (height > 20) throw std::invalid_argument("tree height " + std::to_string(height) + " is too large");
  std::vector<TreeNode> nodes;
  int next_prototype = 0;
  int next_leaf = 0;
  std::function<int(std::size_t, int)> grow = [&](std::size_t level, int parent) -> int {
    const int id = static_cast<int>(nodes.size());
    nodes.push_back({});
    nodes[id].parent = parent;
    if (level == height) {
      nodes[id].leaf = next_leaf++;
      return id;
    }
    nodes[id].prototype = next_prototype++;
    const int left = grow(level + 1, id);
    const int right = grow(level + 1, id);
    nodes[id].left = left;
    nodes[id].right = right;
    return id;
  };
  grow(0, kNone);
  return from_nodes(std::move(nodes), 0);
}

TreeTopology TreeTopology::from_nodes(std::vector<TreeNode> nodes, std::size_t root) {
  if (root >= nodes.size()) throw std::invalid_argument("tree root out of range");
  if (nodes[root].parent != kNone) throw std::invalid_argument("tree root has a parent");
  TreeTopology t;
  std::size_t prototypes = 0;
  std::size_t leaves = 0;
  for (const auto& n : nodes) {
    const bool leaf = n.is_leaf();
    if (leaf == (n.prototype != kNone)) throw std::invalid_argument("node must be either a leaf or own a prototype");
    if (leaf && (n.left != kNone || n.right != kNone)) throw std::invalid_argument("leaf with children");
    if (!leaf && (n.left == kNone || n.right == kNone)) {
      throw std::invalid_argument("internal node without exactly two children");
    }
    (leaf ? leaves : prototypes) += 1;
  }
  t.internal_nodes_.assign(prototypes, std::numeric_limits<std::size_t>::max());
  t.leaf_nodes_.assign(leaves, std::numeric_limits<std::size_t>::max());

  // Walk from the root: every node must be reached exactly once.
  std::vector<bool> seen(nodes.size(), false);
  std::vector<std::size_t> stack{root};
  std::size_t visited = 0;
  while (!stack.empty()) {
    const auto id = stack.back();
    stack.pop_back();
    if (seen[id]) throw std::invalid_argument("tree contains a cycle or shared child");
    seen[id] = true;
    ++visited;
    const auto& n = nodes[id];
    auto& slot = n.is_leaf() ? t.leaf_nodes_ : t.internal_nodes_;
    const auto index = static_cast<std::size_t>(n.is_leaf() ? n.leaf : n.prototype);
    if (index >= slot.size() || slot[index] != std::numeric_limits<std::size_t>::max()) {
      throw std::invalid_argument("prototype/leaf indices must be a bijection");
    }
    slot[index] = id;
    for (int child : {n.left, n.right}) {
      if (child == kNone) continue;
      if (child < 0 || static_cast<std::size_t>(child) >= nodes.size() ||
          nodes[static_cast<std::size_t>(child)].parent != static_cast<int>(id)) {
        throw std::invalid_argument("child/parent links are inconsistent");
      }
      stack.push_back(static_cast<std::size_t>(child));
    }
  }
  if (visited != nodes.size()) throw std::invalid_argument("tree has unreachable nodes");
  t.nodes_ = std::move(nodes);
  t.root_ = root;
  return t;
}

std::size_t TreeTopology::depth(std::size_t node_id) const {
  std::size_t d = 0;
  for (int p = nodes_.at(node_id).parent; p != kNone; p = nodes_[static_cast<std::size_t>(p)].parent) ++d;
  return d;
}

std::size_t TreeTopology::height() const {
  std::size_t h = 0;
  for (auto id : leaf_nodes_) h = std::max(h, depth(id));
  return h;
}

std::vector<std::size_t> TreeTopology::leaves_under(std::size_t node_id) const {
  std::vector<std::size_t> out;
  std::function<void(std::size_t)> visit = [&](std::size_t id) {
    const auto& n = nodes_.at(id);
    if (n.is_leaf()) {
      out.push_back(static_cast<std::size_t>(n.leaf));
      return;
    }
    visit(static_cast<std::size_t>(n.left));
    visit(static_cast<std::size_t>(n.right));
  };
  visit(node_id);
  return out;
}

std::vector<std::size_t> TreeTopology::path_to_leaf(std::size_t leaf) const {
  std::vector<std::size_t> path;
  for (int id = static_cast<int>(leaf_nodes_.at(leaf)); id != kNone; id = nodes_[static_cast<std::size_t>(id)].parent) {
    path.push_back(static_cast<std::size_t>(id));
  }
  std::reverse(path.begin(), path.end());
  return path;
}

void TreeTopology::save(Checkpoint& ckpt, const std::string& prefix) const {
  std::vector<float> table;
  for (const auto& n : nodes_) {
    table.insert(table.end(), {static_cast<float>(n.left), static_cast<float>(n.right), static_cast<float>(n.parent),
                               static_cast<float>(n.prototype), static_cast<float>(n.leaf)});
  }
  ckpt.put(prefix + "topology", {nodes_.size(), 5}, std::move(table));
  ckpt.put_scalar(prefix + "root", static_cast<double>(root_));
}

TreeTopology TreeTopology::load(const Checkpoint& ckpt, const std::string& prefix) {
  const auto& r = ckpt.get(prefix + "topology");
  if (r.extents.size() != 2 || r.extents[1] != 5) throw CheckpointError("malformed topology table");
  std::vector<TreeNode> nodes(r.extents[0]);
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const float* row = r.payload.data() + i * 5;
    nodes[i] = {static_cast<int>(row[0]), static_cast<int>(row[1]), static_cast<int>(row[2]),
                static_cast<int>(row[3]), static_cast<int>(row[4])};
  }
  try {
    return from_nodes(std::move(nodes), static_cast<std::size_t>(ckpt.scalar(prefix + "root")));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid topology: ") + e.what());
  }
}

// ---- Patch distances ---------------------------------------------------------------

LatentView LatentView::of(const Tensor& latents, std::size_t n) {
  if (latents.rank() != 4) throw std::invalid_argument("latents must be [N x D x H x W]");
  const std::size_t d = latents.dim(1);
  const std::size_t h = latents.dim(2);
  const std::size_t w = latents.dim(3);
  if (n >= latents.dim(0)) throw std::out_of_range("latent sample index out of range");
  return {latents.values().subspan(n * d * h * w, d * h * w), d, h, w};
}

Real patch_distance(const LatentView& latent, PatchLocation at, std::span<const Real> prototype) {
  Real s = 0;
  for (std::size_t d = 0; d < latent.depth; ++d) {
    const Real diff = latent.at(d, at.i, at.j) - prototype[d];
    s += diff * diff;
  }
  return std::sqrt(s);
}

NearestPatch nearest_patch(const LatentView& latent, std::span<const Real> prototype) {
  if (prototype.size() != latent.depth) {
    throw std::invalid_argument("prototype depth " + std::to_string(prototype.size()) + " does not match latent depth " +
                                std::to_string(latent.depth));
  }
  if (latent.height == 0 || latent.width == 0) throw std::invalid_argument("latent map has no patches");
  const std::size_t area = latent.height * latent.width;
  std::vector<Real> sq(area, Real(0));
  for (std::size_t d = 0; d < latent.depth; ++d) {
    const Real* plane = latent.values.data() + d * area;
    for (std::size_t a = 0; a < area; ++a) {
      const Real diff = plane[a] - prototype[d];
      sq[a] += diff * diff;
    }
  }
  // Strict comparison keeps the first (row-major) minimum.
  std::size_t best = 0;
  for (std::size_t a = 1; a < area; ++a) {
    if (sq[a] < sq[best]) best = a;
  }
  return {{best / latent.width, best % latent.width}, std::sqrt(sq[best])};
}

Real edge_probability(Real distance) { return std::exp(-distance); }

Tensor min_patch_distances(const Tensor& latents, const Tensor& prototypes, std::vector<std::size_t>& argmin) {
  if (latents.rank() != 4 || prototypes.rank() != 2 || latents.dim(1) != prototypes.dim(1)) {
    throw std::invalid_argument("latent depth " + shape_str(latents.shape()) + " does not match prototypes " +
                                shape_str(prototypes.shape()));
  }
  const std::size_t batch = latents.dim(0);
  const std::size_t depth = latents.dim(1);
  const std::size_t area = latents.dim(2) * latents.dim(3);
  const std::size_t count = prototypes.dim(0);
  argmin.assign(batch * count, 0);
  std::vector<Real> out(batch * count);
  for (std::size_t n = 0; n < batch; ++n) {
    const LatentView view = LatentView::of(latents, n);
    for (std::size_t p = 0; p < count; ++p) {
      const auto near = nearest_patch(view, prototypes.values().subspan(p * depth, depth));
      argmin[n * count + p] = near.location.i * view.width + near.location.j;
      out[n * count + p] = near.distance;
    }
  }
  auto dist = out;
  return record_op(
      {batch, count}, std::move(out), {latents, prototypes},
      [latents, prototypes, argmin, dist = std::move(dist), batch, depth, area, count](std::span<const Real> g) {
        auto gz = grad_sink(latents);
        auto gp = grad_sink(prototypes);
        auto z = latents.values();
        auto proto = prototypes.values();
        for (std::size_t n = 0; n < batch; ++n) {
          for (std::size_t p = 0; p < count; ++p) {
            const std::size_t k = n * count + p;
            if (g[k] == Real(0)) continue;
            const Real d = dist[k];
            const Real coef = g[k] / std::sqrt(d * d + kSqrtGradEps);
            const std::size_t a = argmin[k];
            for (std::size_t c = 0; c < depth; ++c) {
              const std::size_t zi = (n * depth + c) * area + a;
              const Real diff = z[zi] - proto[p * depth + c];
              if (!gz.empty()) gz[zi] += coef * diff;
              if (!gp.empty()) gp[p * depth + c] -= coef * diff;
            }
          }
        }
      });
}

// ---- Routing ------------------------------------------------------------------------

namespace {

// Fills the probability of reaching each node (indexed by node id).
void reach_probabilities(const TreeTopology& topo, std::span<const Real> p_right, std::vector<Real>& reach) {
  reach.assign(topo.num_nodes(), Real(0));
  reach[topo.root()] = Real(1);
  std::vector<std::size_t> stack{topo.root()};
  while (!stack.empty()) {
    const auto id = stack.back();
    stack.pop_back();
    const auto& n = topo.node(id);
    if (n.is_leaf()) continue;
    const Real q = p_right[static_cast<std::size_t>(n.prototype)];
    reach[static_cast<std::size_t>(n.left)] = reach[id] * (Real(1) - q);
    reach[static_cast<std::size_t>(n.right)] = reach[id] * q;
    stack.push_back(static_cast<std::size_t>(n.right));
    stack.push_back(static_cast<std::size_t>(n.left));
  }
}

}  // namespace

std::vector<Real> route_values(const TreeTopology& topology, std::span<const Real> p_right) {
  if (p_right.size() != topology.num_internal()) throw std::invalid_argument("p_right size does not match tree");
  std::vector<Real> reach;
  reach_probabilities(topology, p_right, reach);
  std::vector<Real> out(topology.num_leaves());
  for (std::size_t l = 0; l < out.size(); ++l) out[l] = reach[topology.node_of_leaf(l)];
  return out;
}

Tensor path_probabilities(const Tensor& p_right, const TreeTopology& topology) {
  if (p_right.rank() != 2 || p_right.dim(1) != topology.num_internal()) {
    throw std::invalid_argument("p_right must be [N x " + std::to_string(topology.num_internal()) + "]");
  }
  const std::size_t batch = p_right.dim(0);
  const std::size_t count = topology.num_internal();
  const std::size_t leaves = topology.num_leaves();
  std::vector<Real> out(batch * leaves);
  std::vector<Real> reach_all(batch * topology.num_nodes());
  std::vector<Real> reach;
  for (std::size_t n = 0; n < batch; ++n) {
    reach_probabilities(topology, p_right.values().subspan(n * count, count), reach);
    std::copy(reach.begin(), reach.end(), reach_all.begin() + static_cast<std::ptrdiff_t>(n * topology.num_nodes()));
    for (std::size_t l = 0; l < leaves; ++l) out[n * leaves + l] = reach[topology.node_of_leaf(l)];
  }
  return record_op({batch, leaves}, std::move(out), {p_right},
                   [p_right, topology, reach_all = std::move(reach_all), batch, count, leaves](std::span<const Real> g) {
                     auto gq = grad_sink(p_right);
                     auto q = p_right.values();
                     const std::size_t nodes = topology.num_nodes();
                     // down[id] = dLoss / d(reach[id]), filled bottom-up.
                     std::vector<Real> down(nodes);
                     std::function<Real(std::size_t, std::size_t)> visit = [&](std::size_t n, std::size_t id) -> Real {
                       const auto& node = topology.node(id);
                       if (node.is_leaf()) return down[id] = g[n * leaves + static_cast<std::size_t>(node.leaf)];
                       const Real gl = visit(n, static_cast<std::size_t>(node.left));
                       const Real gr = visit(n, static_cast<std::size_t>(node.right));
                       const auto p = static_cast<std::size_t>(node.prototype);
                       const Real qr = q[n * count + p];
                       gq[n * count + p] += reach_all[n * nodes + id] * (gr - gl);
                       return down[id] = (Real(1) - qr) * gl + qr * gr;
                     };
                     for (std::size_t n = 0; n < batch; ++n) visit(n, topology.root());
                   });
}

RoutingTrace TreeForward::trace(std::size_t sample) const {
  RoutingTrace t;
  const std::size_t count = p_right.dim(1);
  const std::size_t leaves = path_prob.dim(1);
  auto q = p_right.values().subspan(sample * count, count);
  auto d = distances.values().subspan(sample * count, count);
  t.p_right.assign(q.begin(), q.end());
  t.distance.assign(d.begin(), d.end());
  for (std::size_t p = 0; p < count; ++p) {
    const auto a = argmin[sample * count + p];
    t.location.push_back({a / latent_width, a % latent_width});
  }
  auto pi = path_prob.values().subspan(sample * leaves, leaves);
  t.path_prob.assign(pi.begin(), pi.end());
  return t;
}

// ---- ProtoTree -----------------------------------------------------------------------

std::vector<Real> normalize_leaf(std::span<const Real> logits, LeafNormalization mode) {
  std::vector<Real> out(logits.size());
  if (mode == LeafNormalization::softmax) {
    const Real top = *std::max_element(logits.begin(), logits.end());
    Real total = 0;
    for (std::size_t k = 0; k < logits.size(); ++k) total += (out[k] = std::exp(logits[k] - top));
    for (auto& v : out) v /= total;
    return out;
  }
  Real total = 0;
  for (Real v : logits) total += std::max(v, Real(0));
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = total > Real(0) ? std::max(logits[k], Real(0)) / total : Real(1) / static_cast<Real>(logits.size());
  }
  return out;
}

ProtoTree::ProtoTree(TreeTopology topology, Tensor prototypes, Tensor leaf_logits, LeafNormalization normalization)
    : topology_(std::move(topology)),
      prototypes_(std::move(prototypes)),
      leaf_logits_(std::move(leaf_logits)),
      normalization_(normalization) {
  if (prototypes_.rank() != 2 || prototypes_.dim(0) != topology_.num_internal()) {
    throw std::invalid_argument("prototype bank must have one row per internal node");
  }
  if (leaf_logits_.rank() != 2 || leaf_logits_.dim(0) != topology_.num_leaves() || leaf_logits_.dim(1) < 2) {
    throw std::invalid_argument("leaf parameters must be [L x K] with K >= 2");
  }
  if (leaf_logits_.requires_grad()) throw std::invalid_argument("leaf parameters are not trained by gradients");
}

ProtoTree ProtoTree::init(std::size_t height, std::size_t num_classes, std::size_t depth, std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("need at least two classes");
  if (depth < 1) throw std::invalid_argument("prototype depth must be >= 1");
  auto topology = TreeTopology::full(height);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.5, 0.1);
  std::vector<Real> protos(topology.num_internal() * depth);
  for (auto& v : protos) v = static_cast<Real>(dist(rng));
  Tensor bank = Tensor::from({topology.num_internal(), depth}, std::move(protos), true);
  Tensor leaves = Tensor::zeros({topology.num_leaves(), num_classes});
  return ProtoTree(std::move(topology), std::move(bank), std::move(leaves));
}

std::vector<Real> ProtoTree::leaf_distribution(std::size_t leaf) const {
  const std::size_t k = num_classes();
  return normalize_leaf(leaf_logits_.values().subspan(leaf * k, k), normalization_);
}

std::vector<double> log_normalize_leaf(std::span<const Real> logits, LeafNormalization mode) {
  std::vector<double> out(logits.size());
  if (mode == LeafNormalization::softmax) {
    const double top = *std::max_element(logits.begin(), logits.end());
    double total = 0;
    for (Real v : logits) total += std::exp(v - top);
    const double lse = top + std::log(total);
    for (std::size_t k = 0; k < logits.size(); ++k) out[k] = logits[k] - lse;
    return out;
  }
  const auto dist = normalize_leaf(logits, mode);
  for (std::size_t k = 0; k < dist.size(); ++k) {
    out[k] = dist[k] > Real(0) ? std::log(static_cast<double>(dist[k])) : -std::numeric_limits<double>::infinity();
  }
  return out;
}

std::vector<double> ProtoTree::leaf_log_distributions() const {
  const std::size_t k = num_classes();
  const auto logits = leaf_logits_.values();
  std::vector<double> out;
  out.reserve(logits.size());
  for (std::size_t l = 0; l < topology_.num_leaves(); ++l) {
    const auto row = log_normalize_leaf(logits.subspan(l * k, k), normalization_);
    out.insert(out.end(), row.begin(), row.end());
  }
  return out;
}

Tensor ProtoTree::leaf_distributions() const {
  const std::size_t k = num_classes();
  std::vector<Real> out;
  out.reserve(topology_.num_leaves() * k);
  for (std::size_t l = 0; l < topology_.num_leaves(); ++l) {
    const auto row = leaf_distribution(l);
    out.insert(out.end(), row.begin(), row.end());
  }
  return Tensor::from({topology_.num_leaves(), k}, std::move(out));
}

TreeForward ProtoTree::forward(const Tensor& latents) const {
  if (latents.rank() != 4 || latents.dim(1) != depth()) {
    throw std::invalid_argument("latents " + shape_str(latents.shape()) + " do not match prototype depth " +
                                std::to_string(depth()));
  }
  TreeForward f;
  f.latent_width = latents.dim(3);
  f.distances = min_patch_distances(latents, prototypes_, f.argmin);
  f.p_right = exp(neg(f.distances));
  f.path_prob = path_probabilities(f.p_right, topology_);
  f.prediction = matmul(f.path_prob, leaf_distributions());
  return f;
}

void ProtoTree::save(Checkpoint& ckpt) const {
  topology_.save(ckpt, "tree/");
  ckpt.put("tree/prototypes", prototypes_);
  ckpt.put("tree/leaf_logits", leaf_logits_);
  ckpt.put_scalar("tree/normalization", normalization_ == LeafNormalization::softmax ? 0.0 : 1.0);
}

ProtoTree ProtoTree::load(const Checkpoint& ckpt) {
  auto topology = TreeTopology::load(ckpt, "tree/");
  const auto mode = ckpt.maybe_scalar("tree/normalization").value_or(0.0) == 0.0 ? LeafNormalization::softmax
                                                                                   : LeafNormalization::l1;
  try {
    return ProtoTree(std::move(topology), ckpt.tensor("tree/prototypes", true), ckpt.tensor("tree/leaf_logits"), mode);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("invalid tree parameters: ") + e.what());
  }
}

ProtoTree ProtoTree::clone() const {
  Tensor protos = prototypes_.clone();
  protos.set_requires_grad(prototypes_.requires_grad());
  return ProtoTree(topology_, std::move(protos), leaf_logits_.clone(), normalization_);
}

NPTT_NAMESPACE_END
