#include "nptt/model.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>

#include "nptt/ops.hpp"

NPTT_NAMESPACE_BEGIN

ProtoTreeModel ProtoTreeModel::create(const BackboneConfig& backbone, std::size_t height, std::size_t num_classes,
                                      std::uint64_t seed) {
  ProtoTreeModel m;
  m.seed = seed;
  m.backbone = Backbone::build(backbone, seed);
  // Separate stream for the tree so changing the backbone does not move prototypes.
  m.tree = ProtoTree::init(height, num_classes, backbone.latent_depth, seed ^ 0x9E3779B97F4A7C15ull);
  return m;
}

void ProtoTreeModel::save(Checkpoint& ckpt) const {
  // The seed is split into two exactly representable halves.
  ckpt.put("model/seed", {2}, {static_cast<float>(seed & 0xFFFFFFu), static_cast<float>((seed >> 24) & 0xFFFFFFu)});
  backbone.save(ckpt);
  tree.save(ckpt);
  ckpt.put_scalar("projection/done", projected ? 1.0 : 0.0);
  if (projected) {
    std::vector<float> table;
    for (const auto& r : projection) {
      table.insert(table.end(), {static_cast<float>(r.prototype), static_cast<float>(r.node),
                                 static_cast<float>(r.image_index), static_cast<float>(r.location.i),
                                 static_cast<float>(r.location.j), static_cast<float>(r.distance),
                                 r.constrained ? 1.0f : 0.0f, r.fell_back ? 1.0f : 0.0f});
    }
    ckpt.put("projection/records", {projection.size(), 8}, std::move(table));
    if (!projection_sources.empty()) ckpt.put("projection/sources", stack_images(projection_sources));
  }
}

Checkpoint ProtoTreeModel::to_checkpoint() const {
  Checkpoint c;
  save(c);
  return c;
}

ProtoTreeModel ProtoTreeModel::load(const Checkpoint& ckpt) {
  ProtoTreeModel m;
  if (ckpt.contains("model/seed")) {
    const auto& s = ckpt.get("model/seed").payload;
    if (s.size() == 2) m.seed = static_cast<std::uint64_t>(s[0]) | (static_cast<std::uint64_t>(s[1]) << 24);
  }
  m.backbone = Backbone::load(ckpt);
  m.tree = ProtoTree::load(ckpt);
  if (m.tree.depth() != m.backbone.config().latent_depth) {
    throw CheckpointError("prototype depth does not match backbone latent depth");
  }
  m.projected = ckpt.maybe_scalar("projection/done").value_or(0.0) != 0.0;
  if (m.projected) {
    const auto& r = ckpt.get("projection/records");
    for (std::size_t i = 0; i + 7 < r.payload.size(); i += 8) {
      const float* row = r.payload.data() + i;
      ProjectionRecord rec;
      rec.prototype = static_cast<std::size_t>(row[0]);
      rec.node = static_cast<std::size_t>(row[1]);
      rec.image_index = static_cast<std::size_t>(row[2]);
      rec.location = {static_cast<std::size_t>(row[3]), static_cast<std::size_t>(row[4])};
      rec.distance = static_cast<Real>(row[5]);
      rec.constrained = row[6] != 0.0f;
      rec.fell_back = row[7] != 0.0f;
      m.projection.push_back(rec);
    }
    if (ckpt.contains("projection/sources")) {
      const Tensor src = ckpt.tensor("projection/sources");
      const std::size_t c = src.dim(1);
      const std::size_t h = src.dim(2);
      const std::size_t w = src.dim(3);
      for (std::size_t n = 0; n < src.dim(0); ++n) {
        Image im(c, h, w);
        auto block = src.values().subspan(n * c * h * w, c * h * w);
        std::copy(block.begin(), block.end(), im.pixels.begin());
        m.projection_sources.push_back(std::move(im));
      }
    }
  }
  return m;
}

ProtoTreeModel ProtoTreeModel::clone() const {
  ProtoTreeModel m;
  m.backbone = backbone.clone();
  m.tree = tree.clone();
  m.seed = seed;
  m.projected = projected;
  m.projection = projection;
  m.projection_sources = projection_sources;
  return m;
}

// ---- Inference ------------------------------------------------------------------------

std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("NPTT_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
  }
  return n;
}

std::size_t argmax(std::span<const Real> values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

RoutingTrace Inference::trace(std::size_t n) const {
  RoutingTrace t;
  auto q = p_right_of(n);
  t.p_right.assign(q.begin(), q.end());
  auto d = std::span(distances).subspan(n * prototypes, prototypes);
  t.distance.assign(d.begin(), d.end());
  for (std::size_t p = 0; p < prototypes; ++p) {
    const auto a = argmin[n * prototypes + p];
    t.location.push_back({a / latent_width, a % latent_width});
  }
  auto pi = path_prob_of(n);
  t.path_prob.assign(pi.begin(), pi.end());
  return t;
}

std::size_t Inference::predicted_class(std::size_t n) const { return argmax(prediction_of(n)); }

namespace {

template <typename Body>
void parallel_chunks(std::size_t count, std::size_t batch_size, Body body) {
  const std::size_t batches = (count + batch_size - 1) / batch_size;
  const std::size_t workers = std::min(worker_threads(), std::max<std::size_t>(batches, 1));
  auto run = [&](std::size_t w) {
    NoGradGuard no_grad;
    for (std::size_t b = w; b < batches; b += workers) {
      const std::size_t begin = b * batch_size;
      body(begin, std::min(count, begin + batch_size));
    }
  };
  if (workers <= 1) {
    run(0);
    return;
  }
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(run, w);
  for (auto& t : threads) t.join();
}

}  // namespace

Inference infer(const ProtoTreeModel& model, std::span<const Image> images, std::size_t batch_size) {
  Inference out;
  out.count = images.size();
  out.prototypes = model.tree.topology().num_internal();
  out.leaves = model.tree.topology().num_leaves();
  out.classes = model.num_classes();
  out.latent_width = model.backbone.config().latent_side();
  out.distances.resize(out.count * out.prototypes);
  out.p_right.resize(out.count * out.prototypes);
  out.argmin.resize(out.count * out.prototypes);
  out.path_prob.resize(out.count * out.leaves);
  out.prediction.resize(out.count * out.classes);
  parallel_chunks(images.size(), std::max<std::size_t>(batch_size, 1), [&](std::size_t begin, std::size_t end) {
    const auto f = model.forward(stack_images(images.subspan(begin, end - begin)));
    auto copy = [&](const Tensor& t, std::vector<Real>& dst, std::size_t width) {
      std::copy(t.values().begin(), t.values().end(), dst.begin() + static_cast<std::ptrdiff_t>(begin * width));
    };
    copy(f.distances, out.distances, out.prototypes);
    copy(f.p_right, out.p_right, out.prototypes);
    copy(f.path_prob, out.path_prob, out.leaves);
    copy(f.prediction, out.prediction, out.classes);
    std::copy(f.argmin.begin(), f.argmin.end(), out.argmin.begin() + static_cast<std::ptrdiff_t>(begin * out.prototypes));
  });
  return out;
}

Inference infer(const ProtoTreeModel& model, const Dataset& data, std::size_t batch_size) {
  return infer(model, std::span<const Image>(data.images), batch_size);
}

Tensor compute_latents(const Backbone& backbone, std::span<const Image> images, std::size_t batch_size) {
  const auto& cfg = backbone.config();
  const std::size_t side = cfg.latent_side();
  const std::size_t per = cfg.latent_depth * side * side;
  std::vector<Real> values(images.size() * per);
  parallel_chunks(images.size(), std::max<std::size_t>(batch_size, 1), [&](std::size_t begin, std::size_t end) {
    const Tensor z = backbone.forward(stack_images(images.subspan(begin, end - begin)));
    std::copy(z.values().begin(), z.values().end(), values.begin() + static_cast<std::ptrdiff_t>(begin * per));
  });
  return Tensor::from({images.size(), cfg.latent_depth, side, side}, std::move(values));
}

double accuracy_of(const Inference& inference, std::span<const std::size_t> labels) {
  if (inference.count == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t n = 0; n < inference.count; ++n) correct += inference.predicted_class(n) == labels[n];
  return static_cast<double>(correct) / static_cast<double>(inference.count);
}

double soft_accuracy(const ProtoTreeModel& model, const Dataset& data) {
  return accuracy_of(infer(model, data), data.labels);
}

NPTT_NAMESPACE_END
