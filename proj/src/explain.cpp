#include "nptt/explain.hpp"

#include <algorithm>
#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

NPTT_NAMESPACE_BEGIN

namespace fs = std::filesystem;

PatchLocation SimilarityMap::peak() const {
  std::size_t best = 0;
  for (std::size_t a = 1; a < values.size(); ++a) {
    if (values[a] > values[best]) best = a;
  }
  return {best / width, best % width};
}

SimilarityMap similarity_map(const ProtoTree& tree, std::size_t prototype, const LatentView& latent) {
  if (prototype >= tree.topology().num_internal()) {
    throw ExplainError("prototype index " + std::to_string(prototype) + " out of range (tree has " +
                       std::to_string(tree.topology().num_internal()) + ")");
  }
  if (latent.depth != tree.depth()) throw ExplainError("latent depth does not match the prototypes");
  const auto proto = tree.prototypes().values().subspan(prototype * tree.depth(), tree.depth());
  SimilarityMap map;
  map.height = latent.height;
  map.width = latent.width;
  map.prototype = prototype;
  map.values.resize(latent.height * latent.width);
  for (std::size_t i = 0; i < latent.height; ++i) {
    for (std::size_t j = 0; j < latent.width; ++j) {
      map.values[i * latent.width + j] = edge_probability(patch_distance(latent, {i, j}, proto));
    }
  }
  return map;
}

SimilarityMap similarity_map(const ProtoTreeModel& model, std::size_t prototype, const Image& image,
                             std::size_t source) {
  if (image.height != model.input_side() || image.width != model.input_side()) {
    throw ExplainError("image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                       " but the model expects " + std::to_string(model.input_side()));
  }
  const Tensor latents = compute_latents(model.backbone, std::span(&image, 1));
  SimilarityMap map = similarity_map(model.tree, prototype, LatentView::of(latents, 0));
  map.source = source;
  return map;
}

double cubic_kernel(double t) {
  constexpr double a = -0.5;
  t = std::abs(t);
  if (t <= 1) return ((a + 2) * t - (a + 3)) * t * t + 1;
  if (t < 2) return ((a * t - 5 * a) * t + 8 * a) * t - 4 * a;
  return 0;
}

std::vector<Real> upsample_bicubic(std::span<const Real> grid, std::size_t height, std::size_t width,
                                   std::size_t out_height, std::size_t out_width) {
  if (grid.size() != height * width || height == 0 || width == 0) throw ExplainError("bad grid for upsampling");
  std::vector<Real> out(out_height * out_width);
  const double sy = static_cast<double>(height) / static_cast<double>(out_height);
  const double sx = static_cast<double>(width) / static_cast<double>(out_width);
  auto clamp_index = [](long v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<long>(v, 0, static_cast<long>(n) - 1));
  };
  for (std::size_t y = 0; y < out_height; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    const long y0 = static_cast<long>(std::floor(fy));
    for (std::size_t x = 0; x < out_width; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      const long x0 = static_cast<long>(std::floor(fx));
      double acc = 0;
      for (long m = y0 - 1; m <= y0 + 2; ++m) {
        const double wy = cubic_kernel(fy - static_cast<double>(m));
        if (wy == 0) continue;
        for (long n = x0 - 1; n <= x0 + 2; ++n) {
          const double wx = cubic_kernel(fx - static_cast<double>(n));
          acc += wy * wx * grid[clamp_index(m, height) * width + clamp_index(n, width)];
        }
      }
      out[y * out_width + x] = static_cast<Real>(acc);
    }
  }
  return out;
}

Image crop(const Image& image, const BoundingBox& box) {
  if (box.top + box.height > image.height || box.left + box.width > image.width) {
    throw ExplainError("crop box exceeds the image");
  }
  Image out(image.channels, box.height, box.width);
  for (std::size_t c = 0; c < image.channels; ++c) {
    for (std::size_t i = 0; i < box.height; ++i) {
      for (std::size_t j = 0; j < box.width; ++j) out.at(c, i, j) = image.at(c, box.top + i, box.left + j);
    }
  }
  return out;
}

PatchCrop extract_patch(const SimilarityMap& map, const Image& source) {
  if (map.height == 0 || map.width == 0) throw ExplainError("empty similarity map");
  const std::size_t h = source.height;
  const std::size_t w = source.width;
  const auto up = upsample_bicubic(map.values, map.height, map.width, h, w);
  std::size_t best = 0;
  for (std::size_t a = 1; a < up.size(); ++a) {
    if (up[a] > up[best]) best = a;
  }
  PatchCrop out;
  out.peak_y = best / w;
  out.peak_x = best % w;
  out.box.height = std::max<std::size_t>(1, h / map.height);
  out.box.width = std::max<std::size_t>(1, w / map.width);
  auto place = [](std::size_t peak, std::size_t extent, std::size_t limit) {
    const long start = static_cast<long>(peak) - static_cast<long>((extent - 1) / 2);
    return static_cast<std::size_t>(std::clamp<long>(start, 0, static_cast<long>(limit - extent)));
  };
  out.box.top = place(out.peak_y, out.box.height, h);
  out.box.left = place(out.peak_x, out.box.width, w);
  out.patch = crop(source, out.box);
  return out;
}

std::vector<std::uint8_t> encode_bmp(const Image& image) {
  const std::size_t w = image.width;
  const std::size_t h = image.height;
  const std::size_t stride = (w * 3 + 3) / 4 * 4;
  const std::size_t data = stride * h;
  std::vector<std::uint8_t> out(54 + data, 0);
  auto put32 = [&](std::size_t at, std::uint32_t v) {
    for (int b = 0; b < 4; ++b) out[at + b] = static_cast<std::uint8_t>(v >> (8 * b));
  };
  out[0] = 'B';
  out[1] = 'M';
  put32(2, static_cast<std::uint32_t>(out.size()));
  put32(10, 54);
  put32(14, 40);
  put32(18, static_cast<std::uint32_t>(w));
  put32(22, static_cast<std::uint32_t>(h));
  out[26] = 1;
  out[28] = 24;
  put32(34, static_cast<std::uint32_t>(data));
  auto byte = [](Real v) { return static_cast<std::uint8_t>(std::lround(std::clamp<Real>(v, 0, 1) * 255)); };
  for (std::size_t i = 0; i < h; ++i) {
    const std::size_t row = 54 + (h - 1 - i) * stride;  // bottom-up
    for (std::size_t j = 0; j < w; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        const std::size_t src = image.channels == 3 ? c : 0;
        out[row + j * 3 + (2 - c)] = byte(image.at(src, i, j));  // BGR
      }
    }
  }
  return out;
}

namespace {

std::string base64(const std::vector<std::uint8_t>& bytes) {
  using namespace boost::archive::iterators;
  using It = base64_from_binary<transform_width<std::vector<std::uint8_t>::const_iterator, 6, 8>>;
  std::string out(It(bytes.begin()), It(bytes.end()));
  out.append((3 - bytes.size() % 3) % 3, '=');
  return out;
}

std::string data_uri(const Image& image) { return "data:image/bmp;base64," + base64(encode_bmp(image)); }

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

std::string dot_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out;
}

std::string class_name(const ExportOptions& options, std::size_t k) {
  return k < options.class_names.size() ? options.class_names[k] : "class_" + std::to_string(k);
}

std::string format_prob(Real p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(p));
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ExplainError("cannot write " + path.string());
  out << text;
  if (!out) throw ExplainError("failed writing " + path.string());
}

const ProjectionRecord& record_for(const ProtoTreeModel& model, std::size_t prototype) {
  for (const auto& r : model.projection) {
    if (r.prototype == prototype) return r;
  }
  throw ExplainError("no projection record for prototype " + std::to_string(prototype));
}

const Image& source_for(const ProtoTreeModel& model, std::size_t prototype) {
  for (std::size_t i = 0; i < model.projection.size(); ++i) {
    if (model.projection[i].prototype == prototype) return model.projection_sources.at(i);
  }
  throw ExplainError("no source image for prototype " + std::to_string(prototype));
}

}  // namespace

std::string tree_dot(const ExplanationGraph& graph, const ExportOptions& options) {
  std::ostringstream out;
  out << "digraph prototree {\n  node [shape=box];\n";
  for (const auto& n : graph.nodes) {
    std::string label;
    if (n.leaf) {
      label = "leaf " + std::to_string(n.leaf_index);
      for (const auto& [k, p] : n.top_classes) label += "\\n" + dot_escape(class_name(options, k)) + ": " + format_prob(p);
      out << "  " << n.id << " [label=\"" << label << "\", shape=ellipse];\n";
    } else {
      label = "node " + std::to_string(n.id) + "\\nprototype " + std::to_string(n.prototype);
      out << "  " << n.id << " [label=\"" << label << "\", URL=\"" << dot_escape(n.patch_file) << "\"];\n";
    }
  }
  for (const auto& e : graph.edges) {
    out << "  " << e.from << " -> " << e.to << " [label=\"" << (e.present ? "present" : "absent") << "\"];\n";
  }
  out << "}\n";
  return out.str();
}

ExplanationGraph export_tree(const ProtoTreeModel& model, const std::string& out_dir, const Image* sample,
                             const ExportOptions& options) {
  if (!model.projected) throw ExplainError("model is not projected; prototypes would not be faithful patches");
  if (model.projection_sources.size() != model.projection.size()) {
    throw ExplainError("projection source images are missing from the model");
  }
  const TreeTopology& topo = model.tree.topology();
  if (model.projection.size() != topo.num_internal()) {
    throw ExplainError("projection records do not cover every prototype");
  }

  const fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root / "prototypes", ec);
  if (ec) throw ExplainError("cannot create output directory " + out_dir + ": " + ec.message());

  ExplanationGraph graph;
  graph.nodes.resize(topo.num_nodes());
  std::vector<Image> patches(topo.num_nodes());
  for (std::size_t id = 0; id < topo.num_nodes(); ++id) {
    const TreeNode& tn = topo.node(id);
    GraphNode& g = graph.nodes[id];
    g.id = id;
    g.leaf = tn.is_leaf();
    if (g.leaf) {
      g.leaf_index = static_cast<std::size_t>(tn.leaf);
      const auto dist = model.tree.leaf_distribution(g.leaf_index);
      std::vector<std::size_t> order(dist.size());
      for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
      for (std::size_t r = 0; r < std::min(options.top_classes, order.size()); ++r) {
        g.top_classes.emplace_back(order[r], dist[order[r]]);
      }
      continue;
    }
    g.prototype = static_cast<std::size_t>(tn.prototype);
    const ProjectionRecord& rec = record_for(model, g.prototype);
    const Image& src = source_for(model, g.prototype);
    g.latent_location = rec.location;
    const PatchCrop pc = extract_patch(similarity_map(model, g.prototype, src, rec.image_index), src);
    g.box = pc.box;
    g.patch_file = "prototypes/node_" + std::to_string(id) + ".ppm";
    save_ppm((root / g.patch_file).string(), pc.patch);
    graph.files.push_back(g.patch_file);
    patches[id] = pc.patch;
    graph.edges.push_back({id, static_cast<std::size_t>(tn.left), false});
    graph.edges.push_back({id, static_cast<std::size_t>(tn.right), true});
  }

  write_text(root / "tree.dot", tree_dot(graph, options));
  graph.files.push_back("tree.dot");

  // Nested lists mirror the tree; each internal node shows its patch.
  std::ostringstream html;
  html << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Prototype tree</title>\n"
       << "<style>body{font-family:sans-serif}ul{list-style:none;border-left:1px solid #999;padding-left:1.2em}"
       << "img{image-rendering:pixelated;width:64px;border:1px solid #333;vertical-align:middle}"
       << ".edge{color:#555;font-size:0.9em}</style></head><body>\n<h1>Prototype tree</h1>\n";
  std::function<void(std::size_t, const char*)> render = [&](std::size_t id, const char* edge) {
    const GraphNode& g = graph.nodes[id];
    html << "<li>";
    if (edge) html << "<span class=\"edge\">" << edge << "</span> ";
    if (g.leaf) {
      html << "leaf " << g.leaf_index << ":";
      for (const auto& [k, p] : g.top_classes) html << ' ' << html_escape(class_name(options, k)) << ' ' << format_prob(p);
      html << "</li>\n";
      return;
    }
    html << "node " << id << " <img alt=\"prototype " << g.prototype << "\" src=\"" << data_uri(patches[id]) << "\">\n<ul>\n";
    render(static_cast<std::size_t>(topo.node(id).right), "present");
    render(static_cast<std::size_t>(topo.node(id).left), "absent");
    html << "</ul></li>\n";
  };
  html << "<ul>\n";
  render(topo.root(), nullptr);
  html << "</ul>\n</body></html>\n";
  write_text(root / "tree.html", html.str());
  graph.files.push_back("tree.html");

  if (sample) {
    const Inference inf = infer(model, std::span(sample, 1));
    HardPrediction hp = hard_predict(model.tree, inf.trace(0), Strategy::greedy);
    const Tensor latent = compute_latents(model.backbone, std::span(sample, 1));
    std::ostringstream page;
    page << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Decision path</title>\n"
         << "<style>body{font-family:sans-serif}img{image-rendering:pixelated;width:64px;border:1px solid #333}"
         << "td{padding:4px 10px}</style></head><body>\n<h1>Decision path</h1>\n"
         << "<p><img alt=\"input\" style=\"width:128px\" src=\"" << data_uri(*sample) << "\"></p>\n"
         << "<table>\n<tr><th>node</th><th>prototype</th><th>found in image</th><th>p_right</th><th>edge</th></tr>\n";
    for (const auto& step : hp.path) {
      const GraphNode& g = graph.nodes[step.node];
      const SimilarityMap map = similarity_map(model.tree, g.prototype, LatentView::of(latent, 0));
      const PatchCrop found = extract_patch(map, *sample);
      page << "<tr><td>" << step.node << "</td><td><img alt=\"prototype\" src=\"" << data_uri(patches[step.node])
           << "\"></td><td><img alt=\"nearest patch\" src=\"" << data_uri(found.patch) << "\"></td><td>"
           << format_prob(step.p_right) << "</td><td>" << (step.went_right ? "present" : "absent") << "</td></tr>\n";
    }
    page << "</table>\n<p>leaf " << hp.leaf << ":";
    const GraphNode& leaf = graph.nodes[topo.node_of_leaf(hp.leaf)];
    for (const auto& [k, p] : leaf.top_classes) page << ' ' << html_escape(class_name(options, k)) << ' ' << format_prob(p);
    page << "</p>\n</body></html>\n";
    const std::string name = "explain_" + options.sample_name + ".html";
    write_text(root / name, page.str());
    graph.files.push_back(name);
    graph.sample_path = std::move(hp);
  }
  return graph;
}

NPTT_NAMESPACE_END
