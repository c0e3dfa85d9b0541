#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nptt/data.hpp"
#include "nptt/model.hpp"
#include "nptt/prototree.hpp"
#include "nptt/refine.hpp"

NPTT_NAMESPACE_BEGIN

class ExplainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// exp(-distance) of one prototype to every latent patch, [H x W].
struct SimilarityMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t prototype = 0;
  std::size_t source = 0;  // caller-defined image id
  std::vector<Real> values;

  Real at(std::size_t i, std::size_t j) const { return values[i * width + j]; }
  // Largest cell, first in row-major order on ties.
  PatchLocation peak() const;
};

SimilarityMap similarity_map(const ProtoTree& tree, std::size_t prototype, const LatentView& latent);
SimilarityMap similarity_map(const ProtoTreeModel& model, std::size_t prototype, const Image& image,
                             std::size_t source = 0);

// Catmull-Rom kernel (a = -0.5).
double cubic_kernel(double t);
// Bicubic resize of a row-major grid with half-pixel centres and clamped borders.
std::vector<Real> upsample_bicubic(std::span<const Real> grid, std::size_t height, std::size_t width,
                                   std::size_t out_height, std::size_t out_width);

struct BoundingBox {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  bool contains(std::size_t y, std::size_t x) const {
    return y >= top && y < top + height && x >= left && x < left + width;
  }
};

struct PatchCrop {
  Image patch;
  BoundingBox box;
  std::size_t peak_y = 0;  // argmax of the upsampled map
  std::size_t peak_x = 0;
};

Image crop(const Image& image, const BoundingBox& box);

// Upsamples the map to the image size and crops one latent cell's extent
// around the upsampled maximum, clamped to the image.
PatchCrop extract_patch(const SimilarityMap& map, const Image& source);

std::vector<std::uint8_t> encode_bmp(const Image& image);

struct GraphNode {
  std::size_t id = 0;
  bool leaf = false;
  std::size_t prototype = 0;  // internal nodes
  std::size_t leaf_index = 0;  // leaves
  std::string patch_file;      // relative to the export directory
  PatchLocation latent_location;
  BoundingBox box;
  std::vector<std::pair<std::size_t, Real>> top_classes;  // leaves
};

struct GraphEdge {
  std::size_t from = 0;
  std::size_t to = 0;
  bool present = false;  // right edge
};

struct ExplanationGraph {
  std::vector<GraphNode> nodes;  // indexed by topology node id
  std::vector<GraphEdge> edges;
  std::vector<std::string> files;  // every file written, relative to out_dir
  std::optional<HardPrediction> sample_path;
};

struct ExportOptions {
  std::vector<std::string> class_names;  // defaults to class_<k>
  std::size_t top_classes = 3;
  std::string sample_name = "sample";
};

// DOT text of the tree. Node ids are topology ids; right edges are labelled
// "present" and left edges "absent".
std::string tree_dot(const ExplanationGraph& graph, const ExportOptions& options = {});

// Writes prototypes/node_<id>.ppm, tree.dot and tree.html into `out_dir`, and
// explain_<name>.html when a sample is given. The model must be projected.
ExplanationGraph export_tree(const ProtoTreeModel& model, const std::string& out_dir, const Image* sample = nullptr,
                             const ExportOptions& options = {});

NPTT_NAMESPACE_END
