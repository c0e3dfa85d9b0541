#include <gtest/gtest.h>

#include <boost/graph/adjacency_list.hpp>
#include <boost/graph/graphviz.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nptt/explain.hpp"
#include "nptt/model.hpp"
#include "nptt/refine.hpp"

using namespace nptt;
namespace fs = std::filesystem;

namespace {

struct DotVertex {
  std::string name;
  std::string label;
  std::string shape;
};
struct DotEdge {
  std::string label;
};
using DotGraph = boost::adjacency_list<boost::vecS, boost::vecS, boost::directedS, DotVertex, DotEdge>;

DotGraph parse_dot(const std::string& text) {
  DotGraph g;
  boost::dynamic_properties dp(boost::ignore_other_properties);
  dp.property("node_id", boost::get(&DotVertex::name, g));
  dp.property("label", boost::get(&DotVertex::label, g));
  dp.property("shape", boost::get(&DotVertex::shape, g));
  dp.property("label", boost::get(&DotEdge::label, g));
  std::istringstream in(text);
  if (!boost::read_graphviz(in, g, dp)) throw std::runtime_error("DOT parse failed");
  return g;
}

ProtoTreeModel projected_model(std::uint64_t seed) {
  BackboneConfig bb;
  bb.input_side = 32;
  bb.stages = parse_stages("4:3:2,6:3:2");
  bb.latent_depth = 4;
  auto model = ProtoTreeModel::create(bb, 2, 3, seed);
  auto leaves = model.tree.leaf_logits().values();
  for (std::size_t l = 0; l < 4; ++l) leaves[l * 3 + l % 3] = 4;
  const auto [train, test] = gen_synthetic(3, 3, 32, seed);
  project(model, train, true);
  return model;
}

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("nptt_explain_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST(Upsample, CubicKernelValues) {
  EXPECT_DOUBLE_EQ(cubic_kernel(0), 1);
  EXPECT_DOUBLE_EQ(cubic_kernel(1), 0);
  EXPECT_DOUBLE_EQ(cubic_kernel(2), 0);
  EXPECT_DOUBLE_EQ(cubic_kernel(2.5), 0);
  // Catmull-Rom at t = 0.5: (a + 2) t^3 - (a + 3) t^2 + 1 with a = -0.5.
  EXPECT_DOUBLE_EQ(cubic_kernel(0.5), 1.5 * 0.125 - 2.5 * 0.25 + 1);
  EXPECT_DOUBLE_EQ(cubic_kernel(-0.5), cubic_kernel(0.5));
}

TEST(Upsample, ConstantAndIdentity) {
  const std::vector<Real> flat(6, Real(0.3));
  for (Real v : upsample_bicubic(flat, 2, 3, 8, 12)) EXPECT_NEAR(v, 0.3, 1e-6);
  const std::vector<Real> grid{1, 2, 3, 4, 5, 6};
  const auto same = upsample_bicubic(grid, 2, 3, 2, 3);
  for (std::size_t i = 0; i < grid.size(); ++i) EXPECT_NEAR(same[i], grid[i], 1e-6);
}

TEST(Upsample, LinearRampStaysLinearInside) {
  // Catmull-Rom reproduces linear functions away from the clamped border.
  std::vector<Real> ramp(8 * 8);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) ramp[i * 8 + j] = static_cast<Real>(j);
  const auto up = upsample_bicubic(ramp, 8, 8, 16, 16);
  for (std::size_t x = 4; x < 12; ++x) {
    const double src = (static_cast<double>(x) + 0.5) / 2 - 0.5;
    EXPECT_NEAR(up[5 * 16 + x], src, 1e-5);
  }
}

TEST(Similarity, MapPeakIsNearestPatch) {
  const auto model = projected_model(1);
  const auto [train, test] = gen_synthetic(3, 2, 32, 2);
  for (std::size_t p = 0; p < 3; ++p) {
    const auto map = similarity_map(model, p, test.images[0]);
    const Tensor z = compute_latents(model.backbone, std::span(test.images).subspan(0, 1));
    const auto np = nearest_patch(LatentView::of(z, 0), model.tree.prototypes().values().subspan(p * 4, 4));
    EXPECT_EQ(map.peak(), np.location);
    EXPECT_NEAR(map.at(np.location.i, np.location.j), std::exp(-np.distance), 1e-6);
  }
  EXPECT_THROW(similarity_map(model, 3, test.images[0]), ExplainError);
}

TEST(Similarity, PatchBoxCoversOneCellAroundPeak) {
  SimilarityMap map{4, 4, 0, 0, std::vector<Real>(16, Real(0.1))};
  map.values[1 * 4 + 2] = 1;
  Image img(3, 32, 32, Real(0.5));
  const auto crop = extract_patch(map, img);
  EXPECT_EQ(crop.box.height, 8u);
  EXPECT_EQ(crop.box.width, 8u);
  EXPECT_TRUE(crop.box.contains(crop.peak_y, crop.peak_x));
  EXPECT_EQ(crop.patch.height, 8u);
  // The peak of the upsampled map falls inside the latent cell's footprint.
  EXPECT_GE(crop.peak_y, 8u);
  EXPECT_LT(crop.peak_y, 16u);
  EXPECT_GE(crop.peak_x, 16u);
  EXPECT_LT(crop.peak_x, 24u);

  map.values.assign(16, Real(0.1));
  map.values[15] = 1;
  const auto corner = extract_patch(map, img);
  EXPECT_EQ(corner.box.top + corner.box.height, 32u);
  EXPECT_EQ(corner.box.left + corner.box.width, 32u);
}

TEST(Bmp, HeaderAndPixelOrder) {
  Image img(3, 2, 3);
  img.at(0, 0, 0) = 1;  // top-left red
  const auto bmp = encode_bmp(img);
  ASSERT_GE(bmp.size(), 54u);
  EXPECT_EQ(bmp[0], 'B');
  EXPECT_EQ(bmp[1], 'M');
  const std::size_t row = (3 * 3 + 3) / 4 * 4;
  EXPECT_EQ(bmp.size(), 54 + 2 * row);
  EXPECT_EQ(bmp[28], 24);  // bits per pixel
  // Rows are stored bottom-up as BGR: the top-left pixel is in the second row.
  EXPECT_EQ(bmp[54 + row + 2], 255);
  EXPECT_EQ(bmp[54 + row + 0], 0);
}

TEST(Export, DotRoundTripMatchesTopology) {
  const auto model = projected_model(3);
  const auto dir = scratch("dot");
  const auto graph = export_tree(model, dir.string());
  std::ifstream in(dir / "tree.dot");
  std::stringstream buf;
  buf << in.rdbuf();
  const auto g = parse_dot(buf.str());
  const auto& topo = model.tree.topology();
  EXPECT_EQ(boost::num_vertices(g), topo.num_nodes());
  EXPECT_EQ(boost::num_edges(g), topo.num_nodes() - 1);
  std::size_t leaves = 0, present = 0;
  for (auto v : boost::make_iterator_range(boost::vertices(g))) leaves += g[v].shape == "ellipse";
  for (auto e : boost::make_iterator_range(boost::edges(g))) present += g[e].label == "present";
  EXPECT_EQ(leaves, topo.num_leaves());
  EXPECT_EQ(present, topo.num_internal());
  for (const auto& f : graph.files) EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_TRUE(fs::exists(dir / "tree.html"));
}

TEST(Export, ExportedPatchesAreFaithful) {
  const auto model = projected_model(4);
  const auto dir = scratch("faithful");
  const auto graph = export_tree(model, dir.string());
  const std::size_t d = model.tree.depth();
  for (const auto& node : graph.nodes) {
    if (node.leaf) continue;
    const auto& rec = model.projection[node.prototype];
    const Tensor z = compute_latents(model.backbone, std::span(model.projection_sources).subspan(node.prototype, 1));
    const auto view = LatentView::of(z, 0);
    EXPECT_EQ(node.latent_location, rec.location);
    for (std::size_t c = 0; c < d; ++c) {
      EXPECT_EQ(view.at(c, node.latent_location.i, node.latent_location.j),
                model.tree.prototypes().values()[node.prototype * d + c]);
    }
    const Image patch = load_ppm((dir / node.patch_file).string());
    EXPECT_EQ(patch.height, node.box.height);
  }
}

TEST(Export, ExplainWritesDecisionPath) {
  const auto model = projected_model(5);
  const auto [train, test] = gen_synthetic(3, 1, 32, 6);
  const auto dir = scratch("sample");
  ExportOptions opt;
  opt.sample_name = "probe";
  const auto graph = export_tree(model, dir.string(), &test.images[0], opt);
  ASSERT_TRUE(graph.sample_path.has_value());
  EXPECT_EQ(graph.sample_path->path.size(), 2u);
  EXPECT_TRUE(fs::exists(dir / "explain_probe.html"));
  const auto direct = hard_predict(model, test.images[0], Strategy::greedy);
  EXPECT_EQ(graph.sample_path->leaf, direct.leaf);
}

TEST(Export, RejectsUnprojectedModel) {
  BackboneConfig bb;
  bb.input_side = 16;
  bb.stages = parse_stages("4:3:2");
  const auto model = ProtoTreeModel::create(bb, 1, 2, 1);
  EXPECT_THROW(export_tree(model, scratch("bad").string()), ExplainError);
}
