#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "nptt/backbone.hpp"
#include "nptt/data.hpp"
#include "nptt/model.hpp"

using namespace nptt;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("nptt_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

Image quantized_image(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  Image img(c, h, w);
  for (auto& p : img.pixels) p = static_cast<Real>(u(rng)) / Real(255);
  return img;
}

}  // namespace

TEST(Ppm, RoundTripOfQuantizedImageIsExact) {
  const Image img = quantized_image(3, 5, 7, 1);
  const auto bytes = encode_ppm(img);
  const std::string header = "P6\n7 5\n255\n";
  ASSERT_GE(bytes.size(), header.size());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())), header);
  EXPECT_EQ(bytes.size(), header.size() + 3 * 5 * 7);
  EXPECT_EQ(decode_ppm(bytes), img);
}

TEST(Ppm, DecodesCommentsAndRejectsBadInput) {
  const std::string text = "P6\n# comment\n2 1\n255\n";
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  for (std::uint8_t v : {255, 0, 0, 0, 0, 255}) bytes.push_back(v);
  const Image img = decode_ppm(bytes);
  EXPECT_EQ(img.width, 2u);
  EXPECT_FLOAT_EQ(img.at(0, 0, 0), 1);
  EXPECT_FLOAT_EQ(img.at(2, 0, 1), 1);

  const std::string truncated = "P6\n2 2\n255\n\x01\x02";
  EXPECT_THROW(decode_ppm(std::vector<std::uint8_t>(truncated.begin(), truncated.end())), DataError);
  const std::string magic = "P3\n1 1\n255\n1 2 3";
  EXPECT_THROW(decode_ppm(std::vector<std::uint8_t>(magic.begin(), magic.end())), DataError);
}

TEST(Ppm, FileRoundTrip) {
  const auto dir = scratch("ppm");
  const Image img = quantized_image(3, 4, 4, 2);
  save_ppm((dir / "a.ppm").string(), img);
  EXPECT_EQ(load_ppm((dir / "a.ppm").string()), img);
  EXPECT_THROW(load_ppm((dir / "missing.ppm").string()), DataError);
}

TEST(Datasets, DirectoryRoundTrip) {
  const auto dir = scratch("dataset");
  auto [train, test] = gen_synthetic(3, 4, 32, 5);
  save_dataset_dir(train, dir.string());
  const Dataset back = load_dataset_dir(dir.string(), "train");
  EXPECT_EQ(back.size(), train.size());
  EXPECT_EQ(back.class_names, train.class_names);
  EXPECT_EQ(back.labels, train.labels);
  // PPM stores 8 bits per channel.
  for (std::size_t i = 0; i < back.size(); ++i) {
    for (std::size_t p = 0; p < back.images[i].pixels.size(); ++p) {
      ASSERT_NEAR(back.images[i].pixels[p], train.images[i].pixels[p], 0.5 / 255 + 1e-6);
    }
  }
  EXPECT_THROW(load_dataset_dir((dir / "nope").string()), DataError);
}

TEST(Datasets, ValidateCatchesBadLabelsAndShapes) {
  auto [train, test] = gen_synthetic(2, 2, 32, 1);
  EXPECT_NO_THROW(train.validate());
  auto bad = train;
  bad.labels[0] = 5;
  EXPECT_THROW(bad.validate(), DataError);
  auto shape = train;
  shape.images[0] = Image(3, 8, 8);
  EXPECT_THROW(shape.validate(), DataError);
}

TEST(Synthetic, RejectsUnsupportedSide) { EXPECT_THROW(gen_synthetic(2, 2, 16, 1), DataError); }

TEST(Synthetic, DeterministicPerSeed) {
  const auto a = gen_synthetic(4, 3, 32, 7);
  const auto b = gen_synthetic(4, 3, 32, 7);
  const auto c = gen_synthetic(4, 3, 32, 8);
  EXPECT_EQ(a.first.images, b.first.images);
  EXPECT_EQ(a.second.images, b.second.images);
  EXPECT_NE(a.first.images, c.first.images);
}

TEST(Synthetic, SplitsAreInstanceDisjointAndBalanced) {
  const auto [train, test] = gen_synthetic(4, 10, 32, 3);
  EXPECT_EQ(train.size(), 40u);
  EXPECT_EQ(test.size(), 20u);
  std::set<std::vector<Real>> seen;
  for (const auto& im : train.images) seen.insert(im.pixels);
  for (const auto& im : test.images) EXPECT_FALSE(seen.contains(im.pixels));
  std::vector<int> count(4, 0);
  for (auto l : train.labels) ++count[l];
  for (int c : count) EXPECT_EQ(c, 10);
}

TEST(Synthetic, ClassMotifsAreConjunctionsWithSharing) {
  for (std::size_t k : {2, 3, 4, 8}) {
    const auto motifs = class_motifs(k);
    ASSERT_EQ(motifs.size(), k);
    std::set<std::vector<std::size_t>> distinct;
    for (const auto& m : motifs) {
      EXPECT_GE(m.size(), 2u);
      EXPECT_LE(m.size(), 3u);
      distinct.insert(m);
    }
    EXPECT_EQ(distinct.size(), k);
  }
  // With more classes, each class shares at least one motif with another.
  const auto m8 = class_motifs(8);
  for (std::size_t a = 0; a < 8; ++a) {
    bool shares = false;
    for (std::size_t b = 0; b < 8; ++b) {
      if (a == b) continue;
      for (auto x : m8[a])
        for (auto y : m8[b]) shares |= x == y;
    }
    EXPECT_TRUE(shares) << "class " << a;
  }
}

TEST(Synthetic, ErasedClassHasNoGlyphPixels) {
  SyntheticOptions o;
  o.num_classes = 2;
  o.train_per_class = 1;
  o.test_per_class = 3;
  o.side = 32;
  o.erase_class_motifs = 1;
  const auto [train, test] = gen_synthetic(o);
  // Background stays near mid-gray; glyph colours are saturated.
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (test.labels[i] != 1) continue;
    for (Real v : test.images[i].pixels) EXPECT_LT(std::abs(v - Real(0.475)), Real(0.15));
  }
}

TEST(Augment, FlipAndBrightness) {
  const Image img = quantized_image(3, 2, 3, 4);
  const Image flipped = flip_horizontal(img);
  EXPECT_EQ(flipped.at(1, 1, 0), img.at(1, 1, 2));
  EXPECT_EQ(flip_horizontal(flipped), img);
  AugmentConfig cfg;
  cfg.enabled = true;
  const Image bright = augment(img, cfg, {false, Real(2)});
  for (std::size_t p = 0; p < img.pixels.size(); ++p) {
    EXPECT_FLOAT_EQ(bright.pixels[p], std::min(Real(1), img.pixels[p] * 2));
  }
  cfg.enabled = false;
  EXPECT_EQ(augment(img, cfg, {true, Real(2)}), img);
  std::mt19937_64 r1(9), r2(9);
  cfg.enabled = true;
  const auto d1 = draw_augment(cfg, r1);
  const auto d2 = draw_augment(cfg, r2);
  EXPECT_EQ(d1.flip, d2.flip);
  EXPECT_EQ(d1.brightness, d2.brightness);
  cfg.brightness_lo = 2;
  cfg.brightness_hi = 1;
  EXPECT_ANY_THROW(cfg.validate());
}

TEST(Backbone, ShapesAndLatentRange) {
  BackboneConfig cfg;
  cfg.input_side = 32;
  cfg.latent_depth = 8;
  EXPECT_EQ(cfg.latent_side(), 4u);
  const auto bb = Backbone::build(cfg, 1);
  const auto [train, test] = gen_synthetic(2, 2, 32, 1);
  const Tensor z = bb.forward(stack_images(train.images));
  EXPECT_EQ(z.shape(), (Shape{4, 8, 4, 4}));
  for (Real v : z.values()) {
    EXPECT_GT(v, 0);
    EXPECT_LT(v, 1);
  }
}

TEST(Backbone, StageParsingAndValidation) {
  const auto stages = parse_stages("16:3:2, 32:5:1");
  ASSERT_EQ(stages.size(), 2u);
  EXPECT_EQ(stages[1], (ConvStage{32, 5, 1}));
  EXPECT_EQ(parse_stages(format_stages(stages)), stages);
  EXPECT_ANY_THROW(parse_stages("16:3"));
  BackboneConfig bad;
  bad.latent_depth = 0;
  EXPECT_ANY_THROW(bad.validate());
  BackboneConfig zero;
  zero.stages = {{4, 0, 1}};
  EXPECT_ANY_THROW(zero.validate());
}

TEST(Backbone, SeededBuildIsDeterministicAndCheckpointable) {
  BackboneConfig cfg;
  cfg.input_side = 16;
  const auto a = Backbone::build(cfg, 3);
  const auto b = Backbone::build(cfg, 3);
  Checkpoint ca, cb;
  a.save(ca);
  b.save(cb);
  EXPECT_EQ(ca.to_bytes(), cb.to_bytes());
  const auto back = Backbone::load(Checkpoint::from_bytes(ca.to_bytes()));
  EXPECT_EQ(back.config(), cfg);
  Checkpoint cc;
  back.save(cc);
  EXPECT_EQ(cc.to_bytes(), ca.to_bytes());
}

TEST(Checkpoint, VersionAndTruncationErrors) {
  Checkpoint c;
  c.put("x", Tensor::from({2}, {1, 2}));
  c.put_scalar("s", 3);
  std::string bytes = c.to_bytes();
  const auto back = Checkpoint::from_bytes(bytes);
  EXPECT_EQ(back.scalar("s"), 3);
  EXPECT_FALSE(back.maybe_scalar("missing"));
  EXPECT_THROW(back.get("missing"), CheckpointError);

  std::string bumped = bytes;
  bumped[4] = static_cast<char>(kCheckpointVersion + 1);
  EXPECT_THROW(Checkpoint::from_bytes(bumped), CheckpointVersionError);
  EXPECT_THROW(Checkpoint::from_bytes(bytes.substr(0, bytes.size() - 3)), CheckpointError);
  EXPECT_THROW(Checkpoint::from_bytes("JUNKJUNK"), CheckpointError);
}
