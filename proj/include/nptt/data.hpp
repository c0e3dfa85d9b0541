#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nptt/tensor.hpp"

NPTT_NAMESPACE_BEGIN

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Channels-first image with values in [0, 1].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<Real> pixels;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, Real fill = Real(0))
      : channels(c), height(h), width(w), pixels(c * h * w, fill) {}

  Real& at(std::size_t c, std::size_t i, std::size_t j) { return pixels[(c * height + i) * width + j]; }
  Real at(std::size_t c, std::size_t i, std::size_t j) const { return pixels[(c * height + i) * width + j]; }
  bool operator==(const Image&) const = default;
};

struct Dataset {
  std::size_t channels = 3;
  std::size_t side = 0;
  std::vector<Image> images;
  std::vector<std::size_t> labels;
  std::vector<std::string> class_names;
  std::string split;

  std::size_t size() const { return images.size(); }
  std::size_t num_classes() const { return class_names.size(); }

  // Checks shapes, label range, and that every class appears at least once.
  void validate(bool require_all_classes = true) const;
  Dataset subset(std::span<const std::size_t> indices) const;
};

// Stacks images into an [N x C x S x S] tensor.
Tensor stack_images(std::span<const Image> images);
Tensor stack_images(const Dataset& data, std::span<const std::size_t> indices);

// ---- PPM (binary P6, maxval 255) ------------------------------------------

Image decode_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const Image& image);
Image load_ppm(const std::string& path);
void save_ppm(const std::string& path, const Image& image);

// ---- Directory datasets ------------------------------------------------------

// Reads `<root>/<class_name>/<image>.ppm`. When `<root>/labels.csv` exists its
// (path, class) rows take precedence over the directory walk.
Dataset load_dataset_dir(const std::string& root, const std::string& split = "");
void save_dataset_dir(const Dataset& data, const std::string& root);

// ---- Synthetic part-based dataset --------------------------------------------

struct SyntheticOptions {
  std::size_t num_classes = 8;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  std::size_t side = 64;
  std::uint64_t seed = 0;
  // When set, test images of this class are rendered without their motifs.
  std::optional<std::size_t> erase_class_motifs;
};

// Motif ids that define each class. Small K uses disjoint pairs; larger K
// gives each class a unique motif plus motifs shared with its pair and its
// group of four.
std::vector<std::vector<std::size_t>> class_motifs(std::size_t num_classes);

std::pair<Dataset, Dataset> gen_synthetic(const SyntheticOptions& options);
std::pair<Dataset, Dataset> gen_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t side,
                                          std::uint64_t seed);

// ---- Augmentation ----------------------------------------------------------------

struct AugmentConfig {
  bool enabled = false;
  Real horizontal_flip_p = Real(0.5);
  Real brightness_lo = Real(0.6);
  Real brightness_hi = Real(1.4);

  void validate() const;
};

struct AugmentDraw {
  bool flip = false;
  Real brightness = Real(1);
};

AugmentDraw draw_augment(const AugmentConfig& config, std::mt19937_64& rng);
Image augment(const Image& image, const AugmentConfig& config, const AugmentDraw& draw);
Image flip_horizontal(const Image& image);

NPTT_NAMESPACE_END
