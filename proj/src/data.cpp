#include "nptt/data.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <sstream>

NPTT_NAMESPACE_BEGIN

namespace fs = std::filesystem;

void Dataset::validate(bool require_all_classes) const {
  if (images.empty()) throw DataError("dataset '" + split + "' is empty");
  if (images.size() != labels.size()) throw DataError("dataset '" + split + "' has mismatched image/label counts");
  if (class_names.empty()) throw DataError("dataset '" + split + "' has no classes");
  std::vector<bool> seen(class_names.size(), false);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    if (im.channels != channels || im.height != side || im.width != side) {
      throw DataError("image " + std::to_string(i) + " is " + std::to_string(im.channels) + "x" +
                      std::to_string(im.height) + "x" + std::to_string(im.width) + ", expected " +
                      std::to_string(channels) + "x" + std::to_string(side) + "x" + std::to_string(side));
    }
    if (labels[i] >= class_names.size()) throw DataError("label out of range at image " + std::to_string(i));
    seen[labels[i]] = true;
  }
  if (require_all_classes && !std::all_of(seen.begin(), seen.end(), [](bool b) { return b; })) {
    throw DataError("dataset '" + split + "' does not cover every class");
  }
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.channels = channels;
  out.side = side;
  out.class_names = class_names;
  out.split = split;
  for (auto i : indices) {
    out.images.push_back(images.at(i));
    out.labels.push_back(labels.at(i));
  }
  return out;
}

Tensor stack_images(std::span<const Image> images) {
  if (images.empty()) throw DataError("cannot stack zero images");
  const auto& first = images.front();
  std::vector<Real> values;
  values.reserve(images.size() * first.pixels.size());
  for (const auto& im : images) {
    if (im.channels != first.channels || im.height != first.height || im.width != first.width) {
      throw DataError("cannot stack images of different shapes");
    }
    values.insert(values.end(), im.pixels.begin(), im.pixels.end());
  }
  return Tensor::from({images.size(), first.channels, first.height, first.width}, std::move(values));
}

Tensor stack_images(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<Image> picked;
  picked.reserve(indices.size());
  for (auto i : indices) picked.push_back(data.images.at(i));
  return stack_images(picked);
}

// ---- PPM ----------------------------------------------------------------------

namespace {

class PpmHeaderReader {
 public:
  explicit PpmHeaderReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t read_uint(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    std::size_t value = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      value = value * 10 + (bytes_[pos_] - '0');
      if (value > 1u << 24) fail(std::string(what) + " is too large", start);
      ++pos_;
    }
    if (pos_ == start) fail(std::string("expected ") + what, start);
    return value;
  }

  [[noreturn]] void fail(const std::string& msg, std::size_t at) const {
    throw DataError("PPM: " + msg + " at byte " + std::to_string(at));
  }

  void expect_single_whitespace() {
    if (pos_ >= bytes_.size() || !std::isspace(bytes_[pos_])) fail("expected whitespace after maxval", pos_);
    ++pos_;
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint8_t quantize(Real v) {
  const Real clamped = std::clamp(v, Real(0), Real(1));
  return static_cast<std::uint8_t>(std::lround(clamped * Real(255)));
}

}  // namespace

Image decode_ppm(std::span<const std::uint8_t> bytes) {
  PpmHeaderReader reader(bytes);
  if (bytes.size() < 2 || bytes[0] != 'P') reader.fail("missing 'P' magic", 0);
  if (bytes[1] != '6') {
    reader.fail(std::string("unsupported format P") + static_cast<char>(bytes[1]) + " (only binary P6)", 1);
  }
  reader = PpmHeaderReader(bytes.subspan(2));
  const auto width = reader.read_uint("width");
  const auto height = reader.read_uint("height");
  const auto maxval = reader.read_uint("maxval");
  if (width == 0 || height == 0) reader.fail("zero image extent", reader.pos() + 2);
  if (maxval != 255) reader.fail("maxval " + std::to_string(maxval) + " unsupported (need 255)", reader.pos() + 2);
  reader.expect_single_whitespace();
  const std::size_t offset = reader.pos() + 2;
  const std::size_t need = width * height * 3;
  if (bytes.size() - offset < need) {
    throw DataError("PPM: truncated payload at byte " + std::to_string(bytes.size()) + " (expected " +
                    std::to_string(need) + " bytes from byte " + std::to_string(offset) + ")");
  }
  Image image(3, height, width);
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      for (std::size_t c = 0; c < 3; ++c) {
        image.at(c, i, j) = static_cast<Real>(bytes[offset + (i * width + j) * 3 + c]) / Real(255);
      }
    }
  }
  return image;
}

std::vector<std::uint8_t> encode_ppm(const Image& image) {
  if (image.channels != 3 && image.channels != 1) throw DataError("PPM export needs 1 or 3 channels");
  const std::string header = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + image.width * image.height * 3);
  for (std::size_t i = 0; i < image.height; ++i) {
    for (std::size_t j = 0; j < image.width; ++j) {
      for (std::size_t c = 0; c < 3; ++c) out.push_back(quantize(image.at(image.channels == 3 ? c : 0, i, j)));
    }
  }
  return out;
}

Image load_ppm(const std::string& path) {
  const auto bytes = read_file(path);
  try {
    return decode_ppm(bytes);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

void save_ppm(const std::string& path, const Image& image) {
  const auto bytes = encode_ppm(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path + "'");
}

// ---- Directory datasets ------------------------------------------------------

namespace {

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

Dataset finalize(std::vector<std::pair<std::string, std::string>> entries, const fs::path& root,
                 const std::string& split) {
  if (entries.empty()) throw DataError("no images found under '" + root.string() + "'");
  std::map<std::string, std::size_t> class_index;
  for (const auto& [path, cls] : entries) class_index.emplace(cls, 0);
  Dataset data;
  data.split = split;
  for (auto& [name, index] : class_index) {
    index = data.class_names.size();
    data.class_names.push_back(name);
  }
  for (const auto& [path, cls] : entries) {
    data.images.push_back(load_ppm((root / path).string()));
    data.labels.push_back(class_index.at(cls));
  }
  data.channels = data.images.front().channels;
  data.side = data.images.front().height;
  data.validate();
  return data;
}

}  // namespace

Dataset load_dataset_dir(const std::string& root_dir, const std::string& split) {
  const fs::path root(root_dir);
  if (!fs::is_directory(root)) throw DataError("dataset directory '" + root_dir + "' does not exist");
  std::vector<std::pair<std::string, std::string>> entries;
  const auto index = root / "labels.csv";
  if (fs::exists(index)) {
    std::ifstream in(index);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      line = trim(line);
      if (line.empty() || line.front() == '#') continue;
      const auto comma = line.find(',');
      if (comma == std::string::npos) {
        throw DataError("labels.csv line " + std::to_string(line_no) + ": expected 'path,class'");
      }
      auto path = trim(line.substr(0, comma));
      auto cls = trim(line.substr(comma + 1));
      if (line_no == 1 && path == "path" && cls == "class") continue;
      entries.emplace_back(std::move(path), std::move(cls));
    }
    return finalize(std::move(entries), root, split);
  }
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) class_dirs.push_back(e.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      entries.emplace_back(fs::relative(f, root).generic_string(), dir.filename().string());
    }
  }
  return finalize(std::move(entries), root, split);
}

void save_dataset_dir(const Dataset& data, const std::string& root_dir) {
  const fs::path root(root_dir);
  fs::create_directories(root);
  std::ofstream index(root / "labels.csv", std::ios::trunc);
  if (!index) throw DataError("cannot write labels.csv under '" + root_dir + "'");
  index << "path,class\n";
  std::vector<std::size_t> counter(data.num_classes(), 0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& cls = data.class_names.at(data.labels[i]);
    fs::create_directories(root / cls);
    std::ostringstream name;
    name << cls << "/img_" << std::setfill('0') << std::setw(5) << counter[data.labels[i]]++ << ".ppm";
    save_ppm((root / name.str()).string(), data.images[i]);
    index << name.str() << ',' << cls << '\n';
  }
}

// ---- Synthetic part-based dataset ----------------------------------------------

namespace {

constexpr std::size_t kShapeCount = 8;
constexpr std::array<std::array<Real, 3>, 5> kPalette{{
    {Real(0.92), Real(0.15), Real(0.15)},
    {Real(0.15), Real(0.80), Real(0.20)},
    {Real(0.20), Real(0.30), Real(0.95)},
    {Real(0.95), Real(0.90), Real(0.15)},
    {Real(0.90), Real(0.20), Real(0.85)},
}};

// True when pixel (y, x) in a g x g box belongs to glyph `shape`.
bool glyph_covers(std::size_t shape, double y, double x, double g) {
  const double c = (g - 1) / 2.0;
  const double dy = y - c;
  const double dx = x - c;
  const double r = g / 2.0;
  const double bar = std::max(1.0, g / 3.5);
  switch (shape) {
    case 0:  // filled square
      return true;
    case 1:  // disk
      return dx * dx + dy * dy <= r * r;
    case 2:  // plus
      return std::abs(dx) < bar / 2 + 0.5 || std::abs(dy) < bar / 2 + 0.5;
    case 3: {  // ring
      const double d = std::sqrt(dx * dx + dy * dy);
      return d <= r && d >= r - bar;
    }
    case 4:  // upward triangle
      return std::abs(dx) <= (y + 1) / 2.0;
    case 5:  // diagonal cross
      return std::abs(std::abs(dx) - std::abs(dy)) < bar / 1.5;
    case 6:  // hollow square
      return y < bar || x < bar || y >= g - bar || x >= g - bar;
    default:  // diamond
      return std::abs(dx) + std::abs(dy) <= r;
  }
}

struct MotifStyle {
  std::size_t shape;
  std::array<Real, 3> color;
};

MotifStyle motif_style(std::size_t motif) {
  return {motif % kShapeCount, kPalette[(motif + motif / kShapeCount) % kPalette.size()]};
}

Image render_sample(std::size_t side, std::span<const std::size_t> motifs, bool draw_motifs, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Image im(3, side, side);

  // Textured background: oriented stripes and per-pixel noise over a gray
  // whose brightness and tint vary only slightly, so that global colour
  // carries no per-image signature.
  const double base = 0.45 + 0.05 * unit(rng);
  std::array<double, 3> tint{};
  for (auto& t : tint) t = (unit(rng) - 0.5) * 0.03;
  const double angle = unit(rng) * std::numbers::pi;
  const double freq = 0.15 + 0.35 * unit(rng);
  const double phase = unit(rng) * 2 * std::numbers::pi;
  for (std::size_t i = 0; i < side; ++i) {
    for (std::size_t j = 0; j < side; ++j) {
      const double stripe = 0.04 * std::sin(freq * (std::cos(angle) * j + std::sin(angle) * i) + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        const double noise = (unit(rng) - 0.5) * 0.08;
        im.at(c, i, j) = static_cast<Real>(std::clamp(base + tint[c] + stripe + noise, 0.0, 1.0));
      }
    }
  }
  if (!draw_motifs) return im;

  // Motifs go into distinct cells of a 3x3 slot grid, jittered inside the cell.
  const std::size_t slot = side / 3;
  const std::size_t glyph = side * 3 / 16;
  std::array<std::size_t, 9> cells{0, 1, 2, 3, 4, 5, 6, 7, 8};
  std::shuffle(cells.begin(), cells.end(), rng);
  for (std::size_t m = 0; m < motifs.size(); ++m) {
    const auto style = motif_style(motifs[m]);
    const std::size_t cell = cells[m];
    std::uniform_int_distribution<std::size_t> jitter(0, slot - glyph);
    const std::size_t top = (cell / 3) * slot + jitter(rng);
    const std::size_t left = (cell % 3) * slot + jitter(rng);
    std::array<Real, 3> color{};
    for (std::size_t c = 0; c < 3; ++c) {
      color[c] = std::clamp(style.color[c] + static_cast<Real>((unit(rng) - 0.5) * 0.16), Real(0), Real(1));
    }
    for (std::size_t y = 0; y < glyph; ++y) {
      for (std::size_t x = 0; x < glyph; ++x) {
        if (!glyph_covers(style.shape, static_cast<double>(y), static_cast<double>(x), static_cast<double>(glyph))) {
          continue;
        }
        for (std::size_t c = 0; c < 3; ++c) im.at(c, top + y, left + x) = color[c];
      }
    }
  }
  return im;
}

Dataset make_split(const SyntheticOptions& opt, const std::vector<std::vector<std::size_t>>& motifs,
                   std::size_t per_class, std::uint64_t split_tag, const std::string& name) {
  Dataset data;
  data.channels = 3;
  data.side = opt.side;
  data.split = name;
  for (std::size_t k = 0; k < opt.num_classes; ++k) data.class_names.push_back("class_" + std::to_string(k));
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t k = 0; k < opt.num_classes; ++k) {
      std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32),
                        static_cast<std::uint32_t>(split_tag), static_cast<std::uint32_t>(k),
                        static_cast<std::uint32_t>(i)};
      std::mt19937_64 rng(seq);
      const bool erase = split_tag == 1 && opt.erase_class_motifs && *opt.erase_class_motifs == k;
      data.images.push_back(render_sample(opt.side, motifs[k], !erase, rng));
      data.labels.push_back(k);
    }
  }
  return data;
}

}  // namespace

std::vector<std::vector<std::size_t>> class_motifs(std::size_t num_classes) {
  std::vector<std::vector<std::size_t>> out(num_classes);
  if (num_classes <= 3) {
    for (std::size_t k = 0; k < num_classes; ++k) out[k] = {2 * k, 2 * k + 1};
    return out;
  }
  // Unique motif per class, one shared by each class pair, and one shared by
  // each group of four once there are more than four classes.
  const std::size_t pairs = (num_classes + 1) / 2;
  for (std::size_t k = 0; k < num_classes; ++k) {
    out[k] = {k, num_classes + k / 2};
    if (num_classes > 4) out[k].push_back(num_classes + pairs + k / 4);
  }
  return out;
}

std::pair<Dataset, Dataset> gen_synthetic(const SyntheticOptions& opt) {
  if (opt.num_classes < 2 || opt.num_classes > 16) {
    throw DataError("synthetic K must be in [2, 16], got " + std::to_string(opt.num_classes));
  }
  if (opt.side != 32 && opt.side != 64) throw DataError("synthetic side must be 32 or 64");
  if (opt.train_per_class == 0 || opt.test_per_class == 0) throw DataError("per-class counts must be positive");
  const auto motifs = class_motifs(opt.num_classes);
  return {make_split(opt, motifs, opt.train_per_class, 0, "train"),
          make_split(opt, motifs, opt.test_per_class, 1, "test")};
}

std::pair<Dataset, Dataset> gen_synthetic(std::size_t num_classes, std::size_t per_class, std::size_t side,
                                          std::uint64_t seed) {
  SyntheticOptions opt;
  opt.num_classes = num_classes;
  opt.train_per_class = per_class;
  opt.test_per_class = std::max<std::size_t>(1, per_class / 2);
  opt.side = side;
  opt.seed = seed;
  return gen_synthetic(opt);
}

// ---- Augmentation ----------------------------------------------------------------

void AugmentConfig::validate() const {
  if (!(horizontal_flip_p >= 0 && horizontal_flip_p <= 1)) throw DataError("flip probability must be in [0, 1]");
  if (!(brightness_lo > 0 && brightness_hi > 0 && brightness_lo <= brightness_hi)) {
    throw DataError("brightness jitter bounds must be positive with lo <= hi");
  }
}

AugmentDraw draw_augment(const AugmentConfig& config, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AugmentDraw draw;
  // Both draws are always consumed so the stream does not depend on outcomes.
  draw.flip = unit(rng) < config.horizontal_flip_p;
  const double u = unit(rng);
  draw.brightness = static_cast<Real>(config.brightness_lo + u * (config.brightness_hi - config.brightness_lo));
  return draw;
}

Image flip_horizontal(const Image& image) {
  Image out = image;
  for (std::size_t c = 0; c < image.channels; ++c) {
    for (std::size_t i = 0; i < image.height; ++i) {
      for (std::size_t j = 0; j < image.width; ++j) out.at(c, i, j) = image.at(c, i, image.width - 1 - j);
    }
  }
  return out;
}

Image augment(const Image& image, const AugmentConfig& config, const AugmentDraw& draw) {
  if (!config.enabled) return image;
  Image out = draw.flip ? flip_horizontal(image) : image;
  if (draw.brightness != Real(1)) {
    for (auto& v : out.pixels) v = std::clamp(v * draw.brightness, Real(0), Real(1));
  }
  return out;
}

NPTT_NAMESPACE_END
