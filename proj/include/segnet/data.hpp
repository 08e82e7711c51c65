#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "segnet/netpbm.hpp"
#include "segnet/rng.hpp"

namespace segnet {

enum class ClassId : std::uint8_t { background = 0, thick = 1, thin = 2, dash = 3, arrow = 4, numbered = 5 };

inline constexpr std::size_t kNumClasses = 6;
inline constexpr std::array<const char*, kNumClasses> kClassNames = {"Background", "Thi", "Thin",
                                                                     "Dash", "Arrow", "Numer"};

/// Grayscale drawing (0 = ink, 255 = paper) with its per-pixel class mask.
struct Sample {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> image;
  std::vector<std::uint8_t> mask;

  friend bool operator==(const Sample&, const Sample&) = default;
};

// ---------------------------------------------------------------------------
// Synthetic drawings
//
// Stroke geometry, all binary (no anti-aliasing):
//   Thi    square brush 3-5 px wide
//   Thin   1 px
//   Dash   1 px, 4 on / 4 off along the line
//   Arrow  1 px shaft plus filled triangle head (length 6, half width 3)
//   Numer  1 px shaft plus a 5x7 seven-segment digit at the end
// Every ink pixel carries its stroke's class; later strokes overwrite earlier ones.
// ---------------------------------------------------------------------------

namespace detail {

struct Canvas {
  Sample& s;
  std::uint8_t cls;

  void plot(long x, long y) {
    if (x < 0 || y < 0 || x >= static_cast<long>(s.width) || y >= static_cast<long>(s.height)) return;
    const std::size_t i = static_cast<std::size_t>(y) * s.width + static_cast<std::size_t>(x);
    s.image[i] = 0;
    s.mask[i] = cls;
  }
};

/// Bresenham points from (x0, y0) to (x1, y1) inclusive.
inline std::vector<std::pair<long, long>> line_points(long x0, long y0, long x1, long y1) {
  std::vector<std::pair<long, long>> pts;
  const long dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const long dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  long err = dx + dy;
  while (true) {
    pts.emplace_back(x0, y0);
    if (x0 == x1 && y0 == y1) break;
    const long e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
  return pts;
}

// Seven-segment masks for digits 0-9, bit order a b c d e f g.
inline constexpr std::array<std::uint8_t, 10> kSegments = {0x7E, 0x30, 0x6D, 0x79, 0x33,
                                                          0x5B, 0x5F, 0x70, 0x7F, 0x7B};

inline void draw_digit(Canvas& cv, long left, long top, int digit) {
  const std::uint8_t seg = kSegments[static_cast<std::size_t>(digit)];
  auto on = [&](int bit) { return (seg >> (6 - bit)) & 1; };
  auto hline = [&](long y) { for (long x = 0; x < 5; ++x) cv.plot(left + x, top + y); };
  auto vline = [&](long x, long y0, long y1) { for (long y = y0; y <= y1; ++y) cv.plot(left + x, top + y); };
  if (on(0)) hline(0);
  if (on(1)) vline(4, 0, 3);
  if (on(2)) vline(4, 3, 6);
  if (on(3)) hline(6);
  if (on(4)) vline(0, 3, 6);
  if (on(5)) vline(0, 0, 3);
  if (on(6)) hline(3);
}

inline void fill_triangle(Canvas& cv, double ax, double ay, double bx, double by, double cx, double cy) {
  const long x0 = static_cast<long>(std::floor(std::min({ax, bx, cx})));
  const long x1 = static_cast<long>(std::ceil(std::max({ax, bx, cx})));
  const long y0 = static_cast<long>(std::floor(std::min({ay, by, cy})));
  const long y1 = static_cast<long>(std::ceil(std::max({ay, by, cy})));
  auto edge = [](double px, double py, double qx, double qy, double rx, double ry) {
    return (qx - px) * (ry - py) - (qy - py) * (rx - px);
  };
  const double area = edge(ax, ay, bx, by, cx, cy);
  if (area == 0) return;
  for (long y = y0; y <= y1; ++y)
    for (long x = x0; x <= x1; ++x) {
      const double px = static_cast<double>(x), py = static_cast<double>(y);
      const double w0 = edge(bx, by, cx, cy, px, py) / area;
      const double w1 = edge(cx, cy, ax, ay, px, py) / area;
      const double w2 = edge(ax, ay, bx, by, px, py) / area;
      if (w0 >= -1e-9 && w1 >= -1e-9 && w2 >= -1e-9) cv.plot(x, y);
    }
}

inline void draw_stroke(Sample& s, ClassId cls, Rng& rng) {
  const long size = static_cast<long>(std::min(s.width, s.height));
  const long margin = std::max<long>(2, size / 16);
  const long x0 = rng.uniform_int(margin, static_cast<long>(s.width) - 1 - margin);
  const long y0 = rng.uniform_int(margin, static_cast<long>(s.height) - 1 - margin);
  const long len = rng.uniform_int(std::max<long>(4, size / 4), std::max<long>(5, size / 2));
  double angle;
  if (rng.bernoulli(0.7)) {
    angle = static_cast<double>(rng.uniform_int(0, 3)) * std::numbers::pi / 2.0;
  } else {
    angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
  }
  const double dx = std::cos(angle), dy = std::sin(angle);
  const long x1 = std::clamp<long>(std::lround(static_cast<double>(x0) + dx * static_cast<double>(len)), margin,
                                   static_cast<long>(s.width) - 1 - margin);
  const long y1 = std::clamp<long>(std::lround(static_cast<double>(y0) + dy * static_cast<double>(len)), margin,
                                   static_cast<long>(s.height) - 1 - margin);
  const auto pts = line_points(x0, y0, x1, y1);
  Canvas cv{s, static_cast<std::uint8_t>(cls)};

  switch (cls) {
    case ClassId::thick: {
      const long w = rng.uniform_int(3, 5);
      const long lo = -(w / 2), hi = lo + w - 1;
      for (auto [x, y] : pts)
        for (long oy = lo; oy <= hi; ++oy)
          for (long ox = lo; ox <= hi; ++ox) cv.plot(x + ox, y + oy);
      break;
    }
    case ClassId::thin:
      for (auto [x, y] : pts) cv.plot(x, y);
      break;
    case ClassId::dash:
      for (std::size_t i = 0; i < pts.size(); ++i)
        if (i % 8 < 4) cv.plot(pts[i].first, pts[i].second);
      break;
    case ClassId::arrow: {
      for (auto [x, y] : pts) cv.plot(x, y);
      const double ex = static_cast<double>(x1), ey = static_cast<double>(y1);
      double ux = static_cast<double>(x1 - x0), uy = static_cast<double>(y1 - y0);
      const double norm = std::hypot(ux, uy);
      if (norm > 0) {
        ux /= norm;
        uy /= norm;
        const double bx = ex - 6 * ux, by = ey - 6 * uy;
        fill_triangle(cv, ex, ey, bx - 3 * uy, by + 3 * ux, bx + 3 * uy, by - 3 * ux);
      }
      break;
    }
    case ClassId::numbered: {
      for (auto [x, y] : pts) cv.plot(x, y);
      const long left = x1 + (x1 >= x0 ? 2 : -6);
      const long top = y1 - 3;
      draw_digit(cv, left, top, static_cast<int>(rng.uniform_int(0, 9)));
      break;
    }
    case ClassId::background: break;
  }
}

}  // namespace detail

/// One synthetic drawing; each (seed, index) pair gives its own stream.
inline Sample generate_sample(std::size_t size, std::uint64_t seed, std::size_t index) {
  Rng rng(derive_seed(seed, index));
  Sample s{size, size, std::vector<std::uint8_t>(size * size, 255), std::vector<std::uint8_t>(size * size, 0)};
  const long strokes = rng.uniform_int(3, 10);
  for (long i = 0; i < strokes; ++i) {
    const auto cls = static_cast<ClassId>(rng.uniform_int(1, 5));
    detail::draw_stroke(s, cls, rng);
  }
  for (std::size_t i = 0; i < s.mask.size(); ++i) {
    if (s.mask[i] != 0 && s.image[i] != 0)
      throw std::logic_error("generate_sample: labelled pixel without ink");
  }
  return s;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct CropSpec {
  std::size_t width = 0, height = 0;
  bool random_offset = true;  // otherwise centered
};

struct AugmentSpec {
  std::optional<CropSpec> crop;
  bool mirror_horizontal = false;
  bool mirror_vertical = false;
  int quarter_turns = 0;  // clockwise rotation in multiples of 90 degrees
  double noise_sigma = 0;  // Gaussian, intensity units in [0, 1]

  /// Train-time draw: random flips, rotation and light noise, no crop.
  static AugmentSpec random(Rng& rng, double noise_sigma = 0.02) {
    AugmentSpec a;
    a.mirror_horizontal = rng.bernoulli(0.5);
    a.mirror_vertical = rng.bernoulli(0.5);
    a.quarter_turns = static_cast<int>(rng.uniform_int(0, 3));
    a.noise_sigma = noise_sigma;
    return a;
  }
};

inline Sample mirror_horizontal(const Sample& s) {
  Sample o = s;
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) {
      o.image[y * s.width + x] = s.image[y * s.width + (s.width - 1 - x)];
      o.mask[y * s.width + x] = s.mask[y * s.width + (s.width - 1 - x)];
    }
  return o;
}

inline Sample mirror_vertical(const Sample& s) {
  Sample o = s;
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) {
      o.image[y * s.width + x] = s.image[(s.height - 1 - y) * s.width + x];
      o.mask[y * s.width + x] = s.mask[(s.height - 1 - y) * s.width + x];
    }
  return o;
}

/// 90 degrees clockwise: source (x, y) lands at (H - 1 - y, x).
inline Sample rotate90(const Sample& s) {
  Sample o{s.height, s.width, std::vector<std::uint8_t>(s.image.size()), std::vector<std::uint8_t>(s.mask.size())};
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) {
      const std::size_t dst = x * o.width + (s.height - 1 - y);
      o.image[dst] = s.image[y * s.width + x];
      o.mask[dst] = s.mask[y * s.width + x];
    }
  return o;
}

inline Sample crop(const Sample& s, std::size_t left, std::size_t top, std::size_t width, std::size_t height) {
  if (left + width > s.width || top + height > s.height)
    throw std::invalid_argument("crop: window " + std::to_string(width) + "x" + std::to_string(height) + "+" +
                                std::to_string(left) + "+" + std::to_string(top) + " exceeds " +
                                std::to_string(s.width) + "x" + std::to_string(s.height));
  Sample o{width, height, std::vector<std::uint8_t>(width * height), std::vector<std::uint8_t>(width * height)};
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x) {
      o.image[y * width + x] = s.image[(top + y) * s.width + left + x];
      o.mask[y * width + x] = s.mask[(top + y) * s.width + left + x];
    }
  return o;
}

/// Crop, mirror, rotate, then noise. Geometry hits image and mask alike; noise only the image.
inline Sample augment(const Sample& s, const AugmentSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  Sample o = s;
  if (spec.crop) {
    const auto& c = *spec.crop;
    if (c.width > s.width || c.height > s.height)
      throw std::invalid_argument("augment: crop " + std::to_string(c.width) + "x" + std::to_string(c.height) +
                                  " larger than source " + std::to_string(s.width) + "x" +
                                  std::to_string(s.height));
    std::size_t left = (s.width - c.width) / 2, top = (s.height - c.height) / 2;
    if (c.random_offset) {
      left = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(s.width - c.width)));
      top = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(s.height - c.height)));
    }
    o = crop(o, left, top, c.width, c.height);
  }
  if (spec.mirror_horizontal) o = mirror_horizontal(o);
  if (spec.mirror_vertical) o = mirror_vertical(o);
  for (int i = 0; i < ((spec.quarter_turns % 4) + 4) % 4; ++i) o = rotate90(o);
  if (spec.noise_sigma > 0) {
    for (auto& px : o.image) {
      const double v = static_cast<double>(px) / 255.0 + spec.noise_sigma * rng.normal();
      px = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  return o;
}

// ---------------------------------------------------------------------------
// Files
// ---------------------------------------------------------------------------

inline void save_sample(const Sample& s, const std::string& image_path, const std::string& mask_path) {
  write_file(image_path, encode_pgm({s.width, s.height, 255, s.image}));
  write_file(mask_path, encode_pgm({s.width, s.height, static_cast<unsigned>(kNumClasses - 1), s.mask}));
}

inline Sample decode_sample(const std::string& image_bytes, const std::string& mask_bytes) {
  GrayImage img = decode_pgm(image_bytes);
  GrayImage mask = decode_pgm(mask_bytes);
  if (img.width != mask.width || img.height != mask.height)
    throw FormatError("sample: mask " + std::to_string(mask.width) + "x" + std::to_string(mask.height) +
                          " does not match image " + std::to_string(img.width) + "x" + std::to_string(img.height),
                      0);
  const std::size_t payload = mask_bytes.size() - mask.pixels.size();
  for (std::size_t i = 0; i < mask.pixels.size(); ++i)
    if (mask.pixels[i] >= kNumClasses)
      throw FormatError("mask: class id " + std::to_string(mask.pixels[i]) + " outside 0..5", payload + i);
  if (img.maxval != 255) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>((p * 255u + img.maxval / 2) / img.maxval);
  }
  return {img.width, img.height, std::move(img.pixels), std::move(mask.pixels)};
}

inline Sample load_sample(const std::string& image_path, const std::string& mask_path) {
  return decode_sample(read_file(image_path), read_file(mask_path));
}

// ---------------------------------------------------------------------------
// K-fold splits
// ---------------------------------------------------------------------------

struct FoldSplit {
  std::vector<std::vector<std::size_t>> folds;  // positions into the id list

  std::size_t k() const { return folds.size(); }
  std::vector<std::size_t> validation(std::size_t fold) const { return folds.at(fold); }
  std::vector<std::size_t> training(std::size_t fold) const {
    std::vector<std::size_t> out;
    for (std::size_t f = 0; f < folds.size(); ++f)
      if (f != fold) out.insert(out.end(), folds[f].begin(), folds[f].end());
    std::sort(out.begin(), out.end());
    return out;
  }
};

/// Seeded Fisher-Yates shuffle, then round-robin assignment.
inline FoldSplit kfold_split(std::size_t count, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw std::invalid_argument("kfold_split: K must be at least 2, got " + std::to_string(k));
  if (count < k)
    throw std::invalid_argument("kfold_split: " + std::to_string(count) + " ids cannot fill " + std::to_string(k) +
                                " folds");
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = count; i-- > 1;) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)));
    std::swap(order[i], order[j]);
  }
  FoldSplit split;
  split.folds.resize(k);
  for (std::size_t i = 0; i < count; ++i) split.folds[i % k].push_back(order[i]);
  for (auto& f : split.folds) std::sort(f.begin(), f.end());
  return split;
}

// ---------------------------------------------------------------------------
// Dataset directory: images/<id>.pgm, masks/<id>.pgm, splits/fold<k>.txt,
// manifest.txt ("<id> <width> <height>" per line).
// ---------------------------------------------------------------------------

inline std::string sample_id(std::size_t index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", index);
  return buf;
}

struct DatasetEntry {
  std::string id;
  std::size_t width = 0, height = 0;
};

class Dataset {
 public:
  explicit Dataset(std::filesystem::path root) : root_(std::move(root)) {
    std::ifstream f(root_ / "manifest.txt");
    if (!f) throw std::runtime_error("dataset: missing manifest " + (root_ / "manifest.txt").string());
    DatasetEntry e;
    while (f >> e.id >> e.width >> e.height) entries_.push_back(e);
  }

  const std::filesystem::path& root() const { return root_; }
  const std::vector<DatasetEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  Sample load(const std::string& id) const {
    const auto img = root_ / "images" / (id + ".pgm");
    const auto mask = root_ / "masks" / (id + ".pgm");
    if (!std::filesystem::exists(img) || !std::filesystem::exists(mask))
      throw std::runtime_error("dataset: missing sample files for id " + id);
    return load_sample(img.string(), mask.string());
  }

  std::optional<std::size_t> index_of(const std::string& id) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].id == id) return i;
    return std::nullopt;
  }

 private:
  std::filesystem::path root_;
  std::vector<DatasetEntry> entries_;
};

inline std::vector<std::string> read_id_list(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open id list " + path);
  std::vector<std::string> ids;
  std::string id;
  while (f >> id) ids.push_back(id);
  return ids;
}

struct GenerateOptions {
  std::size_t n = 200;
  std::size_t size = 64;
  std::uint64_t seed = 0;
  std::size_t folds = 5;
};

/// Writes the dataset directory; returns the manifest entries.
inline std::vector<DatasetEntry> generate_dataset(const GenerateOptions& opt, const std::filesystem::path& out) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out / "images", ec);
  fs::create_directories(out / "masks", ec);
  fs::create_directories(out / "splits", ec);
  if (ec || !fs::is_directory(out / "images") || !fs::is_directory(out / "masks"))
    throw std::runtime_error("generate_dataset: cannot create directories under " + out.string());

  std::vector<DatasetEntry> entries;
  std::ostringstream manifest;
  for (std::size_t i = 0; i < opt.n; ++i) {
    const Sample s = generate_sample(opt.size, opt.seed, i);
    const std::string id = sample_id(i);
    save_sample(s, (out / "images" / (id + ".pgm")).string(), (out / "masks" / (id + ".pgm")).string());
    manifest << id << ' ' << s.width << ' ' << s.height << '\n';
    entries.push_back({id, s.width, s.height});
  }
  write_file((out / "manifest.txt").string(), manifest.str());
  if (opt.n >= opt.folds && opt.folds >= 2) {
    const FoldSplit split = kfold_split(opt.n, opt.folds, opt.seed);
    for (std::size_t k = 0; k < split.k(); ++k) {
      std::ostringstream f;
      for (std::size_t i : split.folds[k]) f << entries[i].id << '\n';
      write_file((out / "splits" / ("fold" + std::to_string(k) + ".txt")).string(), f.str());
    }
  }
  return entries;
}

}  // namespace segnet
