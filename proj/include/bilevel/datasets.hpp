#pragma once

// Synthetic tasks with known invariances and the BLVT tensor container.
//
// BLVT layout (all integers little-endian):
//   "BLVT" | version u32 | entry count u32 |
//   per entry: name length u16 | name bytes | rank u8 | dims u64 x rank |
//              payload f64 x prod(dims)

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bilevel/rng.hpp"
#include "bilevel/tensor.hpp"
#include "bilevel/vision.hpp"

namespace bilevel {

class FormatError : public Error {
 public:
  using Error::Error;
};

struct Dataset {
  Tensor images;  // (N, C, H, W), values in [0, 1]
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  // Per-image ground truth of the applied test-time transformation.
  std::vector<std::array<int, 2>> offsets;  // (dx, dy) pixels, translated_glyphs
  std::vector<double> hues;                 // hue_shifted_blobs
  Tensor sources;                           // images before the transformation

  std::size_t size() const { return labels.size(); }

  /// Images and labels of the given rows, in order.
  std::pair<Tensor, std::vector<std::size_t>> batch(const std::vector<std::size_t>& rows) const {
    const Shape& s = images.shape();
    const std::size_t per = s[1] * s[2] * s[3];
    std::vector<double> v(rows.size() * per);
    std::vector<std::size_t> y(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      std::copy_n(images.values().begin() + static_cast<std::ptrdiff_t>(rows[k] * per), per,
                  v.begin() + static_cast<std::ptrdiff_t>(k * per));
      y[k] = labels.at(rows[k]);
    }
    return {Tensor::constant({rows.size(), s[1], s[2], s[3]}, std::move(v)), std::move(y)};
  }
};

enum class TaskKind { translated_glyphs, hue_shifted_blobs };

inline const char* to_string(TaskKind k) {
  return k == TaskKind::translated_glyphs ? "translated_glyphs" : "hue_shifted_blobs";
}

struct SyntheticTaskSpec {
  TaskKind task = TaskKind::translated_glyphs;
  std::size_t image_size = 16;
  std::size_t num_classes = 4;
  double train_range = 0.0;  // pixels (glyphs) or hue units (blobs)
  double test_range = 3.0;
  std::size_t samples_per_class = 64;
  std::size_t test_samples_per_class = 64;
  double noise_sigma = 0.05;

  std::size_t channels() const { return task == TaskKind::translated_glyphs ? 1 : 3; }

  void validate() const {
    if (image_size < 8) throw Error("image_size must be at least 8");
    if (num_classes < 2) throw Error("num_classes must be at least 2");
    if (samples_per_class == 0 || test_samples_per_class == 0) throw Error("samples per class must be positive");
    if (train_range < 0.0 || test_range < 0.0) throw Error("transform ranges must be non-negative");
    if (test_range < train_range) throw Error("test range must contain the train range");
    if (!(noise_sigma >= 0.0)) throw Error("noise_sigma must be non-negative");
  }
};

inline constexpr std::size_t kGlyphBox = 8;
inline constexpr std::size_t kGlyphCount = 6;

/// Binary 8x8 glyph for class k: cross, square, diagonal, T, L, X.
inline std::array<std::array<double, kGlyphBox>, kGlyphBox> glyph(std::size_t k) {
  std::array<std::array<double, kGlyphBox>, kGlyphBox> g{};
  for (std::size_t i = 0; i < kGlyphBox; ++i) {
    for (std::size_t j = 0; j < kGlyphBox; ++j) {
      bool on = false;
      switch (k) {
        case 0: on = i == 3 || i == 4 || j == 3 || j == 4; break;
        case 1: on = i == 0 || i == 7 || j == 0 || j == 7; break;
        case 2: on = i == j || i == j + 1; break;
        case 3: on = i <= 1 || j == 3 || j == 4; break;
        case 4: on = j <= 1 || i >= 6; break;
        case 5: on = i == j || i + j == 7; break;
        default: throw Error("no glyph for class " + std::to_string(k));
      }
      g[i][j] = on ? 1.0 : 0.0;
    }
  }
  return g;
}

namespace detail {

// Integer shift with zero fill: out[i][j] = in[i - dy][j - dx].
inline void shift_plane(const double* in, double* out, std::size_t h, std::size_t w, int dx, int dy) {
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const long long si = static_cast<long long>(i) - dy, sj = static_cast<long long>(j) - dx;
      const bool inside = si >= 0 && sj >= 0 && si < static_cast<long long>(h) && sj < static_cast<long long>(w);
      out[i * w + j] = inside ? in[static_cast<std::size_t>(si) * w + static_cast<std::size_t>(sj)] : 0.0;
    }
  }
}

inline double noisy(double v, double sigma, Rng& rng) {
  return std::clamp(v + sigma * rng.normal(), 0.0, 1.0);
}

}  // namespace detail

/// Shifts every image of a (N,C,H,W) tensor by integer pixel offsets.
inline Tensor shift_images(const Tensor& images, const std::vector<std::array<int, 2>>& offsets) {
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  std::vector<double> v(images.size());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      detail::shift_plane(&images.values()[(b * c + ch) * h * w], &v[(b * c + ch) * h * w], h, w, offsets[b][0],
                          offsets[b][1]);
  return Tensor::constant(images.shape(), std::move(v));
}

namespace detail {

inline Dataset glyph_split(const SyntheticTaskSpec& spec, std::size_t per_class, double range, Rng& rng) {
  const std::size_t s = spec.image_size;
  const std::size_t origin = (s - kGlyphBox) / 2;
  const int r = static_cast<int>(std::floor(range));
  const std::size_t n = per_class * spec.num_classes;
  std::vector<double> src(n * s * s, 0.0);
  Dataset d;
  d.num_classes = spec.num_classes;
  for (std::size_t idx = 0; idx < n; ++idx) {
    const std::size_t cls = idx / per_class;
    const auto g = glyph(cls);
    double* plane = &src[idx * s * s];
    for (std::size_t i = 0; i < s; ++i) {
      for (std::size_t j = 0; j < s; ++j) {
        const bool in_box = i >= origin && j >= origin && i < origin + kGlyphBox && j < origin + kGlyphBox;
        const double base = in_box ? g[i - origin][j - origin] : 0.0;
        plane[i * s + j] = noisy(base, spec.noise_sigma, rng);
      }
    }
    const int dx = r > 0 ? static_cast<int>(rng.integer(-r, r)) : 0;
    const int dy = r > 0 ? static_cast<int>(rng.integer(-r, r)) : 0;
    d.offsets.push_back({dx, dy});
    d.labels.push_back(cls);
  }
  d.sources = Tensor::constant({n, 1, s, s}, std::move(src));
  d.images = shift_images(d.sources, d.offsets);
  return d;
}

inline bool blob_mask(std::size_t cls, double y, double x, double radius) {
  const double ax = std::abs(x), ay = std::abs(y);
  switch (cls) {
    case 0: return x * x + y * y <= radius * radius;
    case 1: return ax <= radius * 0.8 && ay <= radius * 0.8;
    case 2: return ax <= radius && ay <= radius * 0.35;
    case 3: return ay <= radius && ax <= radius * 0.35;
    case 4: { const double d2 = x * x + y * y; return d2 <= radius * radius && d2 >= 0.36 * radius * radius; }
    case 5: return ax + ay <= radius;
    default: throw Error("no blob shape for class " + std::to_string(cls));
  }
}

inline constexpr std::array<double, 3> kBlobColor{0.85, 0.35, 0.15};
inline constexpr double kBlobBackground = 0.1;

inline Dataset blob_split(const SyntheticTaskSpec& spec, std::size_t per_class, double range, Rng& rng) {
  const std::size_t s = spec.image_size;
  const std::size_t n = per_class * spec.num_classes;
  const double c0 = 0.5 * static_cast<double>(s - 1);
  const double radius = 0.3 * static_cast<double>(s);
  std::vector<double> src(n * 3 * s * s);
  Dataset d;
  d.num_classes = spec.num_classes;
  for (std::size_t idx = 0; idx < n; ++idx) {
    const std::size_t cls = idx / per_class;
    for (std::size_t ch = 0; ch < 3; ++ch) {
      for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t j = 0; j < s; ++j) {
          const bool on = blob_mask(cls, static_cast<double>(i) - c0, static_cast<double>(j) - c0, radius);
          const double base = on ? kBlobColor[ch] : kBlobBackground;
          src[((idx * 3) + ch) * s * s + i * s + j] = noisy(base, spec.noise_sigma, rng);
        }
      }
    }
    d.hues.push_back(range > 0.0 ? rng.uniform(-range, range) : 0.0);
    d.labels.push_back(cls);
  }
  d.sources = Tensor::constant({n, 3, s, s}, std::move(src));
  if (range > 0.0) {
    std::vector<double> p(n * 4, 0.0);
    for (std::size_t k = 0; k < n; ++k) p[k * 4] = d.hues[k];
    NoGradGuard ng;
    d.images = apply_color(d.sources, Tensor::constant({n, 4}, std::move(p)));
  } else {
    d.images = d.sources;
  }
  return d;
}

}  // namespace detail

/// One fixed glyph per class on a dark canvas. Train images are shifted by
/// up to train_range pixels, test images by up to test_range pixels (uniform
/// integer offsets on both axes). Noise is added before shifting, so each
/// image is exactly its recorded source shifted by its recorded offset.
inline std::pair<Dataset, Dataset> gen_translated_glyphs(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.num_classes > kGlyphCount) throw Error("translated_glyphs supports at most 6 classes");
  const double margin = static_cast<double>((spec.image_size - kGlyphBox) / 2);
  if (spec.test_range > margin || spec.train_range > margin) {
    throw Error("glyph out of bounds: translation range exceeds the " + std::to_string(margin) + " px margin");
  }
  Rng rng(seed, streams::dataset);
  Dataset train = detail::glyph_split(spec, spec.samples_per_class, spec.train_range, rng);
  Dataset test = detail::glyph_split(spec, spec.test_samples_per_class, spec.test_range, rng);
  return {std::move(train), std::move(test)};
}

/// One blob shape per class in a fixed base color. Train hues are rotated by
/// up to train_range, test hues by up to test_range, using the same hue
/// operator as the augmentation pipeline.
inline std::pair<Dataset, Dataset> gen_hue_shifted_blobs(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (spec.num_classes > 6) throw Error("hue_shifted_blobs supports at most 6 classes");
  if (spec.test_range > 0.5) throw Error("hue range must not exceed 0.5");
  Rng rng(seed, streams::dataset);
  Dataset train = detail::blob_split(spec, spec.samples_per_class, spec.train_range, rng);
  Dataset test = detail::blob_split(spec, spec.test_samples_per_class, spec.test_range, rng);
  return {std::move(train), std::move(test)};
}

inline std::pair<Dataset, Dataset> generate(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  return spec.task == TaskKind::translated_glyphs ? gen_translated_glyphs(spec, seed)
                                                  : gen_hue_shifted_blobs(spec, seed);
}

inline nlohmann::json manifest(const SyntheticTaskSpec& spec, std::uint64_t seed) {
  return {{"task", to_string(spec.task)},
          {"image_size", spec.image_size},
          {"num_classes", spec.num_classes},
          {"channels", spec.channels()},
          {"train_range", spec.train_range},
          {"test_range", spec.test_range},
          {"samples_per_class", spec.samples_per_class},
          {"test_samples_per_class", spec.test_samples_per_class},
          {"noise_sigma", spec.noise_sigma},
          {"seed", seed}};
}

inline constexpr std::uint32_t kBlvtVersion = 1;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(T);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("BLVT: truncated file");
  }
  std::string bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_tensors(const NamedTensors& entries) {
  std::set<std::string> seen;
  std::string out = "BLVT";
  detail::put_le<std::uint32_t>(out, kBlvtVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    if (!seen.insert(name).second) throw FormatError("BLVT: duplicate tensor name " + name);
    if (name.size() > 0xFFFF) throw FormatError("BLVT: name too long");
    for (char ch : name) {
      if (static_cast<unsigned char>(ch) > 0x7F) throw FormatError("BLVT: tensor names must be ASCII");
    }
    if (t.rank() > 0xFF) throw FormatError("BLVT: rank too large");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.values()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

inline NamedTensors decode_tensors(std::string bytes) {
  detail::Reader r(std::move(bytes));
  if (r.take(4) != "BLVT") throw FormatError("BLVT: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kBlvtVersion) throw FormatError("BLVT: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  NamedTensors out;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = r.get<std::uint16_t>();
    std::string name = r.take(len);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    std::size_t n = std::find(shape.begin(), shape.end(), 0) == shape.end() ? 1 : 0;
    for (auto d : shape) {
      if (n != 0 && n > r.remaining() / 8 / d) throw FormatError("BLVT: truncated file");
      n *= d;
    }
    if (n > r.remaining() / 8) throw FormatError("BLVT: truncated file");
    std::vector<double> v(n);
    for (auto& x : v) x = std::bit_cast<double>(r.get<std::uint64_t>());
    out.emplace_back(std::move(name), Tensor::constant(std::move(shape), std::move(v)));
  }
  if (!r.done()) throw FormatError("BLVT: trailing bytes");
  return out;
}

inline void save_tensors(const std::string& path, const NamedTensors& entries) {
  const std::string bytes = encode_tensors(entries);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing " + path);
}

inline NamedTensors load_tensors(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensors(std::move(bytes));
}

}  // namespace bilevel
