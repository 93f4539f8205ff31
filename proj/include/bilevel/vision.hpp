#pragma once

// Differentiable image transformations: affine warping through a normalized
// sampling grid with bilinear interpolation, and hue/saturation/contrast/
// brightness color operators. Images are (batch, channels, height, width).

#include <array>
#include <cmath>
#include <memory>
#include <numbers>
#include <vector>

#include "bilevel/ops.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/tensor.hpp"

namespace bilevel {

/// 2x3 matrix [[a, b, tx], [c, d, ty]] acting on normalized (x, y, 1).
struct AffineMatrix {
  std::array<double, 6> m{1.0, 0.0, 0.0, 0.0, 1.0, 0.0};

  static AffineMatrix identity() { return {}; }
  static AffineMatrix translation(double tx, double ty) { return {{1.0, 0.0, tx, 0.0, 1.0, ty}}; }

  double determinant() const { return m[0] * m[4] - m[1] * m[3]; }

  /// As a (1, 6) tensor, the batched layout used by affine_grid.
  Tensor as_tensor() const { return Tensor::constant({1, 6}, {m.begin(), m.end()}); }
};

/// Color amplitudes; all zeros is the identity.
class ColorParams {
 public:
  ColorParams() = default;
  ColorParams(double hue, double saturation, double contrast, double brightness)
      : v_{hue, saturation, contrast, brightness} {
    check(hue, -0.5, 0.5, "hue");
    check(saturation, 0.0, 1.0, "saturation");
    check(contrast, -1.0, 1.0, "contrast");
    check(brightness, 0.0, 1.0, "brightness");
  }

  double hue() const { return v_[0]; }
  double saturation() const { return v_[1]; }
  double contrast() const { return v_[2]; }
  double brightness() const { return v_[3]; }

  Tensor as_tensor() const { return Tensor::constant({1, 4}, {v_.begin(), v_.end()}); }

 private:
  static void check(double v, double lo, double hi, const char* name) {
    if (!(v >= lo && v <= hi)) {
      throw Error(std::string("ColorParams: ") + name + " = " + std::to_string(v) + " outside [" +
                  std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
  }
  std::array<double, 4> v_{0.0, 0.0, 0.0, 0.0};
};

namespace detail {

inline void require_image(const Tensor& img, const char* op) {
  if (img.rank() != 4) throw ShapeError(std::string(op) + ": expected (N,C,H,W) image, got " + to_string(img.shape()));
  const std::size_t c = img.dim(1);
  if (c != 1 && c != 3) throw ShapeError(std::string(op) + ": channel count must be 1 or 3");
}

// Corner-aligned normalized coordinate of pixel k along an axis of `size`.
inline double normalized_coord(std::size_t k, std::size_t size) {
  return 2.0 * static_cast<double>(k) / static_cast<double>(size - 1) - 1.0;
}

// (H, W) constant of normalized x (per column) or y (per row).
inline Tensor base_coords(std::size_t h, std::size_t w, bool x_axis) {
  std::vector<double> v(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) v[i * w + j] = x_axis ? normalized_coord(j, w) : normalized_coord(i, h);
  return Tensor::constant({h, w}, std::move(v));
}

inline Tensor pixel_coords(std::size_t h, std::size_t w, bool x_axis) {
  std::vector<double> v(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) v[i * w + j] = static_cast<double>(x_axis ? j : i);
  return Tensor::constant({h, w}, std::move(v));
}

inline Tensor column(const Tensor& t, std::size_t k, std::size_t batch) {
  return reshape(slice(t, 1, k, k + 1), {batch, 1, 1});
}

// RGB -> YIQ and its exact numerical inverse.
struct YiqBasis {
  std::array<std::array<double, 3>, 3> fwd{{{0.299, 0.587, 0.114}, {0.596, -0.274, -0.322}, {0.211, -0.523, 0.312}}};
  std::array<std::array<double, 3>, 3> inv{};

  YiqBasis() {
    const auto& a = fwd;
    const double det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
                       a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
                       a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) {
        const int r0 = (j + 1) % 3, r1 = (j + 2) % 3, c0 = (i + 1) % 3, c1 = (i + 2) % 3;
        inv[i][j] = (a[r0][c0] * a[r1][c1] - a[r0][c1] * a[r1][c0]) / det;
      }
    }
  }
};

inline const YiqBasis& yiq() {
  static const YiqBasis basis;
  return basis;
}

inline Tensor channel_mix(const std::array<Tensor, 3>& ch, const std::array<double, 3>& w) {
  return add(add(scale(ch[0], w[0]), scale(ch[1], w[1])), scale(ch[2], w[2]));
}

inline Tensor per_image(const Tensor& params, std::size_t k, std::size_t batch) {
  return reshape(slice(params, 1, k, k + 1), {batch, 1, 1, 1});
}

}  // namespace detail

/// Sampling grid (N, H, W, 2) for a batch of affine matrices given as (N, 6)
/// rows [a, b, tx, c, d, ty]. grid[n,i,j] = M_n (x_j, y_i, 1) with
/// corner-aligned coordinates x_j = 2j/(W-1) - 1, y_i = 2i/(H-1) - 1.
inline Tensor affine_grid(const Tensor& theta, std::size_t height, std::size_t width) {
  if (height < 2 || width < 2) throw ShapeError("affine_grid: height and width must be at least 2");
  if (theta.rank() != 2 || theta.dim(1) != 6) {
    throw ShapeError("affine_grid: expected (N,6) matrices, got " + to_string(theta.shape()));
  }
  const std::size_t n = theta.dim(0);
  const Tensor xs = detail::base_coords(height, width, true);
  const Tensor ys = detail::base_coords(height, width, false);
  auto row = [&](std::size_t k) {
    const Tensor lin = add(mul(detail::column(theta, k, n), xs), mul(detail::column(theta, k + 1, n), ys));
    return reshape(add(lin, detail::column(theta, k + 2, n)), {n, height, width, 1});
  };
  return concat({row(0), row(3)}, 3);
}

inline Tensor affine_grid(const AffineMatrix& mat, std::size_t height, std::size_t width) {
  return affine_grid(mat.as_tensor(), height, width);
}

/// Bilinear sampling of `img` at `grid` (N, H, W, 2). Grid coordinates map to
/// pixels via p = (g + 1)/2 (size - 1); samples outside the image read zero.
/// Differentiable with respect to both the image and the grid.
inline Tensor grid_sample_bilinear(const Tensor& img, const Tensor& grid) {
  detail::require_image(img, "grid_sample_bilinear");
  const std::size_t n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
  if (grid.shape() != Shape{n, h, w, 2}) {
    throw ShapeError("grid_sample_bilinear: grid " + to_string(grid.shape()) + " does not match image " +
                     to_string(img.shape()));
  }
  if (h < 2 || w < 2) throw ShapeError("grid_sample_bilinear: image too small");

  // Pixel coordinates written as base pixel + scaled offset from the identity
  // grid, so an identity grid lands exactly on pixel centers.
  auto to_pixels = [&](std::size_t axis, bool x_axis) {
    const Tensor g = reshape(slice(grid, 3, axis, axis + 1), {n, h, w});
    const double half = 0.5 * static_cast<double>((x_axis ? w : h) - 1);
    return add(scale(sub(g, detail::base_coords(h, w, x_axis)), half), detail::pixel_coords(h, w, x_axis));
  };
  const Tensor px = to_pixels(0, true);
  const Tensor py = to_pixels(1, false);

  const std::size_t plane = h * w;
  std::vector<double> fx0(n * plane), fy0(n * plane);
  std::vector<long long> ix0(n * plane), iy0(n * plane);
  for (std::size_t k = 0; k < n * plane; ++k) {
    fx0[k] = std::floor(px[k]);
    fy0[k] = std::floor(py[k]);
    ix0[k] = static_cast<long long>(fx0[k]);
    iy0[k] = static_cast<long long>(fy0[k]);
  }
  const Tensor fx = sub(px, Tensor::constant({n, h, w}, std::move(fx0)));
  const Tensor fy = sub(py, Tensor::constant({n, h, w}, std::move(fy0)));
  const Tensor gx = add_scalar(neg(fx), 1.0);
  const Tensor gy = add_scalar(neg(fy), 1.0);

  auto corner = [&](int dy, int dx) {
    auto idx = std::make_shared<std::vector<std::int64_t>>(n * c * plane);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t p = 0; p < plane; ++p) {
          const long long x = ix0[b * plane + p] + dx;
          const long long y = iy0[b * plane + p] + dy;
          const bool inside = x >= 0 && y >= 0 && x < static_cast<long long>(w) && y < static_cast<long long>(h);
          (*idx)[(b * c + ch) * plane + p] =
              inside ? static_cast<std::int64_t>(((b * c + ch) * h + static_cast<std::size_t>(y)) * w +
                                                 static_cast<std::size_t>(x))
                     : -1;
        }
      }
    }
    const Tensor vals = gather(img, std::move(idx), img.shape());
    const Tensor weight = mul(dy ? fy : gy, dx ? fx : gx);
    return mul(vals, reshape(weight, {n, 1, h, w}));
  };
  return add(add(add(corner(0, 0), corner(0, 1)), corner(1, 0)), corner(1, 1));
}

/// Hue as a rotation of the YIQ chroma plane by 2*pi*hue.
inline Tensor adjust_hue(const Tensor& img, const Tensor& hue) {
  const std::size_t n = img.dim(0);
  const auto& basis = detail::yiq();
  const std::array<Tensor, 3> ch{slice(img, 1, 0, 1), slice(img, 1, 1, 2), slice(img, 1, 2, 3)};
  const Tensor ci = detail::channel_mix(ch, basis.fwd[1]);
  const Tensor cq = detail::channel_mix(ch, basis.fwd[2]);
  const Tensor angle = scale(reshape(hue, {n, 1, 1, 1}), 2.0 * std::numbers::pi);
  const Tensor cos_m1 = add_scalar(cos(angle), -1.0);
  const Tensor s = sin(angle);
  // Rotation minus identity, so zero hue adds exact zeros.
  const Tensor di = sub(mul(ci, cos_m1), mul(cq, s));
  const Tensor dq = add(mul(ci, s), mul(cq, cos_m1));
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < 3; ++k) {
    out.push_back(add(ch[k], add(scale(di, basis.inv[k][1]), scale(dq, basis.inv[k][2]))));
  }
  return concat(out, 1);
}

inline Tensor luma(const Tensor& img) {
  const std::array<Tensor, 3> ch{slice(img, 1, 0, 1), slice(img, 1, 1, 2), slice(img, 1, 2, 3)};
  return detail::channel_mix(ch, detail::yiq().fwd[0]);
}

/// out = img + s (img - gray), gray = per-pixel luma.
inline Tensor adjust_saturation(const Tensor& img, const Tensor& s) {
  const std::size_t n = img.dim(0);
  return add(img, mul(reshape(s, {n, 1, 1, 1}), sub(img, luma(img))));
}

/// out = img + c (img - m), m = per-image mean luma.
inline Tensor adjust_contrast(const Tensor& img, const Tensor& c) {
  const std::size_t n = img.dim(0);
  const double inv_area = 1.0 / static_cast<double>(img.dim(2) * img.dim(3));
  const Tensor m = scale(sum_to(luma(img), {n, 1, 1, 1}), inv_area);
  return add(img, mul(reshape(c, {n, 1, 1, 1}), sub(img, m)));
}

inline Tensor adjust_brightness(const Tensor& img, const Tensor& b) {
  return add(img, reshape(b, {img.dim(0), 1, 1, 1}));
}

/// Applies hue -> saturation -> contrast -> brightness, then clamps to [0,1].
/// `params` is (N, 4) or (1, 4) rows [hue, saturation, contrast, brightness].
inline Tensor apply_color(const Tensor& img, const Tensor& params) {
  detail::require_image(img, "apply_color");
  if (img.dim(1) != 3) throw ShapeError("apply_color: requires a 3-channel image");
  const std::size_t n = img.dim(0);
  Tensor p = params;
  if (p.rank() != 2 || p.dim(1) != 4) throw ShapeError("apply_color: expected (N,4) parameters");
  if (p.dim(0) == 1 && n != 1) p = broadcast_to(p, {n, 4});
  if (p.dim(0) != n) throw ShapeError("apply_color: parameter batch does not match image batch");
  auto col = [&](std::size_t k) { return reshape(slice(p, 1, k, k + 1), {n}); };
  Tensor out = adjust_hue(img, col(0));
  out = adjust_saturation(out, col(1));
  out = adjust_contrast(out, col(2));
  out = adjust_brightness(out, col(3));
  return clamp(out, 0.0, 1.0);
}

inline Tensor apply_color(const Tensor& img, const ColorParams& p) { return apply_color(img, p.as_tensor()); }

/// Warps `img` by per-image affine matrices (N, 6) or a shared (1, 6) matrix.
inline Tensor apply_affine(const Tensor& img, const Tensor& theta) {
  detail::require_image(img, "apply_affine");
  Tensor t = theta;
  if (t.rank() == 2 && t.dim(0) == 1 && img.dim(0) != 1) t = broadcast_to(t, {img.dim(0), 6});
  return grid_sample_bilinear(img, affine_grid(t, img.dim(2), img.dim(3)));
}

struct TransformFlags {
  bool affine = false;
  bool color = false;
};

/// Color first, then the affine warp; disabled stages are the identity.
inline Tensor apply_augment(const Tensor& img, const Tensor& theta, const Tensor& color, TransformFlags flags) {
  Tensor out = img;
  if (flags.color) out = apply_color(out, color);
  if (flags.affine) out = apply_affine(out, theta);
  return out;
}

enum class FlipAxis { horizontal, vertical };

/// Mirrors the selected batch elements. Operates on values only.
inline Tensor flip(const Tensor& img, FlipAxis axis, const std::vector<bool>& mask) {
  detail::require_image(img, "flip");
  const std::size_t n = img.dim(0), c = img.dim(1), h = img.dim(2), w = img.dim(3);
  if (mask.size() != n) throw ShapeError("flip: mask size does not match batch");
  std::vector<double> v = img.values();
  for (std::size_t b = 0; b < n; ++b) {
    if (!mask[b]) continue;
    for (std::size_t ch = 0; ch < c; ++ch) {
      double* plane = &v[(b * c + ch) * h * w];
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          const std::size_t si = axis == FlipAxis::vertical ? h - 1 - i : i;
          const std::size_t sj = axis == FlipAxis::horizontal ? w - 1 - j : j;
          plane[i * w + j] = img[(b * c + ch) * h * w + si * w + sj];
        }
      }
    }
  }
  return Tensor::constant(img.shape(), std::move(v));
}

/// Flips each batch element independently with probability `p`. Not
/// differentiable; applied outside the learned pipeline.
inline Tensor random_flip(const Tensor& img, FlipAxis axis, Rng& rng, double p = 0.5) {
  std::vector<bool> mask(img.dim(0));
  for (std::size_t b = 0; b < mask.size(); ++b) mask[b] = p > 0.0 && rng.bernoulli(p);
  return flip(img, axis, mask);
}

}  // namespace bilevel
