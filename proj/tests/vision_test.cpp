#include <gtest/gtest.h>

#include <cmath>

#include "bilevel/autograd.hpp"
#include "bilevel/checks.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/vision.hpp"

using namespace bilevel;

namespace {

Tensor random_image(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0) { return checks::random_tensor(s, rng, lo, hi); }

Tensor ramp(std::size_t h, std::size_t w) {
  std::vector<double> v(h * w);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) v[i * w + j] = static_cast<double>(j + 1);
  return Tensor::constant({1, 1, h, w}, std::move(v));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double e = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) e = std::max(e, std::abs(a[i] - b[i]));
  return e;
}

}  // namespace

TEST(AffineGrid, IdentityCornersOnThreeByThree) {
  const Tensor g = affine_grid(AffineMatrix::identity(), 3, 3);
  ASSERT_EQ(g.shape(), (Shape{1, 3, 3, 2}));
  EXPECT_EQ(g[0], -1.0);
  EXPECT_EQ(g[1], -1.0);
  EXPECT_EQ(g[4 * 2 + 0], 0.0);
  EXPECT_EQ(g[4 * 2 + 1], 0.0);
  EXPECT_EQ(g[8 * 2 + 0], 1.0);
  EXPECT_EQ(g[8 * 2 + 1], 1.0);
}

TEST(AffineGrid, TranslationShiftsEveryX) {
  const Tensor id = affine_grid(AffineMatrix::identity(), 4, 5);
  const Tensor g = affine_grid(AffineMatrix::translation(0.5, 0.0), 4, 5);
  for (std::size_t k = 0; k < g.size(); k += 2) {
    EXPECT_DOUBLE_EQ(g[k], id[k] + 0.5);
    EXPECT_DOUBLE_EQ(g[k + 1], id[k + 1]);
  }
}

TEST(AffineGrid, SumGradientWrtTranslationCountsCells) {
  Tape tape;
  const Tensor theta = tape.parameter(AffineMatrix::identity().as_tensor());
  const Tensor g = affine_grid(theta, 4, 4);
  const Tensor gx = slice(g, 3, 0, 1);
  const Tensor d = backward(sum(gx), {theta})[theta];
  EXPECT_DOUBLE_EQ(d[2], 16.0);
  EXPECT_THROW(affine_grid(AffineMatrix::identity(), 1, 4), ShapeError);
}

TEST(GridSample, IdentityGridIsExact) {
  Rng rng(1, 0);
  const Tensor img = random_image({2, 3, 5, 7}, rng);
  const Tensor out = apply_affine(img, AffineMatrix::identity().as_tensor());
  EXPECT_EQ(out.values(), img.values());
}

TEST(GridSample, OnePixelTranslationShiftsRamp) {
  const std::size_t w = 5;
  const Tensor img = ramp(3, w);
  const Tensor out = apply_affine(img, AffineMatrix::translation(2.0 / static_cast<double>(w - 1), 0.0).as_tensor());
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double expected = j + 1 < w ? img[i * w + j + 1] : 0.0;
      EXPECT_NEAR(out[i * w + j], expected, 1e-12) << i << "," << j;
    }
  }
}

TEST(GridSample, LinearInImage) {
  Rng rng(2, 0);
  const Tensor a = random_image({2, 1, 4, 6}, rng), b = random_image({2, 1, 4, 6}, rng);
  const Tensor grid = checks::random_tensor({2, 4, 6, 2}, rng, -1.3, 1.3);
  const Tensor lhs = grid_sample_bilinear(add(scale(a, 0.7), scale(b, -1.9)), grid);
  const Tensor rhs = add(scale(grid_sample_bilinear(a, grid), 0.7), scale(grid_sample_bilinear(b, grid), -1.9));
  EXPECT_LE(max_abs_diff(lhs, rhs), 1e-12);
}

TEST(GridSample, TranslationsCompose) {
  Rng rng(3, 0);
  const std::size_t h = 9, w = 9;
  const Tensor img = random_image({1, 1, h, w}, rng);
  const double unit = 2.0 / static_cast<double>(w - 1);
  const Tensor twice = apply_affine(apply_affine(img, AffineMatrix::translation(unit, 0).as_tensor()),
                                    AffineMatrix::translation(2 * unit, unit).as_tensor());
  const Tensor once = apply_affine(img, AffineMatrix::translation(3 * unit, unit).as_tensor());
  // Interior region that never sampled outside the image.
  for (std::size_t i = 0; i + 2 < h; ++i)
    for (std::size_t j = 0; j + 4 < w; ++j) EXPECT_NEAR(twice[i * w + j], once[i * w + j], 1e-10);
}

TEST(GridSample, RejectsMismatchedGrid) {
  EXPECT_THROW(grid_sample_bilinear(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 4, 5, 2})), ShapeError);
}

TEST(GridSample, GradientsMatchFiniteDifferences) {
  checks::GradcheckOptions opt;
  for (const auto& c : checks::transform_cases()) {
    const auto r = checks::run_case(c, opt);
    EXPECT_TRUE(r.passed) << r.name << " max error " << r.max_error;
  }
}

TEST(Color, ZeroParamsAreIdentity) {
  Rng rng(4, 0);
  const Tensor img = random_image({3, 3, 4, 4}, rng);
  EXPECT_EQ(apply_color(img, ColorParams{}).values(), img.values());
}

TEST(Color, BrightnessIsAdditive) {
  const Tensor img = Tensor::full({1, 3, 2, 2}, 0.25);
  const Tensor out = apply_color(img, ColorParams(0, 0, 0, 0.5));
  for (double v : out.values()) EXPECT_DOUBLE_EQ(v, 0.75);
}

TEST(Color, HueRoundTrip) {
  Rng rng(5, 0);
  const Tensor img = random_image({2, 3, 3, 3}, rng);
  const Tensor h = Tensor::constant({2}, {0.17, -0.31});
  const Tensor back = adjust_hue(adjust_hue(img, h), scale(h, -1.0));
  EXPECT_LE(max_abs_diff(back, img), 1e-10);
}

TEST(Color, HuePreservesLuma) {
  Rng rng(6, 0);
  const Tensor img = random_image({2, 3, 3, 3}, rng);
  const Tensor rotated = adjust_hue(img, Tensor::constant({2}, {0.25, 0.4}));
  EXPECT_LE(max_abs_diff(luma(rotated), luma(img)), 1e-12);
}

TEST(Color, RangeChecksAndChannelCount) {
  EXPECT_THROW(ColorParams(0.6, 0, 0, 0), Error);
  EXPECT_THROW(ColorParams(0, -0.1, 0, 0), Error);
  EXPECT_THROW(ColorParams(0, 0, 1.5, 0), Error);
  EXPECT_THROW(ColorParams(0, 0, 0, 1.1), Error);
  EXPECT_THROW(apply_color(Tensor::zeros({1, 1, 3, 3}), ColorParams{}), ShapeError);
}

TEST(Color, OutputIsClamped) {
  const Tensor img = Tensor::full({1, 3, 2, 2}, 0.9);
  const Tensor out = apply_color(img, ColorParams(0, 0, 0, 1.0));
  for (double v : out.values()) EXPECT_EQ(v, 1.0);
}

TEST(Augment, DisabledStagesAreIdentity) {
  Rng rng(7, 0);
  const Tensor img = random_image({2, 3, 4, 4}, rng);
  const Tensor theta = AffineMatrix::translation(0.3, 0.1).as_tensor();
  const Tensor color = ColorParams(0.1, 0.2, 0.3, 0.1).as_tensor();
  EXPECT_EQ(apply_augment(img, theta, color, {false, false}).values(), img.values());
  EXPECT_EQ(apply_augment(img, theta, color, {true, false}).values(),
            grid_sample_bilinear(img, affine_grid(broadcast_to(theta, {2, 6}), 4, 4)).values());
  EXPECT_EQ(apply_augment(img, AffineMatrix::identity().as_tensor(), ColorParams{}.as_tensor(), {true, true}).values(),
            img.values());
}

TEST(Augment, FullPipelineGradientAllTenParameters) {
  Rng rng(8, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor img = random_image({1, 3, 5, 5}, rng, 0.2, 0.8);
    const Tensor color = checks::smooth_color(img, rng, 1e-3);
    const Tensor theta = checks::smooth_affine(1, 5, 5, rng, 1e-3);
    const Tensor params = concat({theta, color}, 1);
    auto fn = [&](const std::vector<Tensor>& x) {
      return apply_augment(img, slice(x[0], 1, 0, 6), slice(x[0], 1, 6, 10), {true, true});
    };
    EXPECT_LE(checks::vjp_error(fn, {params}, rng, 1e-5), 1e-4);
  }
}

TEST(Flip, ZeroProbabilityAndInvolution) {
  Rng rng(9, 0);
  const Tensor img = random_image({4, 1, 3, 5}, rng);
  EXPECT_EQ(random_flip(img, FlipAxis::horizontal, rng, 0.0).values(), img.values());
  const std::vector<bool> mask{true, false, true, true};
  EXPECT_EQ(flip(flip(img, FlipAxis::vertical, mask), FlipAxis::vertical, mask).values(), img.values());
}

TEST(Flip, ReversesRampColumns) {
  const Tensor img = ramp(2, 4);
  const Tensor f = flip(img, FlipAxis::horizontal, {true});
  EXPECT_EQ(f.values(), (std::vector<double>{4, 3, 2, 1, 4, 3, 2, 1}));
}
