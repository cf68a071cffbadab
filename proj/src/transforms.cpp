#include "crossmpi/transforms.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace crossmpi {

namespace {

void require_image(const Shape& s, const char* op) {
  if (s.size() != 3) throw ShapeError(std::string(op) + ": expected a [C,H,W] image, got " + shape_str(s));
}

// Sampling grid from a map of output (row, col) to source (row, col).
template <class F>
Tensor make_grid(std::size_t rows, std::size_t cols, F&& source) {
  Tensor g({rows, cols, 2}, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const auto [sy, sx] = source(static_cast<double>(i), static_cast<double>(j));
      g[(i * cols + j) * 2] = sy;
      g[(i * cols + j) * 2 + 1] = sx;
    }
  return g;
}

template <class F>
Tensor on_scratch(const Tensor& image, F&& f) {
  Tape tape;
  return f(tape.constant(image)).value();
}

}  // namespace

Var rescale(const Var& image, double factor) {
  require_image(image.shape(), "rescale");
  if (!(factor > 0)) throw std::invalid_argument("rescale: factor must be positive");
  const std::size_t H = image.shape()[1], W = image.shape()[2];
  const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
  return grid_sample(image, make_grid(H, W, [&](double i, double j) {
                       return std::pair{cy + (i - cy) / factor, cx + (j - cx) / factor};
                     }));
}

Var rotate(const Var& image, double degrees) {
  require_image(image.shape(), "rotate");
  const std::size_t H = image.shape()[1], W = image.shape()[2];
  const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
  const double a = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  // Inverse map of a counter-clockwise rotation in (x right, y up) terms; rows grow downward.
  return grid_sample(image, make_grid(H, W, [&](double i, double j) {
                       const double dy = i - cy, dx = j - cx;
                       return std::pair{cy + c * dy - s * dx, cx + s * dy + c * dx};
                     }));
}

Tensor gaussian_kernel3(double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("gaussian_kernel3: sigma must be positive");
  Tensor k({3, 3}, 0.0);
  double total = 0;
  for (int a = -1; a <= 1; ++a)
    for (int b = -1; b <= 1; ++b) {
      const double v = std::exp(-(a * a + b * b) / (2 * sigma * sigma));
      k(static_cast<std::size_t>(a + 1), static_cast<std::size_t>(b + 1)) = v;
      total += v;
    }
  for (auto& v : k.storage()) v /= total;
  return k;
}

Var gaussian_blur(const Var& image, double sigma) {
  require_image(image.shape(), "gaussian_blur");
  return conv2d(image, image.tape().constant(gaussian_kernel3(sigma)));
}

Var resize(const Var& image, std::size_t rows, std::size_t cols) {
  require_image(image.shape(), "resize");
  if (rows == 0 || cols == 0) throw std::invalid_argument("resize: zero target size");
  const std::size_t H = image.shape()[1], W = image.shape()[2];
  const double sy = static_cast<double>(H) / static_cast<double>(rows);
  const double sx = static_cast<double>(W) / static_cast<double>(cols);
  return grid_sample(image, make_grid(rows, cols, [&](double i, double j) {
                       return std::pair{std::clamp((i + 0.5) * sy - 0.5, 0.0, static_cast<double>(H) - 1),
                                        std::clamp((j + 0.5) * sx - 0.5, 0.0, static_cast<double>(W) - 1)};
                     }));
}

Tensor rescale(const Tensor& image, double factor) {
  return on_scratch(image, [&](const Var& x) { return rescale(x, factor); });
}
Tensor rotate(const Tensor& image, double degrees) {
  return on_scratch(image, [&](const Var& x) { return rotate(x, degrees); });
}
Tensor gaussian_blur(const Tensor& image, double sigma) {
  return on_scratch(image, [&](const Var& x) { return gaussian_blur(x, sigma); });
}
Tensor resize(const Tensor& image, std::size_t rows, std::size_t cols) {
  return on_scratch(image, [&](const Var& x) { return resize(x, rows, cols); });
}

}  // namespace crossmpi
