#pragma once

#include "crossmpi/autodiff.hpp"

namespace crossmpi {

// Geometric and photometric transforms of [C,H,W] images. The Var forms are
// differentiable in the image; the Tensor forms evaluate on a scratch tape.
// Pixel centers sit at integer coordinates; the geometric center of an S-pixel
// axis is (S−1)/2.

/// Zoom about the image center by `factor` (>1 enlarges), bilinear, zero fill.
Var rescale(const Var& image, double factor);
/// Counter-clockwise rotation about the center by `degrees`, bilinear, zero fill.
Var rotate(const Var& image, double degrees);
/// Normalized 3×3 Gaussian blur, zero padded.
Var gaussian_blur(const Var& image, double sigma);
/// Bilinear resize with half-pixel alignment and edge clamping.
Var resize(const Var& image, std::size_t rows, std::size_t cols);

Tensor rescale(const Tensor& image, double factor);
Tensor rotate(const Tensor& image, double degrees);
Tensor gaussian_blur(const Tensor& image, double sigma);
Tensor resize(const Tensor& image, std::size_t rows, std::size_t cols);

/// The 3×3 kernel used by gaussian_blur.
Tensor gaussian_kernel3(double sigma);

}  // namespace crossmpi
