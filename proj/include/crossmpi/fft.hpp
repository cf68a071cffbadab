#pragma once

#include <complex>
#include <vector>

#include "crossmpi/tensor.hpp"

namespace crossmpi {

struct Spectrum {
  Tensor re;
  Tensor im;
};

/// Unnormalized 2D DFT of an [H,W] real array. Radix-2 FFT along an axis whose
/// length is a power of two, direct summation otherwise.
Spectrum dft2(const Tensor& x);

/// Unnormalized 2D transform of a complex [H,W] field with positive exponent
/// sign (the adjoint of dft2). No 1/(HW) factor.
Spectrum dft2_adjoint(const Tensor& re, const Tensor& im);

/// Same transform as dft2 by direct O(H²W²) summation, kept as the reference.
Spectrum dft2_naive(const Tensor& x);

/// In-place 1D transform of `data` (any length). `sign` is the exponent sign.
void dft1(std::vector<std::complex<double>>& data, int sign);

/// Moves the zero frequency to the center: index k maps to (k + n/2) mod n.
Tensor fftshift(const Tensor& x);

}  // namespace crossmpi
