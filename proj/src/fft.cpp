#include "crossmpi/fft.hpp"

#include <cmath>
#include <numbers>

namespace crossmpi {
namespace {

using cplx = std::complex<double>;

bool is_pow2(std::size_t n) { return n && !(n & (n - 1)); }

void fft_radix2(std::vector<cplx>& a, int sign) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  // Twiddles evaluated directly rather than by recurrence, which drifts.
  std::vector<cplx> twiddle(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
    twiddle[k] = cplx(std::cos(ang), std::sin(ang));
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t stride = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        const cplx w = twiddle[k * stride];
        const cplx u = a[i + k];
        const cplx v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

void dft_direct(std::vector<cplx>& a, int sign) {
  const std::size_t n = a.size();
  std::vector<cplx> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    cplx acc = 0;
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>((k * t) % n) / static_cast<double>(n);
      acc += a[t] * cplx(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  a = std::move(out);
}

Spectrum transform2(const Tensor& re, const Tensor* im, int sign) {
  if (re.rank() != 2) throw ShapeError("dft2: expected [H,W], got " + shape_str(re.shape()));
  const std::size_t h = re.dim(0), w = re.dim(1);
  std::vector<cplx> field(h * w);
  for (std::size_t i = 0; i < h * w; ++i) field[i] = cplx(re[i], im ? (*im)[i] : 0.0);

  std::vector<cplx> line(w);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) line[c] = field[r * w + c];
    dft1(line, sign);
    for (std::size_t c = 0; c < w; ++c) field[r * w + c] = line[c];
  }
  line.resize(h);
  for (std::size_t c = 0; c < w; ++c) {
    for (std::size_t r = 0; r < h; ++r) line[r] = field[r * w + c];
    dft1(line, sign);
    for (std::size_t r = 0; r < h; ++r) field[r * w + c] = line[r];
  }
  Spectrum out{Tensor({h, w}), Tensor({h, w})};
  for (std::size_t i = 0; i < h * w; ++i) {
    out.re[i] = field[i].real();
    out.im[i] = field[i].imag();
  }
  return out;
}

}  // namespace

void dft1(std::vector<cplx>& data, int sign) {
  if (data.size() <= 1) return;
  if (is_pow2(data.size())) {
    fft_radix2(data, sign);
  } else {
    dft_direct(data, sign);
  }
}

Spectrum dft2(const Tensor& x) { return transform2(x, nullptr, -1); }

Spectrum dft2_adjoint(const Tensor& re, const Tensor& im) {
  if (re.shape() != im.shape()) throw ShapeError("dft2_adjoint", re.shape(), im.shape());
  return transform2(re, &im, +1);
}

Spectrum dft2_naive(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("dft2_naive: expected [H,W], got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1);
  Spectrum out{Tensor({h, w}), Tensor({h, w})};
  for (std::size_t u = 0; u < h; ++u) {
    for (std::size_t v = 0; v < w; ++v) {
      double sr = 0, si = 0;
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          const double ang = -2.0 * std::numbers::pi *
                             (static_cast<double>(u * i) / static_cast<double>(h) +
                              static_cast<double>(v * j) / static_cast<double>(w));
          sr += x(i, j) * std::cos(ang);
          si += x(i, j) * std::sin(ang);
        }
      }
      out.re(u, v) = sr;
      out.im(u, v) = si;
    }
  }
  return out;
}

Tensor fftshift(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("fftshift: expected [H,W], got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1);
  Tensor out({h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) out((i + h / 2) % h, (j + w / 2) % w) = x(i, j);
  return out;
}

}  // namespace crossmpi
