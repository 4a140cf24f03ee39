#include "deepcsp/conv.hpp"

#include <algorithm>

#include "deepcsp/error.hpp"
#include "deepcsp/fft.hpp"

namespace deepcsp {
namespace {

using signal::Complex;
using Spectrum = std::vector<Complex>;

bool use_fft(const Conv1dShape& s, ConvAlgorithm algo) {
  if (algo == ConvAlgorithm::direct) return false;
  if (algo == ConvAlgorithm::fft) return true;
  return s.kernel >= 24 && s.length >= 64;
}

std::size_t fft_length(const Conv1dShape& s) { return conv1d_fft_length(s.length, s.kernel); }

Spectrum padded_rfft(const double* src, std::size_t count, std::size_t n, bool reversed = false) {
  std::vector<double> buf(n, 0.0);
  if (reversed) {
    for (std::size_t i = 0; i < count; ++i) buf[i] = src[count - 1 - i];
  } else {
    std::copy(src, src + count, buf.begin());
  }
  return signal::rfft(buf);
}

// acc += a · b
inline void mac(Spectrum& acc, const Spectrum& a, const Spectrum& b) {
  const std::size_t n = acc.size();
  for (std::size_t k = 0; k < n; ++k) {
    const double ar = a[k].real(), ai = a[k].imag();
    const double br = b[k].real(), bi = b[k].imag();
    acc[k] += Complex(ar * br - ai * bi, ar * bi + ai * br);
  }
}

// acc += conj(a) · b
inline void mac_conj(Spectrum& acc, const Spectrum& a, const Spectrum& b) {
  const std::size_t n = acc.size();
  for (std::size_t k = 0; k < n; ++k) {
    const double ar = a[k].real(), ai = -a[k].imag();
    const double br = b[k].real(), bi = b[k].imag();
    acc[k] += Complex(ar * br - ai * bi, ar * bi + ai * br);
  }
}

Conv1dShape shape_from(const Shape& input_shape, const Shape& kernel_shape, std::size_t groups) {
  if (input_shape.size() != 2 && input_shape.size() != 3) {
    throw ShapeError("conv1d: input must be (C, T) or (B, C, T), got " + shape_string(input_shape));
  }
  if (kernel_shape.size() != 3) {
    throw ShapeError("conv1d: kernel must be (Cout, Cin/groups, K), got " + shape_string(kernel_shape));
  }
  Conv1dShape s;
  const bool batched = input_shape.size() == 3;
  s.batch = batched ? input_shape[0] : 1;
  s.in_channels = input_shape[batched ? 1 : 0];
  s.length = input_shape[batched ? 2 : 1];
  s.out_channels = kernel_shape[0];
  s.kernel = kernel_shape[2];
  s.groups = groups;
  if (groups == 0 || s.in_channels % groups != 0 || s.out_channels % groups != 0) {
    throw ShapeError("conv1d: channels not divisible by groups");
  }
  if (kernel_shape[1] != s.in_channels / groups) {
    throw ShapeError("conv1d: kernel expects " + std::to_string(kernel_shape[1]) +
                     " input channels per group, input provides " +
                     std::to_string(s.in_channels / groups));
  }
  if (s.kernel == 0) throw ShapeError("conv1d: empty kernel");
  if (s.length < s.kernel) {
    throw ShapeError("conv1d: signal length " + std::to_string(s.length) +
                     " shorter than kernel " + std::to_string(s.kernel));
  }
  return s;
}

Shape output_shape(const Shape& input_shape, const Conv1dShape& s) {
  if (input_shape.size() == 3) return {s.batch, s.out_channels, s.length};
  return {s.out_channels, s.length};
}

const ConvInputSpectra* usable(const ConvInputSpectra* cached, const Tensor& input, std::size_t n) {
  if (cached && cached->fft_length == n && cached->input_shape == input.shape()) return cached;
  return nullptr;
}

}  // namespace

std::size_t conv1d_fft_length(std::size_t length, std::size_t kernel) {
  return std::max<std::size_t>(4, signal::next_power_of_two(length + kernel - 1));
}

std::shared_ptr<const ConvInputSpectra> conv1d_input_spectra(const Tensor& input,
                                                             std::size_t fft_length) {
  if (input.rank() != 2 && input.rank() != 3) {
    throw ShapeError("conv1d: input must be (C, T) or (B, C, T), got " + shape_string(input.shape()));
  }
  const std::size_t t = input.shape().back();
  if (fft_length < t) throw ShapeError("conv1d: transform shorter than the signal");
  auto out = std::make_shared<ConvInputSpectra>();
  out->input_shape = input.shape();
  out->fft_length = fft_length;
  const std::size_t rows = input.size() / t;
  out->rows.reserve(rows);
  for (std::size_t r = 0; r < rows; ++r) out->rows.push_back(padded_rfft(input.data().data() + r * t, t, fft_length));
  return out;
}

Conv1dShape conv1d_shape(const Tensor& input, const Tensor& kernel, std::size_t groups) {
  return shape_from(input.shape(), kernel.shape(), groups);
}

Tensor conv1d_forward(const Tensor& input, const Tensor& kernel, std::size_t groups,
                      ConvAlgorithm algo, const ConvInputSpectra* cached) {
  const Conv1dShape s = conv1d_shape(input, kernel, groups);
  Tensor out(output_shape(input.shape(), s));
  const std::size_t T = s.length, K = s.kernel, pl = s.pad_left();
  const std::size_t ipg = s.in_per_group(), opg = s.out_per_group();
  const double* x = input.data().data();
  const double* w = kernel.data().data();
  double* y = out.data().data();

  if (!use_fft(s, algo)) {
    for (std::size_t b = 0; b < s.batch; ++b)
      for (std::size_t o = 0; o < s.out_channels; ++o) {
        double* yo = y + (b * s.out_channels + o) * T;
        const std::size_t g = o / opg;
        for (std::size_t il = 0; il < ipg; ++il) {
          const double* xi = x + (b * s.in_channels + g * ipg + il) * T;
          const double* wk = w + (o * ipg + il) * K;
          for (std::size_t k = 0; k < K; ++k) {
            const double wv = wk[k];
            // t + k - pl within [0, T)
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pl);
            const std::size_t t0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
            const std::size_t t1 = shift > 0 ? T - static_cast<std::size_t>(shift) : T;
            for (std::size_t t = t0; t < t1; ++t) yo[t] += wv * xi[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(t) + shift)];
          }
        }
      }
    return out;
  }

  const std::size_t N = fft_length(s);
  std::vector<Spectrum> kspec(s.out_channels * ipg);
  for (std::size_t o = 0; o < s.out_channels; ++o)
    for (std::size_t il = 0; il < ipg; ++il)
      kspec[o * ipg + il] = padded_rfft(w + (o * ipg + il) * K, K, N, /*reversed=*/true);

  const ConvInputSpectra* cache = usable(cached, input, N);
  std::vector<Spectrum> own(cache ? 0 : s.in_channels);
  std::vector<const Spectrum*> xspec(s.in_channels);
  Spectrum acc(N / 2 + 1);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t i = 0; i < s.in_channels; ++i) {
      if (cache) {
        xspec[i] = &cache->rows[b * s.in_channels + i];
      } else {
        own[i] = padded_rfft(x + (b * s.in_channels + i) * T, T, N);
        xspec[i] = &own[i];
      }
    }
    for (std::size_t o = 0; o < s.out_channels; ++o) {
      std::fill(acc.begin(), acc.end(), Complex{});
      const std::size_t g = o / opg;
      for (std::size_t il = 0; il < ipg; ++il) mac(acc, *xspec[g * ipg + il], kspec[o * ipg + il]);
      const auto full = signal::irfft(acc, N);
      double* yo = y + (b * s.out_channels + o) * T;
      for (std::size_t t = 0; t < T; ++t) yo[t] = full[t + K - 1 - pl];
    }
  }
  return out;
}

Tensor conv1d_grad_kernel(const Tensor& input, const Tensor& grad_out, const Shape& kernel_shape,
                          std::size_t groups, ConvAlgorithm algo, const ConvInputSpectra* cached) {
  const Conv1dShape s = shape_from(input.shape(), kernel_shape, groups);
  if (grad_out.shape() != output_shape(input.shape(), s)) {
    throw ShapeError("conv1d backward: output gradient has shape " + shape_string(grad_out.shape()));
  }
  Tensor dw(kernel_shape);
  const std::size_t T = s.length, K = s.kernel, pl = s.pad_left();
  const std::size_t ipg = s.in_per_group(), opg = s.out_per_group();
  const double* x = input.data().data();
  const double* g = grad_out.data().data();
  double* d = dw.data().data();

  if (!use_fft(s, algo)) {
    for (std::size_t b = 0; b < s.batch; ++b)
      for (std::size_t o = 0; o < s.out_channels; ++o) {
        const double* go = g + (b * s.out_channels + o) * T;
        const std::size_t grp = o / opg;
        for (std::size_t il = 0; il < ipg; ++il) {
          const double* xi = x + (b * s.in_channels + grp * ipg + il) * T;
          double* dk = d + (o * ipg + il) * K;
          for (std::size_t k = 0; k < K; ++k) {
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pl);
            const std::size_t t0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
            const std::size_t t1 = shift > 0 ? T - static_cast<std::size_t>(shift) : T;
            double acc = 0.0;
            for (std::size_t t = t0; t < t1; ++t) acc += go[t] * xi[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(t) + shift)];
            dk[k] += acc;
          }
        }
      }
    return dw;
  }

  const std::size_t N = fft_length(s);
  std::vector<Spectrum> acc(s.out_channels * ipg, Spectrum(N / 2 + 1));
  const ConvInputSpectra* cache = usable(cached, input, N);
  std::vector<Spectrum> own(cache ? 0 : s.in_channels);
  std::vector<const Spectrum*> xspec(s.in_channels);
  std::vector<Spectrum> gspec(s.out_channels);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t i = 0; i < s.in_channels; ++i) {
      if (cache) {
        xspec[i] = &cache->rows[b * s.in_channels + i];
      } else {
        own[i] = padded_rfft(x + (b * s.in_channels + i) * T, T, N);
        xspec[i] = &own[i];
      }
    }
    for (std::size_t o = 0; o < s.out_channels; ++o)
      gspec[o] = padded_rfft(g + (b * s.out_channels + o) * T, T, N);
    for (std::size_t o = 0; o < s.out_channels; ++o) {
      const std::size_t grp = o / opg;
      for (std::size_t il = 0; il < ipg; ++il) mac_conj(acc[o * ipg + il], gspec[o], *xspec[grp * ipg + il]);
    }
  }
  for (std::size_t o = 0; o < s.out_channels; ++o)
    for (std::size_t il = 0; il < ipg; ++il) {
      const auto r = signal::irfft(acc[o * ipg + il], N);
      double* dk = d + (o * ipg + il) * K;
      for (std::size_t k = 0; k < K; ++k) dk[k] = r[(k + N - pl) % N];
    }
  return dw;
}

Tensor conv1d_grad_input(const Tensor& kernel, const Tensor& grad_out, const Shape& input_shape,
                         std::size_t groups, ConvAlgorithm algo) {
  const Conv1dShape s = shape_from(input_shape, kernel.shape(), groups);
  if (grad_out.shape() != output_shape(input_shape, s)) {
    throw ShapeError("conv1d backward: output gradient has shape " + shape_string(grad_out.shape()));
  }
  Tensor dx(input_shape);
  const std::size_t T = s.length, K = s.kernel, pl = s.pad_left();
  const std::size_t ipg = s.in_per_group(), opg = s.out_per_group();
  const double* w = kernel.data().data();
  const double* g = grad_out.data().data();
  double* d = dx.data().data();

  if (!use_fft(s, algo)) {
    for (std::size_t b = 0; b < s.batch; ++b)
      for (std::size_t o = 0; o < s.out_channels; ++o) {
        const double* go = g + (b * s.out_channels + o) * T;
        const std::size_t grp = o / opg;
        for (std::size_t il = 0; il < ipg; ++il) {
          double* di = d + (b * s.in_channels + grp * ipg + il) * T;
          const double* wk = w + (o * ipg + il) * K;
          for (std::size_t k = 0; k < K; ++k) {
            const double wv = wk[k];
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pl);
            const std::size_t t0 = shift < 0 ? static_cast<std::size_t>(-shift) : 0;
            const std::size_t t1 = shift > 0 ? T - static_cast<std::size_t>(shift) : T;
            for (std::size_t t = t0; t < t1; ++t) di[static_cast<std::size_t>(static_cast<std::ptrdiff_t>(t) + shift)] += wv * go[t];
          }
        }
      }
    return dx;
  }

  const std::size_t N = fft_length(s);
  std::vector<Spectrum> wspec(s.out_channels * ipg);
  for (std::size_t o = 0; o < s.out_channels; ++o)
    for (std::size_t il = 0; il < ipg; ++il)
      wspec[o * ipg + il] = padded_rfft(w + (o * ipg + il) * K, K, N);
  std::vector<Spectrum> gspec(s.out_channels);
  Spectrum acc(N / 2 + 1);
  for (std::size_t b = 0; b < s.batch; ++b) {
    for (std::size_t o = 0; o < s.out_channels; ++o)
      gspec[o] = padded_rfft(g + (b * s.out_channels + o) * T, T, N);
    for (std::size_t i = 0; i < s.in_channels; ++i) {
      std::fill(acc.begin(), acc.end(), Complex{});
      const std::size_t grp = i / ipg, il = i % ipg;
      for (std::size_t ol = 0; ol < opg; ++ol) {
        const std::size_t o = grp * opg + ol;
        mac(acc, gspec[o], wspec[o * ipg + il]);
      }
      const auto full = signal::irfft(acc, N);
      double* di = d + (b * s.in_channels + i) * T;
      for (std::size_t t = 0; t < T; ++t) di[t] = full[t + pl];
    }
  }
  return dx;
}

}  // namespace deepcsp
