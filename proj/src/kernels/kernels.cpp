#include "stow/kernels/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <vector>

namespace stow::kernels {

namespace {

std::atomic<Backend> g_backend{Backend::parallel};
std::atomic<bool> g_count_macs{false};
std::atomic<std::uint64_t> g_macs{0};

// Rows [row_begin, row_end) of C for the plain A[m,k] * B[k,n] layout.
template <typename T>
void gemm_nn_rows(std::size_t row_begin, std::size_t row_end, std::size_t k, std::size_t n, const T* a,
                  const T* b, T* c) {
  for (std::size_t i = row_begin; i < row_end; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// Rows of C for A stored [k,m] (transposed).
template <typename T>
void gemm_tn_rows(std::size_t row_begin, std::size_t row_end, std::size_t m, std::size_t k, std::size_t n,
                  const T* a, const T* b, T* c) {
  for (std::size_t i = row_begin; i < row_end; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[p * m + i];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void transpose_into(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

template <typename T>
void gemm_impl(bool parallel, Trans ta, Trans tb, std::size_t m, std::size_t k, std::size_t n,
               std::span<const T> a, std::span<const T> b, std::span<T> c, bool accumulate) {
  if (g_count_macs.load(std::memory_order_relaxed)) g_macs += static_cast<std::uint64_t>(m) * k * n;
  if (!accumulate) std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * n), T(0));
  if (m == 0 || n == 0 || k == 0) return;

  // B^T is materialized so the inner loop always streams contiguous rows.
  std::vector<T> bt;
  const T* bptr = b.data();
  if (tb == Trans::transpose) {
    bt.resize(k * n);
    transpose_into(b.data(), n, k, bt.data());
    bptr = bt.data();
  }
  const T* aptr = a.data();
  T* cptr = c.data();

  if (parallel && m > 1) {
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
      const auto row = static_cast<std::size_t>(i);
      if (ta == Trans::none)
        gemm_nn_rows(row, row + 1, k, n, aptr, bptr, cptr);
      else
        gemm_tn_rows(row, row + 1, m, k, n, aptr, bptr, cptr);
    }
  } else {
    if (ta == Trans::none)
      gemm_nn_rows<T>(0, m, k, n, aptr, bptr, cptr);
    else
      gemm_tn_rows<T>(0, m, m, k, n, aptr, bptr, cptr);
  }
}

template <typename T>
void im2col_row(const ConvGeometry& g, std::size_t row, const T* x, T* cols) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  const std::size_t kk = g.kernel * g.kernel;
  const std::size_t c = row / kk;
  const std::size_t ky = (row % kk) / g.kernel;
  const std::size_t kx = row % g.kernel;
  T* out = cols + row * oh * ow;
  const T* plane = x + c * g.height * g.width;
  for (std::size_t oy = 0; oy < oh; ++oy) {
    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const std::ptrdiff_t ix =
          static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
      const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                          ix < static_cast<std::ptrdiff_t>(g.width);
      out[oy * ow + ox] = inside ? plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)] : T(0);
    }
  }
}

// col2im writes each input channel from one thread: channel c gathers every
// (ky, kx, oy, ox) contribution in a fixed order.
template <typename T>
void col2im_channel(const ConvGeometry& g, std::size_t c, const T* cols, T* dx) {
  const std::size_t oh = g.out_height();
  const std::size_t ow = g.out_width();
  T* plane = dx + c * g.height * g.width;
  for (std::size_t ky = 0; ky < g.kernel; ++ky) {
    for (std::size_t kx = 0; kx < g.kernel; ++kx) {
      const T* src = cols + ((c * g.kernel + ky) * g.kernel + kx) * oh * ow;
      for (std::size_t oy = 0; oy < oh; ++oy) {
        const std::ptrdiff_t iy =
            static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.padding);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const std::ptrdiff_t ix =
              static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.padding);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
          plane[static_cast<std::size_t>(iy) * g.width + static_cast<std::size_t>(ix)] += src[oy * ow + ox];
        }
      }
    }
  }
}

}  // namespace

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

void enable_mac_counter(bool on) { g_count_macs.store(on); }
void reset_mac_counter() { g_macs.store(0); }
std::uint64_t mac_count() { return g_macs.load(); }

template <typename T>
void gemm_serial(Trans ta, Trans tb, std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
                 std::span<const T> b, std::span<T> c, bool accumulate) {
  gemm_impl<T>(false, ta, tb, m, k, n, a, b, c, accumulate);
}

template <typename T>
void gemm_parallel(Trans ta, Trans tb, std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
                   std::span<const T> b, std::span<T> c, bool accumulate) {
  gemm_impl<T>(true, ta, tb, m, k, n, a, b, c, accumulate);
}

template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
          std::span<const T> b, std::span<T> c, bool accumulate) {
  gemm_impl<T>(backend() == Backend::parallel, ta, tb, m, k, n, a, b, c, accumulate);
}

template <typename T>
void im2col_serial(const ConvGeometry& g, std::span<const T> x, std::span<T> cols) {
  for (std::size_t r = 0; r < g.patch_size(); ++r) im2col_row(g, r, x.data(), cols.data());
}

template <typename T>
void im2col_parallel(const ConvGeometry& g, std::span<const T> x, std::span<T> cols) {
  const auto rows = static_cast<std::ptrdiff_t>(g.patch_size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < rows; ++r) im2col_row(g, static_cast<std::size_t>(r), x.data(), cols.data());
}

template <typename T>
void im2col(const ConvGeometry& g, std::span<const T> x, std::span<T> cols) {
  if (backend() == Backend::parallel)
    im2col_parallel(g, x, cols);
  else
    im2col_serial(g, x, cols);
}

template <typename T>
void col2im_serial(const ConvGeometry& g, std::span<const T> cols, std::span<T> dx) {
  for (std::size_t c = 0; c < g.channels; ++c) col2im_channel(g, c, cols.data(), dx.data());
}

template <typename T>
void col2im_parallel(const ConvGeometry& g, std::span<const T> cols, std::span<T> dx) {
  const auto channels = static_cast<std::ptrdiff_t>(g.channels);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t c = 0; c < channels; ++c) col2im_channel(g, static_cast<std::size_t>(c), cols.data(), dx.data());
}

template <typename T>
void col2im(const ConvGeometry& g, std::span<const T> cols, std::span<T> dx) {
  if (backend() == Backend::parallel)
    col2im_parallel(g, cols, dx);
  else
    col2im_serial(g, cols, dx);
}

#define STOW_INSTANTIATE_KERNELS(T)                                                                          \
  template void gemm_serial<T>(Trans, Trans, std::size_t, std::size_t, std::size_t, std::span<const T>,      \
                               std::span<const T>, std::span<T>, bool);                                      \
  template void gemm_parallel<T>(Trans, Trans, std::size_t, std::size_t, std::size_t, std::span<const T>,    \
                                 std::span<const T>, std::span<T>, bool);                                    \
  template void gemm<T>(Trans, Trans, std::size_t, std::size_t, std::size_t, std::span<const T>,             \
                        std::span<const T>, std::span<T>, bool);                                             \
  template void im2col_serial<T>(const ConvGeometry&, std::span<const T>, std::span<T>);                     \
  template void im2col_parallel<T>(const ConvGeometry&, std::span<const T>, std::span<T>);                   \
  template void im2col<T>(const ConvGeometry&, std::span<const T>, std::span<T>);                            \
  template void col2im_serial<T>(const ConvGeometry&, std::span<const T>, std::span<T>);                     \
  template void col2im_parallel<T>(const ConvGeometry&, std::span<const T>, std::span<T>);                   \
  template void col2im<T>(const ConvGeometry&, std::span<const T>, std::span<T>);

STOW_INSTANTIATE_KERNELS(float)
STOW_INSTANTIATE_KERNELS(double)

#undef STOW_INSTANTIATE_KERNELS

}  // namespace stow::kernels
