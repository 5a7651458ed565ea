#pragma once

// Dense numeric kernels behind the autodiff ops. Every kernel has a serial
// reference and an OpenMP version; both partition work so that each output
// element is produced by one thread with the same reduction order, which keeps
// the two bitwise identical for any thread count.

#include <cstddef>
#include <cstdint>
#include <span>

namespace stow::kernels {

enum class Backend { serial, parallel };

void set_backend(Backend backend);
[[nodiscard]] Backend backend();

// Scoped backend override, restored on destruction.
class BackendScope {
 public:
  explicit BackendScope(Backend b) : previous_(backend()) { set_backend(b); }
  ~BackendScope() { set_backend(previous_); }
  BackendScope(const BackendScope&) = delete;
  BackendScope& operator=(const BackendScope&) = delete;

 private:
  Backend previous_;
};

// Multiply-accumulate counter fed by every gemm call while enabled. Used by
// operation-count probes; not thread-safe to toggle concurrently.
void enable_mac_counter(bool on);
void reset_mac_counter();
[[nodiscard]] std::uint64_t mac_count();

enum class Trans { none, transpose };

// C[m,n] (+)= op(A) op(B), with op(A) of shape [m,k] and op(B) of shape [k,n].
// A is stored [m,k] (or [k,m] when transposed); B is [k,n] (or [n,k]).
template <typename T>
void gemm_serial(Trans ta, Trans tb, std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
                 std::span<const T> b, std::span<T> c, bool accumulate);
template <typename T>
void gemm_parallel(Trans ta, Trans tb, std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
                   std::span<const T> b, std::span<T> c, bool accumulate);
template <typename T>
void gemm(Trans ta, Trans tb, std::size_t m, std::size_t k, std::size_t n, std::span<const T> a,
          std::span<const T> b, std::span<T> c, bool accumulate);

struct ConvGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;

  [[nodiscard]] std::size_t out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  [[nodiscard]] std::size_t out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
  [[nodiscard]] std::size_t patch_size() const { return channels * kernel * kernel; }
};

// cols[(c*k + ky)*k + kx, oy*W' + ox] = x[c, oy*s + ky - p, ox*s + kx - p], zero outside.
template <typename T>
void im2col_serial(const ConvGeometry& g, std::span<const T> x, std::span<T> cols);
template <typename T>
void im2col_parallel(const ConvGeometry& g, std::span<const T> x, std::span<T> cols);
template <typename T>
void im2col(const ConvGeometry& g, std::span<const T> x, std::span<T> cols);

// Adjoint of im2col: scatters-adds cols back into dx.
template <typename T>
void col2im_serial(const ConvGeometry& g, std::span<const T> cols, std::span<T> dx);
template <typename T>
void col2im_parallel(const ConvGeometry& g, std::span<const T> cols, std::span<T> dx);
template <typename T>
void col2im(const ConvGeometry& g, std::span<const T> cols, std::span<T> dx);

}  // namespace stow::kernels
