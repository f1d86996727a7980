#pragma once

// Compact convolutional regressor with hand-written reverse-mode gradients.
//
// Architecture: a stack of 3x3 convolutions, stride 2, padding 1, each
// followed by ReLU; the last feature map is flattened into a ReLU hidden
// layer and a linear head with seven outputs.
//
// Flat weight layout, in order:
//   for each conv stage: W[out][in][3][3], b[out]
//   hidden layer:        W[hidden][flat], b[hidden]
//   head:                W[7][hidden], b[7]

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <new>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "absorb/error.hpp"
#include "absorb/random.hpp"

namespace absorb {

/// Eigen's vectorized reductions peel a data-dependent number of leading
/// elements, so summation order follows buffer alignment. Keeping every
/// buffer on a 64-byte boundary makes results independent of heap layout.
inline constexpr std::size_t kBufferAlign = 64;

template <class T>
struct AlignedAllocator {
  using value_type = T;
  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{kBufferAlign}));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t{kBufferAlign}); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline bool is_aligned(const void* p) noexcept { return reinterpret_cast<std::uintptr_t>(p) % kBufferAlign == 0; }

struct NetworkSpec {
  int input_channels = 1;
  int input_width = 64;
  int input_height = 64;
  std::vector<int> conv_channels{16, 24, 48, 64};
  int hidden = 240;
  static constexpr int kOutputs = 7;
  static constexpr int kKernel = 3;

  static int downsample(int n) { return (n + 1) / 2; }

  int feature_width() const {
    int w = input_width;
    for (std::size_t i = 0; i < conv_channels.size(); ++i) w = downsample(w);
    return w;
  }
  int feature_height() const {
    int h = input_height;
    for (std::size_t i = 0; i < conv_channels.size(); ++i) h = downsample(h);
    return h;
  }
  int flat_size() const { return conv_channels.back() * feature_width() * feature_height(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    int in = input_channels;
    for (int out : conv_channels) {
      n += static_cast<std::size_t>(out) * in * kKernel * kKernel + out;
      in = out;
    }
    n += static_cast<std::size_t>(hidden) * flat_size() + hidden;
    n += static_cast<std::size_t>(kOutputs) * hidden + kOutputs;
    return n;
  }

  void validate() const {
    if (input_channels != 1 && input_channels != 3) fail(Errc::shape, "input_channels must be 1 or 3");
    if (input_width < 2 || input_height < 2) fail(Errc::shape, "input size too small");
    if (conv_channels.empty()) fail(Errc::shape, "at least one conv stage is required");
    for (int c : conv_channels) {
      if (c <= 0) fail(Errc::shape, "conv channel widths must be positive");
    }
    if (hidden <= 0) fail(Errc::shape, "hidden width must be positive");
  }

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

/// Forward/backward evaluation of a NetworkSpec over scalar type T. The
/// network does not own its weights; callers pass a flat weight span so the
/// same object can evaluate training weights and gradient-check copies.
template <class T>
class Network {
 public:
  struct ConvShape {
    int in_c, out_c, in_w, in_h, out_w, out_h;
    std::size_t w_offset, b_offset;
  };
  struct DenseShape {
    int in, out;
    std::size_t w_offset, b_offset;
  };

  /// Scratch buffers for one sample. Reusable across calls.
  struct Workspace {
    std::vector<AlignedVector<T>> act;   // act[0] = input, act[i+1] = output of conv i
    std::vector<AlignedVector<T>> cols;  // im2col buffer per conv
    AlignedVector<T> hidden;
    AlignedVector<T> out;
    // backward
    std::vector<AlignedVector<T>> dact;
    AlignedVector<T> dcols;
    AlignedVector<T> dhidden;
    AlignedVector<T> weights;  // aligned copy when the caller's weights are not
  };

  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    std::size_t off = 0;
    int in = spec_.input_channels, w = spec_.input_width, h = spec_.input_height;
    for (int out : spec_.conv_channels) {
      ConvShape c{in, out, w, h, NetworkSpec::downsample(w), NetworkSpec::downsample(h), 0, 0};
      c.w_offset = off;
      off += static_cast<std::size_t>(out) * in * 9;
      c.b_offset = off;
      off += static_cast<std::size_t>(out);
      convs_.push_back(c);
      in = out;
      w = c.out_w;
      h = c.out_h;
    }
    hidden_ = {spec_.flat_size(), spec_.hidden, off, 0};
    off += static_cast<std::size_t>(hidden_.in) * hidden_.out;
    hidden_.b_offset = off;
    off += static_cast<std::size_t>(hidden_.out);
    head_ = {spec_.hidden, NetworkSpec::kOutputs, off, 0};
    off += static_cast<std::size_t>(head_.in) * head_.out;
    head_.b_offset = off;
    off += static_cast<std::size_t>(head_.out);
    count_ = off;
  }

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::size_t parameter_count() const noexcept { return count_; }
  std::size_t input_size() const noexcept {
    return static_cast<std::size_t>(spec_.input_channels) * spec_.input_width * spec_.input_height;
  }
  const std::vector<ConvShape>& convs() const noexcept { return convs_; }

  Workspace make_workspace() const {
    Workspace ws;
    ws.act.resize(convs_.size() + 1);
    ws.dact.resize(convs_.size() + 1);
    ws.act[0].resize(input_size());
    ws.dact[0].resize(input_size());
    std::size_t max_cols = 0;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      const auto& c = convs_[i];
      const std::size_t n = static_cast<std::size_t>(c.out_c) * c.out_w * c.out_h;
      ws.act[i + 1].resize(n);
      ws.dact[i + 1].resize(n);
      ws.cols.emplace_back(static_cast<std::size_t>(c.in_c) * 9 * c.out_w * c.out_h);
      max_cols = std::max(max_cols, ws.cols.back().size());
    }
    ws.dcols.resize(max_cols);
    ws.hidden.resize(static_cast<std::size_t>(hidden_.out));
    ws.dhidden.resize(static_cast<std::size_t>(hidden_.out));
    ws.out.resize(NetworkSpec::kOutputs);
    return ws;
  }

  /// Fan-in scaled uniform initialization U(-sqrt(6/fan_in), sqrt(6/fan_in)); biases zero.
  AlignedVector<T> initial_weights(std::uint64_t seed) const {
    AlignedVector<T> w(count_, T(0));
    Rng rng(seed);
    auto fill = [&](std::size_t off, std::size_t n, int fan_in) {
      const double a = std::sqrt(6.0 / fan_in);
      for (std::size_t i = 0; i < n; ++i) w[off + i] = static_cast<T>(rng.uniform(-a, a));
    };
    for (const auto& c : convs_) fill(c.w_offset, static_cast<std::size_t>(c.out_c) * c.in_c * 9, c.in_c * 9);
    fill(hidden_.w_offset, static_cast<std::size_t>(hidden_.in) * hidden_.out, hidden_.in);
    // Head scaled down so initial outputs start near the range midpoints.
    const double a = std::sqrt(1.0 / head_.in);
    for (std::size_t i = 0; i < static_cast<std::size_t>(head_.in) * head_.out; ++i) {
      w[head_.w_offset + i] = static_cast<T>(rng.uniform(-a, a));
    }
    return w;
  }

  /// Runs the network on `input` (C x H x W, row-major). Outputs land in ws.out.
  void forward(std::span<const T> weights, std::span<const T> input, Workspace& ws) const {
    if (weights.size() != count_) fail(Errc::shape, "weight count does not match the network spec");
    if (input.size() != input_size()) fail(Errc::shape, "input size does not match the network spec");
    weights = aligned(weights, ws);
    std::copy(input.begin(), input.end(), ws.act[0].begin());
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      conv_forward(convs_[i], weights, ws.act[i], ws.cols[i], ws.act[i + 1]);
    }
    dense_forward(hidden_, weights, ws.act.back().data(), ws.hidden.data(), true);
    dense_forward(head_, weights, ws.hidden.data(), ws.out.data(), false);
  }

  /// Accumulates d(loss)/d(weights) into `grad` given d(loss)/d(outputs),
  /// using the activations left in `ws` by the preceding forward().
  void backward(std::span<const T> weights, std::span<const T> dout, Workspace& ws, std::span<T> grad) const {
    if (grad.size() != count_) fail(Errc::shape, "gradient buffer size mismatch");
    weights = aligned(weights, ws);
    // Head: hidden -> out (linear)
    std::fill(ws.dhidden.begin(), ws.dhidden.end(), T(0));
    dense_backward(head_, weights, ws.hidden.data(), dout.data(), ws.dhidden.data(), grad);
    for (std::size_t i = 0; i < ws.hidden.size(); ++i) {
      if (!(ws.hidden[i] > T(0))) ws.dhidden[i] = T(0);
    }
    auto& dflat = ws.dact.back();
    std::fill(dflat.begin(), dflat.end(), T(0));
    dense_backward(hidden_, weights, ws.act.back().data(), ws.dhidden.data(), dflat.data(), grad);
    for (std::size_t i = convs_.size(); i-- > 0;) {
      auto& dy = ws.dact[i + 1];
      const auto& y = ws.act[i + 1];
      for (std::size_t j = 0; j < dy.size(); ++j) {
        if (!(y[j] > T(0))) dy[j] = T(0);
      }
      conv_backward(convs_[i], weights, ws.cols[i], dy, ws.dcols, i > 0 ? &ws.dact[i] : nullptr, grad);
    }
  }

 private:
  std::span<const T> aligned(std::span<const T> weights, Workspace& ws) const {
    if (is_aligned(weights.data())) return weights;
    if (ws.weights.data() != weights.data()) ws.weights.assign(weights.begin(), weights.end());
    return ws.weights;
  }

  using Mat = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMat = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using Vec = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
  using ConstVec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

  static void conv_forward(const ConvShape& c, std::span<const T> weights, const AlignedVector<T>& in,
                           AlignedVector<T>& cols, AlignedVector<T>& out) {
    const int p_count = c.out_w * c.out_h;
    // im2col with stride 2, padding 1. Output column ox reads input column
    // 2*ox - 1 + kx; only the first and last columns can fall outside.
    const bool right_pad = 2 * (c.out_w - 1) + 1 >= c.in_w;  // kx = 2 runs off the edge
    for (int ci = 0; ci < c.in_c; ++ci) {
      const T* src = in.data() + static_cast<std::size_t>(ci) * c.in_w * c.in_h;
      for (int ky = 0; ky < 3; ++ky) {
        T* r0 = cols.data() + static_cast<std::size_t>((ci * 3 + ky) * 3) * p_count;
        T* r1 = r0 + p_count;
        T* r2 = r1 + p_count;
        for (int oy = 0; oy < c.out_h; ++oy) {
          const int iy = 2 * oy - 1 + ky;
          const std::size_t o = static_cast<std::size_t>(oy) * c.out_w;
          if (iy < 0 || iy >= c.in_h) {
            for (int ox = 0; ox < c.out_w; ++ox) r0[o + ox] = r1[o + ox] = r2[o + ox] = T(0);
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(iy) * c.in_w;
          r0[o] = T(0);
          for (int ox = 1; ox < c.out_w; ++ox) r0[o + ox] = srow[2 * ox - 1];
          for (int ox = 0; ox < c.out_w; ++ox) r1[o + ox] = srow[2 * ox];
          const int last = right_pad ? c.out_w - 1 : c.out_w;
          for (int ox = 0; ox < last; ++ox) r2[o + ox] = srow[2 * ox + 1];
          if (right_pad) r2[o + last] = T(0);
        }
      }
    }
    const int k_count = c.in_c * 9;
    const ConstMat w(weights.data() + c.w_offset, c.out_c, k_count);
    const ConstVec b(weights.data() + c.b_offset, c.out_c);
    const ConstMat x(cols.data(), k_count, p_count);
    Mat y(out.data(), c.out_c, p_count);
    y.noalias() = w * x;
    y.colwise() += b;
    y = y.cwiseMax(T(0));
  }

  static void conv_backward(const ConvShape& c, std::span<const T> weights, const AlignedVector<T>& cols,
                            const AlignedVector<T>& dy, AlignedVector<T>& dcols, AlignedVector<T>* dx,
                            std::span<T> grad) {
    const int p_count = c.out_w * c.out_h;
    const int k_count = c.in_c * 9;
    const ConstMat d(dy.data(), c.out_c, p_count);
    const ConstMat x(cols.data(), k_count, p_count);
    Mat gw(grad.data() + c.w_offset, c.out_c, k_count);
    Vec gb(grad.data() + c.b_offset, c.out_c);
    gb += d.rowwise().sum();
    gw.noalias() += d * x.transpose();
    if (!dx) return;
    const ConstMat w(weights.data() + c.w_offset, c.out_c, k_count);
    Mat dc(dcols.data(), k_count, p_count);
    dc.noalias() = w.transpose() * d;
    // col2im
    std::fill(dx->begin(), dx->end(), T(0));
    for (int ci = 0; ci < c.in_c; ++ci) {
      T* dst = dx->data() + static_cast<std::size_t>(ci) * c.in_w * c.in_h;
      for (int ky = 0; ky < 3; ++ky) {
        for (int kx = 0; kx < 3; ++kx) {
          const T* src = dcols.data() + static_cast<std::size_t>((ci * 3 + ky) * 3 + kx) * p_count;
          for (int oy = 0; oy < c.out_h; ++oy) {
            const int iy = 2 * oy - 1 + ky;
            if (iy < 0 || iy >= c.in_h) continue;
            T* drow = dst + static_cast<std::size_t>(iy) * c.in_w;
            const T* srow = src + static_cast<std::size_t>(oy) * c.out_w;
            for (int ox = 0; ox < c.out_w; ++ox) {
              const int ix = 2 * ox - 1 + kx;
              if (ix >= 0 && ix < c.in_w) drow[ix] += srow[ox];
            }
          }
        }
      }
    }
  }

  static void dense_forward(const DenseShape& d, std::span<const T> weights, const T* in, T* out, bool relu) {
    const ConstMat w(weights.data() + d.w_offset, d.out, d.in);
    const ConstVec b(weights.data() + d.b_offset, d.out);
    Vec y(out, d.out);
    y.noalias() = w * ConstVec(in, d.in);
    y += b;
    if (relu) y = y.cwiseMax(T(0));
  }

  static void dense_backward(const DenseShape& d, std::span<const T> weights, const T* in, const T* dout, T* din,
                             std::span<T> grad) {
    const ConstVec g(dout, d.out);
    Mat gw(grad.data() + d.w_offset, d.out, d.in);
    Vec(grad.data() + d.b_offset, d.out) += g;
    gw.noalias() += g * ConstVec(in, d.in).transpose();
    const ConstMat w(weights.data() + d.w_offset, d.out, d.in);
    Vec(din, d.in).noalias() += w.transpose() * g;
  }

  NetworkSpec spec_;
  std::vector<ConvShape> convs_;
  DenseShape hidden_{};
  DenseShape head_{};
  std::size_t count_ = 0;
};

}  // namespace absorb
