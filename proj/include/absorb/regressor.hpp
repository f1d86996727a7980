#pragma once

// ML-1 / ML-3 parameter regressors: input preparation, z-score normalized
// loss, Adam training, fine-tuning and inference.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "absorb/error.hpp"
#include "absorb/imaging.hpp"
#include "absorb/network.hpp"
#include "absorb/random.hpp"
#include "absorb/simulator.hpp"

namespace absorb {

using ParamVector = std::array<double, GaussianParams::kCount>;

/// Maps GaussianParams in image pixels to resolution-free internal units and
/// back. Positions and widths become fractions of the network input extent
/// (after area downscaling from the source frame); rho, B and theta keep
/// their units. Pixel edges, not centers, scale between grids.
struct FrameGeometry {
  int source_width = 64;
  int source_height = 64;
  int net_width = 64;
  int net_height = 64;

  ParamVector to_internal(const GaussianParams& p) const {
    const double fx = static_cast<double>(net_width) / source_width;
    const double fy = static_cast<double>(net_height) / source_height;
    return {((p.x0 + 0.5) * fx - 0.5) / net_width,
            ((p.y0 + 0.5) * fy - 0.5) / net_height,
            p.sigma_x / source_width,
            p.sigma_y / source_height,
            p.rho,
            p.b,
            p.theta};
  }

  GaussianParams from_internal(const ParamVector& v) const {
    const double fx = static_cast<double>(source_width) / net_width;
    const double fy = static_cast<double>(source_height) / net_height;
    GaussianParams p;
    p.x0 = (v[0] * net_width + 0.5) * fx - 0.5;
    p.y0 = (v[1] * net_height + 0.5) * fy - 0.5;
    p.sigma_x = v[2] * source_width;
    p.sigma_y = v[3] * source_height;
    p.rho = v[4];
    p.b = v[5];
    p.theta = v[6];
    return p;
  }
};

/// z-score normalization of the regression targets. scale_i is the standard
/// deviation of the uniform training range, (max - min) / sqrt(12); center_i
/// is the range midpoint. Both are in internal units.
struct Normalizer {
  ParamVector center{};
  ParamVector scale{};
  double count_scale = 1.0;  // frames are divided by this before entering the network

  static Normalizer from_ranges(const ParamRanges& ranges, int width, int height, double count_scale) {
    ranges.validate();
    Normalizer n;
    const auto all = ranges.all();
    for (std::size_t i = 0; i < all.size(); ++i) {
      double lo = all[i]->lo(width, height), hi = all[i]->hi(width, height);
      if (i == 0 || i == 2) {
        lo /= width;
        hi /= width;
      } else if (i == 1 || i == 3) {
        lo /= height;
        hi /= height;
      }
      n.center[i] = 0.5 * (lo + hi);
      n.scale[i] = (hi - lo) / std::sqrt(12.0);
    }
    n.count_scale = count_scale;
    n.validate();
    return n;
  }

  void validate() const {
    for (double s : scale) {
      if (!(s > 0.0) || !std::isfinite(s)) fail(Errc::domain, "normalizer scales must be positive");
    }
    if (!(count_scale > 0.0)) fail(Errc::domain, "count scale must be positive");
  }

  ParamVector normalize(const ParamVector& v) const {
    ParamVector z;
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = (v[i] - center[i]) / scale[i];
    return z;
  }

  ParamVector denormalize(const ParamVector& z) const {
    ParamVector v;
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = center[i] + scale[i] * z[i];
    return v;
  }

  friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

/// Mean over batch and parameters of ((pred - truth) / scale)^2, internal units.
inline double loss(std::span<const ParamVector> predicted, std::span<const ParamVector> truth,
                   const Normalizer& norm) {
  if (predicted.size() != truth.size()) fail(Errc::shape, "prediction and truth batches differ in size");
  if (predicted.empty()) fail(Errc::shape, "empty batch");
  norm.validate();
  double s = 0.0;
  for (std::size_t b = 0; b < predicted.size(); ++b) {
    for (std::size_t i = 0; i < ParamVector{}.size(); ++i) {
      const double e = (predicted[b][i] - truth[b][i]) / norm.scale[i];
      s += e * e;
    }
  }
  return s / (static_cast<double>(predicted.size()) * GaussianParams::kCount);
}

struct Provenance {
  std::string dataset_id;
  std::uint64_t seed = 0;
  int epochs = 0;
  std::string mode = "ML1";
};

struct RegressorModel {
  NetworkSpec spec;
  AlignedVector<float> weights;
  Normalizer normalizer;
  Provenance provenance;

  void validate() const {
    spec.validate();
    if (weights.size() != spec.parameter_count()) {
      fail(Errc::shape, "model has " + std::to_string(weights.size()) + " weights, spec needs " +
                            std::to_string(spec.parameter_count()));
    }
    normalizer.validate();
  }
};

/// Area-averaging resampler between grids with the same aspect ratio.
/// Separable; each output pixel is the overlap-weighted mean of the source
/// pixels it covers.
class AreaResampler {
 public:
  AreaResampler(int src_w, int src_h, int dst_w, int dst_h)
      : src_w_(src_w), src_h_(src_h), dst_w_(dst_w), dst_h_(dst_h) {
    if (static_cast<long long>(src_w) * dst_h != static_cast<long long>(src_h) * dst_w) {
      fail(Errc::shape, "frame aspect ratio differs from the network input aspect ratio");
    }
    identity_ = src_w == dst_w && src_h == dst_h;
    if (!identity_) {
      wx_ = weights(src_w, dst_w);
      wy_ = weights(src_h, dst_h);
    }
  }

  bool identity() const noexcept { return identity_; }

  // Resamples `src` (row-major src_w x src_h) into `dst` scaled by `factor`.
  template <class Src, class Dst>
  void apply(std::span<const Src> src, std::span<Dst> dst, double factor) const {
    if (identity_) {
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<Dst>(static_cast<double>(src[i]) * factor);
      return;
    }
    tmp_.assign(static_cast<std::size_t>(dst_w_) * src_h_, 0.0);
    for (int y = 0; y < src_h_; ++y) {
      const Src* row = src.data() + static_cast<std::size_t>(y) * src_w_;
      double* out = tmp_.data() + static_cast<std::size_t>(y) * dst_w_;
      for (const Tap& t : wx_) out[t.dst] += t.w * static_cast<double>(row[t.src]);
    }
    std::vector<double> acc(static_cast<std::size_t>(dst_w_) * dst_h_, 0.0);
    for (const Tap& t : wy_) {
      const double* in = tmp_.data() + static_cast<std::size_t>(t.src) * dst_w_;
      double* out = acc.data() + static_cast<std::size_t>(t.dst) * dst_w_;
      for (int x = 0; x < dst_w_; ++x) out[x] += t.w * in[x];
    }
    for (std::size_t i = 0; i < acc.size(); ++i) dst[i] = static_cast<Dst>(acc[i] * factor);
  }

 private:
  struct Tap {
    int src, dst;
    double w;
  };

  static std::vector<Tap> weights(int src, int dst) {
    std::vector<Tap> taps;
    const double f = static_cast<double>(src) / dst;  // source pixels per output pixel
    for (int j = 0; j < dst; ++j) {
      const double lo = j * f, hi = (j + 1) * f;
      for (int i = static_cast<int>(std::floor(lo)); i < src && i < hi; ++i) {
        const double overlap = std::min(hi, i + 1.0) - std::max(lo, static_cast<double>(i));
        if (overlap > 1e-12) taps.push_back({i, j, overlap / f});
      }
    }
    return taps;
  }

  int src_w_, src_h_, dst_w_, dst_h_;
  bool identity_ = true;
  std::vector<Tap> wx_, wy_;
  mutable std::vector<double> tmp_;
};

/// Network input for one shot: ML-1 uses the atoms frame, ML-3 stacks
/// (atoms, bg, dark). Counts are divided by the normalizer's count scale and
/// the beam-lit planes (atoms, bg) are shifted down by 1 so an unabsorbed
/// pixel at the typical beam level reads as 0.
inline void prepare_input(const FrameTriple& triple, const NetworkSpec& spec, double count_scale,
                          const AreaResampler& resampler, std::span<float> out) {
  const std::size_t plane = static_cast<std::size_t>(spec.input_width) * spec.input_height;
  if (out.size() != plane * spec.input_channels) fail(Errc::shape, "input buffer size mismatch");
  const double f = 1.0 / count_scale;
  resampler.apply(triple.atoms.counts(), out.subspan(0, plane), f);
  if (spec.input_channels == 3) {
    resampler.apply(triple.bg.counts(), out.subspan(plane, plane), f);
    resampler.apply(triple.dark.counts(), out.subspan(2 * plane, plane), f);
  }
  const std::size_t lit = (spec.input_channels == 3 ? 2 : 1) * plane;
  for (std::size_t i = 0; i < lit; ++i) out[i] -= 1.0f;
}

inline std::vector<float> prepare_input(const FrameTriple& triple, const NetworkSpec& spec, double count_scale) {
  const AreaResampler rs(triple.width(), triple.height(), spec.input_width, spec.input_height);
  std::vector<float> out(static_cast<std::size_t>(spec.input_width) * spec.input_height * spec.input_channels);
  prepare_input(triple, spec, count_scale, rs, out);
  return out;
}

/// Reusable inference object. Holds scratch buffers, so use one per thread.
class Regressor {
 public:
  explicit Regressor(RegressorModel model) : model_(std::move(model)), net_(model_.spec) {
    model_.validate();
    ws_ = net_.make_workspace();
    input_.resize(net_.input_size());
  }

  const RegressorModel& model() const noexcept { return model_; }

  /// Raw normalized outputs (z-scores) for a prepared input.
  ParamVector raw(std::span<const float> input) {
    net_.forward(model_.weights, input, ws_);
    ParamVector z;
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = ws_.out[i];
    return z;
  }

  GaussianParams predict(const FrameTriple& triple) {
    const auto& s = model_.spec;
    if (!resampler_ || cached_w_ != triple.width() || cached_h_ != triple.height()) {
      resampler_.emplace(triple.width(), triple.height(), s.input_width, s.input_height);
      cached_w_ = triple.width();
      cached_h_ = triple.height();
    }
    prepare_input(triple, s, model_.normalizer.count_scale, *resampler_, input_);
    const ParamVector v = model_.normalizer.denormalize(raw(input_));
    const FrameGeometry geo{triple.width(), triple.height(), s.input_width, s.input_height};
    GaussianParams p = geo.from_internal(v);
    p.sigma_x = std::max(std::abs(p.sigma_x), 1e-6);
    p.sigma_y = std::max(std::abs(p.sigma_y), 1e-6);
    return canonicalize(p);
  }

 private:
  RegressorModel model_;
  Network<float> net_;
  Network<float>::Workspace ws_;
  std::vector<float> input_;
  std::optional<AreaResampler> resampler_;
  int cached_w_ = 0, cached_h_ = 0;
};

inline GaussianParams forward(const RegressorModel& model, const FrameTriple& triple) {
  return Regressor(model).predict(triple);
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 30;
  int batch_size = 8;
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double val_fraction = 0.1;
  bool cosine_decay = true;          // anneal the step size over the run
  double final_lr_fraction = 0.05;   // lr at the last epoch relative to learning_rate
  bool augment = true;               // random mirror/transpose of each training sample
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 0 || batch_size <= 0) fail(Errc::config, "epochs must be >= 0 and batch_size > 0");
    if (!(learning_rate >= 0.0) || !(epsilon > 0.0)) fail(Errc::config, "bad learning rate or epsilon");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail(Errc::config, "betas in [0, 1)");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) fail(Errc::config, "val_fraction in (0, 1)");
    if (!(final_lr_fraction >= 0.0 && final_lr_fraction <= 1.0)) fail(Errc::config, "final_lr_fraction in [0, 1]");
  }

  double lr_at(int epoch) const {
    if (!cosine_decay || epochs <= 1) return learning_rate;
    const double t = static_cast<double>(epoch) / (epochs - 1);
    const double lo = learning_rate * final_lr_fraction;
    return lo + 0.5 * (learning_rate - lo) * (1.0 + std::cos(std::numbers::pi * t));
  }
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double learning_rate = 0.0;
};

/// Inputs and normalized targets ready for the network.
struct TrainingSet {
  int width = 0, height = 0, channels = 0;  // network input geometry
  Normalizer normalizer;
  std::size_t input_size = 0;
  std::vector<float> inputs;
  std::vector<ParamVector> targets;  // z-scores

  std::size_t size() const noexcept { return targets.size(); }
  std::span<const float> input(std::size_t i) const {
    return std::span<const float>(inputs).subspan(i * input_size, input_size);
  }
};

inline TrainingSet make_training_set(std::span<const LabeledShot> shots, const NetworkSpec& spec,
                                     const Normalizer& norm) {
  TrainingSet ts;
  ts.width = spec.input_width;
  ts.height = spec.input_height;
  ts.channels = spec.input_channels;
  ts.normalizer = norm;
  ts.input_size = static_cast<std::size_t>(spec.input_width) * spec.input_height * spec.input_channels;
  ts.inputs.resize(ts.input_size * shots.size());
  ts.targets.reserve(shots.size());
  std::optional<AreaResampler> rs;
  for (std::size_t i = 0; i < shots.size(); ++i) {
    const auto& t = shots[i].triple;
    if (!rs || i == 0 || !shots[i - 1].triple.atoms.same_shape(t.atoms)) {
      rs.emplace(t.width(), t.height(), spec.input_width, spec.input_height);
    }
    prepare_input(t, spec, norm.count_scale, *rs,
                  std::span<float>(ts.inputs).subspan(i * ts.input_size, ts.input_size));
    const FrameGeometry geo{t.width(), t.height(), spec.input_width, spec.input_height};
    ts.targets.push_back(norm.normalize(geo.to_internal(shots[i].truth)));
  }
  return ts;
}

/// Image symmetries for augmentation, as bit flags applied in this order:
/// transpose (square inputs only), mirror x, mirror y.
enum Symmetry : std::uint8_t { kIdentity = 0, kMirrorX = 1, kMirrorY = 2, kTranspose = 4 };

inline int symmetry_count(int width, int height) { return width == height ? 8 : 4; }

inline void apply_symmetry(std::uint8_t code, std::span<const float> in, std::span<float> out, int w, int h,
                           int channels) {
  if ((code & kTranspose) && w != h) fail(Errc::shape, "transpose needs a square input");
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  for (int c = 0; c < channels; ++c) {
    const float* src = in.data() + c * plane;
    float* dst = out.data() + c * plane;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        int tx = x, ty = y;
        if (code & kTranspose) std::swap(tx, ty);
        if (code & kMirrorX) tx = w - 1 - tx;
        if (code & kMirrorY) ty = h - 1 - ty;
        dst[static_cast<std::size_t>(ty) * w + tx] = src[static_cast<std::size_t>(y) * w + x];
      }
    }
  }
}

/// The label of a transformed image, in internal units. Each reflection
/// negates theta; transposing also exchanges the axes.
inline ParamVector apply_symmetry(std::uint8_t code, ParamVector v, int w, int h) {
  if (code & kTranspose) {
    std::swap(v[0], v[1]);
    std::swap(v[2], v[3]);
    v[6] = -v[6];
  }
  if (code & kMirrorX) {
    v[0] = static_cast<double>(w - 1) / w - v[0];
    v[6] = -v[6];
  }
  if (code & kMirrorY) {
    v[1] = static_cast<double>(h - 1) / h - v[1];
    v[6] = -v[6];
  }
  return v;
}

/// 99th percentile of (bg - dark) over the pixels of up to 64 shots.
inline double count_scale_for(std::span<const LabeledShot> shots) {
  std::vector<double> v;
  const std::size_t n = std::min<std::size_t>(shots.size(), 64);
  for (std::size_t s = 0; s < n; ++s) {
    const auto bg = shots[s].triple.bg.counts();
    const auto dark = shots[s].triple.dark.counts();
    for (std::size_t i = 0; i < bg.size(); ++i) v.push_back(static_cast<double>(bg[i]) - dark[i]);
  }
  if (v.empty()) fail(Errc::degenerate_input, "no shots to derive the count scale from");
  const std::size_t k = std::min(v.size() - 1, static_cast<std::size_t>(0.99 * static_cast<double>(v.size())));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return std::max(v[k], 1.0);
}

template <class T>
struct AdamState {
  std::vector<T> m, v;
  long long step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, T(0)), v(n, T(0)) {}
};

/// Batch loss and its exact gradient w.r.t. every weight (written to
/// `grad`). `symmetries`, if not empty, holds one augmentation code per
/// batch entry. Samples are accumulated in batch order, so results are
/// deterministic.
template <class T>
double loss_and_gradient(const Network<T>& net, std::span<const T> weights, const TrainingSet& data,
                         std::span<const std::size_t> batch, typename Network<T>::Workspace& ws,
                         std::span<T> grad, std::span<const std::uint8_t> symmetries = {}) {
  if (batch.empty()) fail(Errc::shape, "empty batch");
  if (!symmetries.empty() && symmetries.size() != batch.size()) fail(Errc::shape, "one symmetry per sample");
  std::fill(grad.begin(), grad.end(), T(0));
  const double denom = static_cast<double>(batch.size()) * GaussianParams::kCount;
  double total = 0.0;
  std::array<T, GaussianParams::kCount> dout{};
  std::vector<T> input(data.input_size);
  std::vector<float> moved(symmetries.empty() ? 0 : data.input_size);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const std::size_t idx = batch[b];
    const std::uint8_t code = symmetries.empty() ? std::uint8_t{kIdentity} : symmetries[b];
    std::span<const float> src = data.input(idx);
    ParamVector target = data.targets[idx];
    if (code != kIdentity) {
      apply_symmetry(code, src, moved, data.width, data.height, data.channels);
      src = moved;
      const auto& nm = data.normalizer;
      target = nm.normalize(apply_symmetry(code, nm.denormalize(target), data.width, data.height));
    }
    std::copy(src.begin(), src.end(), input.begin());
    net.forward(weights, input, ws);
    for (std::size_t i = 0; i < dout.size(); ++i) {
      const double e = static_cast<double>(ws.out[i]) - target[i];
      total += e * e;
      dout[i] = static_cast<T>(2.0 * e / denom);
    }
    net.backward(weights, dout, ws, grad);
  }
  return total / denom;
}

/// One Adam step on `batch` (indices into `data`). Returns the batch loss
/// evaluated before the step.
template <class T>
double backward_and_step(const Network<T>& net, AlignedVector<T>& weights, const TrainingSet& data,
                         std::span<const std::size_t> batch, AdamState<T>& adam, const TrainConfig& hp,
                         double lr, typename Network<T>::Workspace& ws, AlignedVector<T>& grad,
                         std::span<const std::uint8_t> symmetries = {}) {
  const double batch_loss = loss_and_gradient<T>(net, weights, data, batch, ws, grad, symmetries);
  if (!std::isfinite(batch_loss)) fail(Errc::divergence, "training loss became non-finite");

  ++adam.step;
  const double c1 = 1.0 - std::pow(hp.beta1, static_cast<double>(adam.step));
  const double c2 = 1.0 - std::pow(hp.beta2, static_cast<double>(adam.step));
  const T b1 = static_cast<T>(hp.beta1), b2 = static_cast<T>(hp.beta2);
  const T step = static_cast<T>(lr / c1);
  const T inv_c2 = static_cast<T>(1.0 / c2);
  const T eps = static_cast<T>(hp.epsilon);
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const T g = grad[i];
    adam.m[i] = b1 * adam.m[i] + (T(1) - b1) * g;
    adam.v[i] = b2 * adam.v[i] + (T(1) - b2) * g * g;
    weights[i] -= step * adam.m[i] / (std::sqrt(adam.v[i] * inv_c2) + eps);
  }
  return batch_loss;
}

/// Normalized MSE of the network over `indices` of `data`.
template <class T>
double evaluate_loss(const Network<T>& net, std::span<const T> weights, const TrainingSet& data,
                     std::span<const std::size_t> indices, typename Network<T>::Workspace& ws) {
  if (indices.empty()) return 0.0;
  double total = 0.0;
  std::vector<T> input(data.input_size);
  for (std::size_t idx : indices) {
    const auto src = data.input(idx);
    std::copy(src.begin(), src.end(), input.begin());
    net.forward(weights, input, ws);
    for (std::size_t i = 0; i < GaussianParams::kCount; ++i) {
      const double e = static_cast<double>(ws.out[i]) - data.targets[idx][i];
      total += e * e;
    }
  }
  return total / (static_cast<double>(indices.size()) * GaussianParams::kCount);
}

struct DataSplit {
  std::vector<std::size_t> train, val;
};

inline DataSplit split_indices(std::size_t n, double val_fraction, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, 0x5b1f));
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  std::size_t n_val = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(n)));
  n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  DataSplit s;
  s.val.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_val));
  s.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_val), idx.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

struct TrainingRun {
  RegressorModel model;
  std::vector<EpochRecord> curve;
  double best_val_loss = 0.0;
  int best_epoch = -1;  // -1: initial weights
};

namespace detail {

inline TrainingRun run_epochs(RegressorModel model, const TrainingSet& data, const DataSplit& split,
                              const TrainConfig& hp) {
  const Network<float> net(model.spec);
  auto ws = net.make_workspace();
  AlignedVector<float> grad(net.parameter_count());
  AdamState<float> adam(net.parameter_count());
  TrainingRun run;
  run.best_val_loss = evaluate_loss<float>(net, model.weights, data, split.val, ws);
  AlignedVector<float> best = model.weights;
  std::vector<std::size_t> order = split.train;
  std::vector<std::uint8_t> codes;
  const int n_sym = symmetry_count(data.width, data.height);
  for (int epoch = 0; epoch < hp.epochs; ++epoch) {
    Rng rng(derive_seed(hp.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    if (hp.augment) {
      codes.resize(order.size());
      for (auto& c : codes) c = static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(n_sym)));
    }
    const double lr = hp.lr_at(epoch);
    double train_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(hp.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(hp.batch_size));
      const std::span<const std::size_t> batch(order.data() + start, end - start);
      const auto sym = hp.augment ? std::span<const std::uint8_t>(codes.data() + start, end - start)
                                  : std::span<const std::uint8_t>{};
      train_sum += backward_and_step<float>(net, model.weights, data, batch, adam, hp, lr, ws, grad, sym);
      ++batches;
    }
    const double val = evaluate_loss<float>(net, model.weights, data, split.val, ws);
    if (!std::isfinite(val)) fail(Errc::divergence, "validation loss became non-finite");
    run.curve.push_back({epoch, train_sum / static_cast<double>(std::max<std::size_t>(batches, 1)), val, lr});
    if (epoch == 0 || val < run.best_val_loss) {
      run.best_val_loss = val;
      run.best_epoch = epoch;
      best = model.weights;
    }
  }
  model.weights = std::move(best);
  run.model = std::move(model);
  return run;
}

inline void check_dataset(const Dataset& ds, const NetworkSpec& spec) {
  if (ds.shots.size() < 2) fail(Errc::degenerate_input, "dataset needs at least 2 shots");
  if (channel_count(ds.mode) != spec.input_channels) {
    fail(Errc::shape, "dataset mode " + std::string(to_string(ds.mode)) + " does not match a " +
                          std::to_string(spec.input_channels) + "-channel network");
  }
}

}  // namespace detail

/// Trains a fresh network on `ds`. The weights with the lowest validation
/// loss are returned (with epochs = 0, the initialized weights).
inline TrainingRun train(NetworkSpec spec, const Dataset& ds, const TrainConfig& hp,
                         const std::string& dataset_id = {}) {
  hp.validate();
  spec.validate();
  if (ds.shots.size() < 100) fail(Errc::degenerate_input, "training needs at least 100 shots");
  detail::check_dataset(ds, spec);
  const int w = ds.shots.front().triple.width(), h = ds.shots.front().triple.height();
  RegressorModel model;
  model.spec = spec;
  model.normalizer = Normalizer::from_ranges(ds.ranges, w, h, count_scale_for(ds.shots));
  model.provenance = {dataset_id, hp.seed, hp.epochs, std::string(to_string(ds.mode))};
  model.weights = Network<float>(spec).initial_weights(derive_seed(hp.seed, 0x1417));
  const TrainingSet data = make_training_set(ds.shots, spec, model.normalizer);
  const DataSplit split = split_indices(data.size(), hp.val_fraction, hp.seed);
  return detail::run_epochs(std::move(model), data, split, hp);
}

/// Continues training `model` on `ds`, keeping its normalizer. With
/// epochs = 0 the model is returned unchanged.
inline TrainingRun fine_tune(const RegressorModel& model, const Dataset& ds, const TrainConfig& hp,
                             const std::string& dataset_id = {}) {
  hp.validate();
  model.validate();
  detail::check_dataset(ds, model.spec);
  RegressorModel start = model;
  start.provenance.epochs += hp.epochs;
  if (!dataset_id.empty()) start.provenance.dataset_id = dataset_id;
  if (hp.epochs == 0) {
    TrainingRun run;
    run.model = model;
    return run;
  }
  const TrainingSet data = make_training_set(ds.shots, start.spec, start.normalizer);
  const DataSplit split = split_indices(data.size(), hp.val_fraction, hp.seed);
  return detail::run_epochs(std::move(start), data, split, hp);
}

/// Normalized MSE of `model` over all shots of `ds`.
inline double validation_loss(const RegressorModel& model, const Dataset& ds) {
  model.validate();
  detail::check_dataset(ds, model.spec);
  const TrainingSet data = make_training_set(ds.shots, model.spec, model.normalizer);
  const Network<float> net(model.spec);
  auto ws = net.make_workspace();
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return evaluate_loss<float>(net, model.weights, data, all, ws);
}

}  // namespace absorb
