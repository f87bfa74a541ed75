#ifndef ICE_TENSOR_HPP
#define ICE_TENSOR_HPP

#include "ice/common.hpp"

#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

namespace ice {

/// On-disk element width. Values are always held as double in memory.
enum class DType { f32, f64 };

/// Dense row-major n-d array of doubles.
///
/// The dtype records the width the tensor was read with (or should be written
/// with); a tensor read from a float32 file writes back as float32 so that the
/// round trip is bit-exact.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> shape, std::vector<double> data, DType dtype = DType::f64)
      : shape_(std::move(shape)), data_(std::move(data)), dtype_(dtype) {
    if (element_count(shape_) != data_.size()) {
      throw ValidationError("tensor shape holds " + std::to_string(element_count(shape_)) +
                            " elements but data has " + std::to_string(data_.size()));
    }
    for (double v : data_) {
      if (!std::isfinite(v)) throw ValidationError("tensor contains NaN or infinity");
    }
  }

  static Tensor from_matrix(const Matrix& m, DType dtype = DType::f64) {
    std::vector<double> data(m.data(), m.data() + m.size());
    return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                  std::move(data), dtype);
  }

  static Tensor from_vector(const Vector& v, DType dtype = DType::f64) {
    return Tensor({static_cast<std::size_t>(v.size())},
                  std::vector<double>(v.data(), v.data() + v.size()), dtype);
  }

  static std::size_t element_count(std::span<const std::size_t> shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::span<const double> data() const { return data_; }
  DType dtype() const { return dtype_; }

  /// Interpret a rank-2 tensor as a matrix (rank 1 becomes a single column).
  Matrix to_matrix() const {
    if (rank() == 2) {
      Matrix m(static_cast<Eigen::Index>(shape_[0]), static_cast<Eigen::Index>(shape_[1]));
      std::copy(data_.begin(), data_.end(), m.data());
      return m;
    }
    if (rank() == 1) {
      Matrix m(static_cast<Eigen::Index>(shape_[0]), 1);
      std::copy(data_.begin(), data_.end(), m.data());
      return m;
    }
    throw ValidationError("expected a rank-1 or rank-2 tensor, got rank " + std::to_string(rank()));
  }

  Vector to_vector() const {
    if (rank() != 1 && !(rank() == 2 && (shape_[0] == 1 || shape_[1] == 1))) {
      throw ValidationError("expected a vector-shaped tensor");
    }
    return Eigen::Map<const Vector>(data_.data(), static_cast<Eigen::Index>(data_.size()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::vector<std::size_t> shape_{0};
  std::vector<double> data_;
  DType dtype_ = DType::f64;
};

/// Channel-last activations (n x h x w x c) from one CNN layer.
class FeatureMapBatch {
 public:
  FeatureMapBatch(std::size_t n, std::size_t h, std::size_t w, std::size_t c,
                  std::vector<double> data, bool require_non_negative = true)
      : n_(n), h_(h), w_(w), c_(c) {
    detail::require(n >= 1 && h >= 1 && w >= 1 && c >= 1,
                    "feature map dimensions must all be at least 1");
    values_ = Tensor({n, h, w, c}, std::move(data));
    if (require_non_negative) {
      for (double v : values_.data()) {
        if (v < 0.0) throw ValidationError("feature map has a negative entry");
      }
    }
  }

  explicit FeatureMapBatch(const Tensor& t, bool require_non_negative = true)
      : FeatureMapBatch(checked_dim(t, 0), checked_dim(t, 1), checked_dim(t, 2), checked_dim(t, 3),
                        std::vector<double>(t.data().begin(), t.data().end()), require_non_negative) {}

  std::size_t n() const { return n_; }
  std::size_t h() const { return h_; }
  std::size_t w() const { return w_; }
  std::size_t c() const { return c_; }
  std::size_t positions_per_image() const { return h_ * w_; }

  const Tensor& tensor() const { return values_; }
  std::span<const double> data() const { return values_.data(); }

  double at(std::size_t i, std::size_t j, std::size_t k, std::size_t ch) const {
    return values_.data()[((i * h_ + j) * w_ + k) * c_ + ch];
  }

  /// The images [first, first + count) as a new batch.
  FeatureMapBatch slice(std::size_t first, std::size_t count) const {
    detail::require(count >= 1 && first + count <= n_, "image slice out of range");
    const std::size_t stride = h_ * w_ * c_;
    auto begin = values_.data().begin() + static_cast<std::ptrdiff_t>(first * stride);
    return FeatureMapBatch(count, h_, w_, c_,
                           std::vector<double>(begin, begin + static_cast<std::ptrdiff_t>(count * stride)),
                           false);
  }

  /// The listed images, in the given order.
  FeatureMapBatch select(std::span<const std::size_t> images) const {
    detail::require(!images.empty(), "empty image selection");
    const std::size_t stride = h_ * w_ * c_;
    std::vector<double> out;
    out.reserve(images.size() * stride);
    for (std::size_t i : images) {
      detail::require(i < n_, "image index out of range");
      auto begin = values_.data().begin() + static_cast<std::ptrdiff_t>(i * stride);
      out.insert(out.end(), begin, begin + static_cast<std::ptrdiff_t>(stride));
    }
    return FeatureMapBatch(images.size(), h_, w_, c_, std::move(out), false);
  }

 private:
  static std::size_t checked_dim(const Tensor& t, std::size_t axis) {
    if (t.rank() != 4) {
      throw ValidationError("feature map must be rank 4, got rank " + std::to_string(t.rank()));
    }
    return t.shape()[axis];
  }

  std::size_t n_, h_, w_, c_;
  Tensor values_;
};

/// (n*h*w) x c matrix; row i*h*w + j*w + k is the channel vector at image i, position (j,k).
inline Matrix flatten_channels(const FeatureMapBatch& a) {
  Matrix v(static_cast<Eigen::Index>(a.n() * a.h() * a.w()), static_cast<Eigen::Index>(a.c()));
  std::copy(a.data().begin(), a.data().end(), v.data());
  return v;
}

inline FeatureMapBatch unflatten(const Matrix& v, std::size_t n, std::size_t h, std::size_t w,
                                 bool require_non_negative = false) {
  if (static_cast<std::size_t>(v.rows()) != n * h * w) {
    throw ValidationError("cannot unflatten " + std::to_string(v.rows()) + " rows into " +
                          std::to_string(n) + "x" + std::to_string(h) + "x" + std::to_string(w));
  }
  return FeatureMapBatch(n, h, w, static_cast<std::size_t>(v.cols()),
                         std::vector<double>(v.data(), v.data() + v.size()), require_non_negative);
}

/// Mean over each image's consecutive block of `positions` rows. n x cols.
inline Matrix block_row_means(const Matrix& v, std::size_t positions) {
  detail::require(positions >= 1 && static_cast<std::size_t>(v.rows()) % positions == 0,
                  "row count is not a multiple of the block size");
  const auto n = static_cast<Eigen::Index>(static_cast<std::size_t>(v.rows()) / positions);
  const auto p = static_cast<Eigen::Index>(positions);
  Matrix out(n, v.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    out.row(i) = v.middleRows(i * p, p).colwise().sum() / static_cast<double>(positions);
  }
  return out;
}

/// Global average pooling over the spatial axes. n x c.
inline Matrix gap(const FeatureMapBatch& a) {
  return block_row_means(flatten_channels(a), a.positions_per_image());
}

/// Permute an n x c x h x w tensor to channel-last.
inline FeatureMapBatch to_channel_last(const Tensor& t, bool require_non_negative = true) {
  if (t.rank() != 4) {
    throw ValidationError("channel-first tensor must be rank 4, got rank " + std::to_string(t.rank()));
  }
  const auto& s = t.shape();
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  std::vector<double> out(t.size());
  auto src = t.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t j = 0; j < h; ++j)
        for (std::size_t k = 0; k < w; ++k)
          out[((i * h + j) * w + k) * c + ch] = src[((i * c + ch) * h + j) * w + k];
  return FeatureMapBatch(n, h, w, c, std::move(out), require_non_negative);
}

/// Inverse of to_channel_last: n x c x h x w.
inline Tensor to_channel_first(const FeatureMapBatch& a, DType dtype = DType::f64) {
  const std::size_t n = a.n(), c = a.c(), h = a.h(), w = a.w();
  std::vector<double> out(a.data().size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < h; ++j)
      for (std::size_t k = 0; k < w; ++k)
        for (std::size_t ch = 0; ch < c; ++ch)
          out[((i * c + ch) * h + j) * w + k] = a.at(i, j, k, ch);
  return Tensor({n, c, h, w}, std::move(out), dtype);
}

}  // namespace ice

#endif  // ICE_TENSOR_HPP
