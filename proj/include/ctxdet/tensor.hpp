#pragma once

// Dense f64 tensors, the parameter structs built on them, and the forward
// kernels shared by the autodiff tape (tape.hpp) and plain evaluation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace ctxdet {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class EmptyInputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Row-major dense array of doubles with an optional gradient buffer.
///
/// Every extent is positive, so a Tensor always holds at least one element.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_numel(shape_) != data_.size())
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }

  static Tensor from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty() || rows.front().empty())
      throw EmptyInputError("from_rows: empty matrix");
    const std::size_t cols = rows.front().size();
    std::vector<double> flat;
    flat.reserve(rows.size() * cols);
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("from_rows: ragged rows");
      flat.insert(flat.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(flat));
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t rows() const {
    require_rank2("rows");
    return shape_[0];
  }
  std::size_t cols() const {
    require_rank2("cols");
    return shape_[1];
  }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> row(std::size_t r) {
    return std::span<double>(data_).subspan(r * shape_[1], shape_[1]);
  }
  std::span<const double> row(std::size_t r) const {
    return std::span<const double>(data_).subspan(r * shape_[1], shape_[1]);
  }

  bool has_grad() const { return grad_.has_value(); }
  std::vector<double>& grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0);
    return *grad_;
  }
  const std::optional<std::vector<double>>& grad_opt() const { return grad_; }
  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }
  void drop_grad() { grad_.reset(); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  void reshape(Shape s) {
    check_shape(s);
    if (shape_numel(s) != data_.size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    shape_ = std::move(s);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void check_shape(const Shape& s) {
    if (s.empty()) throw DimensionError("tensor shape must have at least one extent");
    for (std::size_t e : s)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(s));
  }
  void require_rank2(const char* what) const {
    if (shape_.size() != 2)
      throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
};

/// Affine map y = x W + b with W stored D_in x D_out.
struct LinearParams {
  Tensor weight;
  Tensor bias;

  LinearParams() = default;
  LinearParams(std::size_t d_in, std::size_t d_out)
      : weight(Tensor::matrix(d_in, d_out)), bias(Tensor({d_out})) {}

  std::size_t in_dim() const { return weight.rows(); }
  std::size_t out_dim() const { return weight.cols(); }
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
  double eps = 1e-5;

  LayerNormParams() = default;
  explicit LayerNormParams(std::size_t d, double eps_ = 1e-5)
      : gain(Tensor({d}, 1.0)), bias(Tensor({d}, 0.0)), eps(eps_) {}

  std::size_t dim() const { return gain.size(); }
};

using Mlp = std::vector<LinearParams>;

/// Layer widths {d0, d1, ..., dk} -> k zero-initialised layers.
inline Mlp make_mlp(std::span<const std::size_t> widths) {
  if (widths.size() < 2) throw ConfigError("an MLP needs at least an input and an output width");
  Mlp layers;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) layers.emplace_back(widths[i], widths[i + 1]);
  return layers;
}
inline Mlp make_mlp(std::initializer_list<std::size_t> widths) {
  return make_mlp(std::span<const std::size_t>(widths.begin(), widths.size()));
}

inline void check_mlp_chain(const Mlp& layers, std::size_t d_in) {
  if (layers.empty()) throw ConfigError("MLP has no layers");
  std::size_t d = d_in;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].in_dim() != d)
      throw ConfigError("MLP layer " + std::to_string(i) + " expects width " +
                        std::to_string(layers[i].in_dim()) + " but receives " + std::to_string(d));
    if (layers[i].bias.size() != layers[i].out_dim())
      throw ConfigError("MLP layer " + std::to_string(i) + " bias width mismatch");
    d = layers[i].out_dim();
  }
}

namespace kernel {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

// out[n x m] (+)= a[n x k] * b[k x m]
inline void gemm_nn(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b,
                    double* out, bool accumulate) {
  const auto N = Eigen::Index(n), K = Eigen::Index(k), M = Eigen::Index(m);
  MutMap o(out, N, M);
  if (accumulate)
    o.noalias() += ConstMap(a, N, K) * ConstMap(b, K, M);
  else
    o.noalias() = ConstMap(a, N, K) * ConstMap(b, K, M);
}

// out[n x m] (+)= a[n x k] * b[m x k]^T
inline void gemm_nt(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b,
                    double* out, bool accumulate) {
  const auto N = Eigen::Index(n), K = Eigen::Index(k), M = Eigen::Index(m);
  MutMap o(out, N, M);
  if (accumulate)
    o.noalias() += ConstMap(a, N, K) * ConstMap(b, M, K).transpose();
  else
    o.noalias() = ConstMap(a, N, K) * ConstMap(b, M, K).transpose();
}

// out[n x m] (+)= a[k x n]^T * b[k x m]
inline void gemm_tn(std::size_t n, std::size_t k, std::size_t m, const double* a, const double* b,
                    double* out, bool accumulate) {
  const auto N = Eigen::Index(n), K = Eigen::Index(k), M = Eigen::Index(m);
  MutMap o(out, N, M);
  if (accumulate)
    o.noalias() += ConstMap(a, K, N).transpose() * ConstMap(b, K, M);
  else
    o.noalias() = ConstMap(a, K, N).transpose() * ConstMap(b, K, M);
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

}  // namespace kernel

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  kernel::require_matrix(a, "matmul");
  kernel::require_matrix(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  Tensor out = Tensor::matrix(a.rows(), b.cols());
  kernel::gemm_nn(a.rows(), a.cols(), b.cols(), a.data().data(), b.data().data(),
                  out.data().data(), false);
  return out;
}

/// Softmax along each row with the row maximum subtracted first.
inline Tensor row_softmax(const Tensor& x) {
  kernel::require_matrix(x, "row_softmax");
  Tensor out = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = out.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return out;
}

/// Per-row normalisation statistics kept for the backward pass.
struct LayerNormStats {
  std::vector<double> mean;
  std::vector<double> inv_std;
};

inline Tensor layer_norm(const Tensor& x, const LayerNormParams& p, LayerNormStats* stats = nullptr) {
  kernel::require_matrix(x, "layer_norm");
  const std::size_t n = x.rows(), d = x.cols();
  if (p.gain.size() != d || p.bias.size() != d)
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " vs parameters of width " +
                         std::to_string(p.gain.size()));
  if (!(p.eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  Tensor out = Tensor::matrix(n, d);
  if (stats) {
    stats->mean.assign(n, 0.0);
    stats->inv_std.assign(n, 0.0);
  }
  for (std::size_t r = 0; r < n; ++r) {
    auto in = x.row(r);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv_std = 1.0 / std::sqrt(var + p.eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < d; ++c) o[c] = (in[c] - mean) * inv_std * p.gain[c] + p.bias[c];
    if (stats) {
      stats->mean[r] = mean;
      stats->inv_std[r] = inv_std;
    }
  }
  return out;
}

struct MaxPoolResult {
  Tensor values;                     // shape {D}
  std::vector<std::size_t> argmax;   // winning row per channel
};

/// Channel-wise maximum over the rows of x. Ties go to the lowest row.
inline MaxPoolResult max_pool_set(const Tensor& x) {
  kernel::require_matrix(x, "max_pool_set");
  const std::size_t n = x.rows(), d = x.cols();
  MaxPoolResult res{Tensor({d}), std::vector<std::size_t>(d, 0)};
  for (std::size_t c = 0; c < d; ++c) res.values[c] = x.at(0, c);
  for (std::size_t r = 1; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c)
      if (x.at(r, c) > res.values[c]) {
        res.values[c] = x.at(r, c);
        res.argmax[c] = r;
      }
  return res;
}

inline Tensor linear(const Tensor& x, const LinearParams& p) {
  Tensor out = matmul(x, p.weight);
  if (p.bias.size() != out.cols())
    throw DimensionError("linear: bias of length " + std::to_string(p.bias.size()) +
                         " for output " + shape_str(out.shape()));
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += p.bias[c];
  return out;
}

/// Linear layers with ReLU between them; the last layer has no activation.
inline Tensor mlp_forward(const Tensor& x, const Mlp& layers) {
  kernel::require_matrix(x, "mlp_forward");
  check_mlp_chain(layers, x.cols());
  Tensor h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = linear(h, layers[i]);
    if (i + 1 < layers.size())
      for (double& v : h.data()) v = v > 0.0 ? v : 0.0;
  }
  return h;
}

inline Tensor transpose(const Tensor& x) {
  kernel::require_matrix(x, "transpose");
  Tensor out = Tensor::matrix(x.cols(), x.rows());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) out.at(c, r) = x.at(r, c);
  return out;
}

}  // namespace ctxdet
