#pragma once

// Minimal differentiable numeric kernels: valid cross-correlation, 2x2 max
// pooling, tanh, fully connected and L2 normalization, each paired with an
// exact analytic backward pass. Also SGD with momentum and weight decay, and
// a central finite-difference oracle for gradient checks.
//
// Everything computes in 64-bit floats and is a pure function of its inputs,
// so identical calls give bitwise-identical results.

#include <cstdint>
#include <functional>
#include <vector>

#include "dfeat/common.hpp"

namespace dfeat {

// Dense activation tensor, row-major (batch, channel, row, col).
struct FeatureMap {
  int batch = 0, channels = 0, height = 0, width = 0;
  std::vector<double> data;

  FeatureMap() = default;
  FeatureMap(int b, int c, int h, int w)
      : batch(b),
        channels(c),
        height(h),
        width(w),
        data(static_cast<size_t>(b) * c * h * w, 0.0) {}

  size_t size() const { return data.size(); }
  size_t index(int b, int c, int y, int x) const {
    return ((static_cast<size_t>(b) * channels + c) * height + y) * width + x;
  }
  double at(int b, int c, int y, int x) const { return data[index(b, c, y, x)]; }
  double& at(int b, int c, int y, int x) { return data[index(b, c, y, x)]; }
  bool same_shape(const FeatureMap& o) const {
    return batch == o.batch && channels == o.channels && height == o.height &&
           width == o.width;
  }
  // Elements per sample.
  int sample_size() const { return channels * height * width; }
  const double* sample(int b) const { return data.data() + static_cast<size_t>(b) * sample_size(); }
  double* sample(int b) { return data.data() + static_cast<size_t>(b) * sample_size(); }
};

enum class LayerKind : uint8_t { Conv, MaxPool2, Tanh, Linear, L2Normalize };

const char* layer_kind_name(LayerKind kind);

// One layer with its parameters. Conv holds weight (out*in*kh*kw) + bias
// (out); Linear holds weight (out_dim*in_dim) + bias (out_dim); the other
// kinds are parameter-free.
struct LayerSpec {
  LayerKind kind = LayerKind::Tanh;

  int out_channels = 0, in_channels = 0, kernel_h = 0, kernel_w = 0, stride = 1;
  int out_dim = 0, in_dim = 0;

  std::vector<double> weight, bias;

  static LayerSpec conv(int out_ch, int in_ch, int kh, int kw, int stride = 1);
  static LayerSpec max_pool2();
  static LayerSpec tanh();
  static LayerSpec linear(int out_dim, int in_dim);
  static LayerSpec l2_normalize();

  bool has_params() const {
    return kind == LayerKind::Conv || kind == LayerKind::Linear;
  }
};

// Whatever the backward pass of one layer needs from its forward pass.
struct LayerCache {
  FeatureMap input;             // Conv, Linear, L2Normalize
  FeatureMap output;            // Tanh (y), L2Normalize (normalized y)
  std::vector<int64_t> argmax;  // MaxPool2: flat input index per output cell
  int in_batch = 0, in_channels = 0, in_height = 0, in_width = 0;  // MaxPool2
  std::vector<double> norms;    // L2Normalize: per-sample input norm
};

struct ParamGrads {
  std::vector<double> weight, bias;  // empty for parameter-free layers
};

// Runs one layer. When `cache` is non-null it is filled for layer_backward.
// Throws DimensionError on shape mismatch and DegenerateError when
// L2Normalize sees a per-sample norm below 1e-12.
FeatureMap layer_forward(const LayerSpec& layer, const FeatureMap& input,
                         LayerCache* cache = nullptr);

// Exact gradients of the forward map. `upstream` must have the forward
// output's shape. Parameter gradients accumulate into `grads` when given
// (arrays are sized on first use).
FeatureMap layer_backward(const LayerSpec& layer, const LayerCache& cache,
                          const FeatureMap& upstream, ParamGrads* grads = nullptr);

// v <- momentum*v + (grad + weight_decay*param); param <- param - lr*v.
// Validates the gradient before touching anything; a non-finite entry aborts
// the whole step with NumericError.
void sgd_step(std::vector<double>& param, const std::vector<double>& grad,
              std::vector<double>& velocity, double lr, double momentum,
              double weight_decay);

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
std::vector<double> finite_difference_gradient(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& point, double step);

// Same, restricted to a subset of coordinates (for large parameter arrays).
std::vector<double> finite_difference_gradient_at(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& point, double step,
    const std::vector<size_t>& coords);

// --- low-level kernels shared with the network code ---

// C (MxN) = A (MxK) * B (KxN), all row-major contiguous.
void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c,
             bool accumulate);
// C (MxN) = A^T * B with A stored (KxM), B (KxN).
void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c,
             bool accumulate);
void transpose(const double* src, int rows, int cols, double* dst);

}  // namespace dfeat
