#include "dfeat/numkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace dfeat {

namespace {

[[noreturn]] void dim_fail(const std::string& what) { throw DimensionError(what); }

void check_conv_input(const LayerSpec& l, const FeatureMap& in) {
  if (in.channels != l.in_channels) {
    dim_fail("conv expects " + std::to_string(l.in_channels) +
             " input channels, got " + std::to_string(in.channels));
  }
  if (in.height < l.kernel_h || in.width < l.kernel_w) {
    dim_fail("conv input " + std::to_string(in.height) + "x" +
             std::to_string(in.width) + " smaller than kernel");
  }
}

// col is (channels*kh*kw) x (oh*ow) row-major; sample `src` is (c,h,w).
void im2col(const double* src, int channels, int h, int w, int kh, int kw,
            int stride, int oh, int ow, double* col) {
  const int positions = oh * ow;
  double* dst = col;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        for (int oy = 0; oy < oh; ++oy) {
          const double* row = src + (static_cast<size_t>(c) * h + oy * stride + ky) * w + kx;
          double* out = dst + static_cast<size_t>(oy) * ow;
          if (stride == 1) {
            std::memcpy(out, row, sizeof(double) * ow);
          } else {
            for (int ox = 0; ox < ow; ++ox) out[ox] = row[ox * stride];
          }
        }
        dst += positions;
      }
    }
  }
}

// Scatter-add of a column matrix back onto the input sample.
void col2im_add(const double* col, int channels, int h, int w, int kh, int kw,
                int stride, int oh, int ow, double* dst) {
  const int positions = oh * ow;
  const double* src = col;
  for (int c = 0; c < channels; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        for (int oy = 0; oy < oh; ++oy) {
          double* row = dst + (static_cast<size_t>(c) * h + oy * stride + ky) * w + kx;
          const double* in = src + static_cast<size_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) row[ox * stride] += in[ox];
        }
        src += positions;
      }
    }
  }
}

FeatureMap conv_forward(const LayerSpec& l, const FeatureMap& in, LayerCache* cache) {
  check_conv_input(l, in);
  const int oh = (in.height - l.kernel_h) / l.stride + 1;
  const int ow = (in.width - l.kernel_w) / l.stride + 1;
  const int k = l.in_channels * l.kernel_h * l.kernel_w;
  const int positions = oh * ow;

  FeatureMap out(in.batch, l.out_channels, oh, ow);
  std::vector<double> col(static_cast<size_t>(k) * positions);
  for (int b = 0; b < in.batch; ++b) {
    im2col(in.sample(b), in.channels, in.height, in.width, l.kernel_h,
           l.kernel_w, l.stride, oh, ow, col.data());
    double* dst = out.sample(b);
    gemm_nn(l.out_channels, positions, k, l.weight.data(), col.data(), dst,
            /*accumulate=*/false);
    for (int oc = 0; oc < l.out_channels; ++oc) {
      const double bias = l.bias[oc];
      double* row = dst + static_cast<size_t>(oc) * positions;
      for (int p = 0; p < positions; ++p) row[p] += bias;
    }
  }
  if (cache) cache->input = in;
  return out;
}

FeatureMap conv_backward(const LayerSpec& l, const LayerCache& cache,
                         const FeatureMap& up, ParamGrads* grads) {
  const FeatureMap& in = cache.input;
  const int oh = (in.height - l.kernel_h) / l.stride + 1;
  const int ow = (in.width - l.kernel_w) / l.stride + 1;
  if (up.batch != in.batch || up.channels != l.out_channels ||
      up.height != oh || up.width != ow) {
    dim_fail("conv upstream gradient shape mismatch");
  }
  const int k = l.in_channels * l.kernel_h * l.kernel_w;
  const int positions = oh * ow;

  if (grads) {
    grads->weight.resize(l.weight.size(), 0.0);
    grads->bias.resize(l.bias.size(), 0.0);
  }

  FeatureMap din(in.batch, in.channels, in.height, in.width);
  std::vector<double> col(static_cast<size_t>(k) * positions);
  std::vector<double> col_t(col.size());
  std::vector<double> dcol(col.size());
  for (int b = 0; b < in.batch; ++b) {
    const double* u = up.sample(b);
    if (grads) {
      im2col(in.sample(b), in.channels, in.height, in.width, l.kernel_h,
             l.kernel_w, l.stride, oh, ow, col.data());
      transpose(col.data(), k, positions, col_t.data());
      gemm_nn(l.out_channels, k, positions, u, col_t.data(),
              grads->weight.data(), /*accumulate=*/true);
      for (int oc = 0; oc < l.out_channels; ++oc) {
        const double* row = u + static_cast<size_t>(oc) * positions;
        double acc = 0.0;
        for (int p = 0; p < positions; ++p) acc += row[p];
        grads->bias[oc] += acc;
      }
    }
    gemm_tn(k, positions, l.out_channels, l.weight.data(), u, dcol.data(),
            /*accumulate=*/false);
    col2im_add(dcol.data(), in.channels, in.height, in.width, l.kernel_h,
               l.kernel_w, l.stride, oh, ow, din.sample(b));
  }
  return din;
}

FeatureMap pool_forward(const FeatureMap& in, LayerCache* cache) {
  if (in.height % 2 != 0 || in.width % 2 != 0) {
    dim_fail("max_pool2 needs even input dims, got " +
             std::to_string(in.height) + "x" + std::to_string(in.width));
  }
  const int oh = in.height / 2, ow = in.width / 2;
  FeatureMap out(in.batch, in.channels, oh, ow);
  if (cache) {
    cache->argmax.assign(out.size(), 0);
    cache->in_batch = in.batch;
    cache->in_channels = in.channels;
    cache->in_height = in.height;
    cache->in_width = in.width;
  }
  size_t oi = 0;
  for (int b = 0; b < in.batch; ++b) {
    for (int c = 0; c < in.channels; ++c) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++oi) {
          // Scan the 2x2 block in row-major order; strict > keeps the first
          // element on ties.
          size_t best_idx = in.index(b, c, 2 * oy, 2 * ox);
          double best = in.data[best_idx];
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const size_t idx = in.index(b, c, 2 * oy + dy, 2 * ox + dx);
              if (in.data[idx] > best) {
                best = in.data[idx];
                best_idx = idx;
              }
            }
          }
          out.data[oi] = best;
          if (cache) cache->argmax[oi] = static_cast<int64_t>(best_idx);
        }
      }
    }
  }
  return out;
}

FeatureMap pool_backward(const LayerCache& cache, const FeatureMap& up) {
  if (up.batch != cache.in_batch || up.channels != cache.in_channels ||
      up.height != cache.in_height / 2 || up.width != cache.in_width / 2) {
    dim_fail("max_pool2 upstream gradient shape mismatch");
  }
  FeatureMap din(cache.in_batch, cache.in_channels, cache.in_height,
                 cache.in_width);
  for (size_t i = 0; i < up.size(); ++i) {
    din.data[static_cast<size_t>(cache.argmax[i])] += up.data[i];
  }
  return din;
}

FeatureMap tanh_forward(const FeatureMap& in, LayerCache* cache) {
  FeatureMap out = in;
  for (double& v : out.data) v = std::tanh(v);
  if (cache) cache->output = out;
  return out;
}

FeatureMap tanh_backward(const LayerCache& cache, const FeatureMap& up) {
  if (!up.same_shape(cache.output)) dim_fail("tanh upstream gradient shape mismatch");
  FeatureMap din = up;
  for (size_t i = 0; i < din.size(); ++i) {
    const double y = cache.output.data[i];
    din.data[i] *= 1.0 - y * y;
  }
  return din;
}

FeatureMap linear_forward(const LayerSpec& l, const FeatureMap& in, LayerCache* cache) {
  if (in.sample_size() != l.in_dim) {
    dim_fail("linear expects flattened length " + std::to_string(l.in_dim) +
             ", got " + std::to_string(in.sample_size()));
  }
  const int n = in.batch;
  // out^T (out_dim x n) = W (out_dim x in_dim) * in^T (in_dim x n); computing
  // through the transposed layout keeps the per-sample accumulation order
  // independent of the batch size, so batched and one-by-one runs agree
  // bitwise.
  std::vector<double> in_t(static_cast<size_t>(l.in_dim) * n);
  transpose(in.data.data(), n, l.in_dim, in_t.data());
  std::vector<double> out_t(static_cast<size_t>(l.out_dim) * n);
  gemm_nn(l.out_dim, n, l.in_dim, l.weight.data(), in_t.data(), out_t.data(),
          /*accumulate=*/false);
  FeatureMap out(n, l.out_dim, 1, 1);
  transpose(out_t.data(), l.out_dim, n, out.data.data());
  for (int b = 0; b < n; ++b) {
    double* row = out.sample(b);
    for (int o = 0; o < l.out_dim; ++o) row[o] += l.bias[o];
  }
  if (cache) cache->input = in;
  return out;
}

FeatureMap linear_backward(const LayerSpec& l, const LayerCache& cache,
                           const FeatureMap& up, ParamGrads* grads) {
  const FeatureMap& in = cache.input;
  const int n = in.batch;
  if (up.batch != n || up.sample_size() != l.out_dim) {
    dim_fail("linear upstream gradient shape mismatch");
  }
  std::vector<double> up_t(static_cast<size_t>(l.out_dim) * n);
  transpose(up.data.data(), n, l.out_dim, up_t.data());
  if (grads) {
    grads->weight.resize(l.weight.size(), 0.0);
    grads->bias.resize(l.bias.size(), 0.0);
    // dW (out x in) += up^T (out x n) * in (n x in)
    gemm_nn(l.out_dim, l.in_dim, n, up_t.data(), in.data.data(),
            grads->weight.data(), /*accumulate=*/true);
    for (int o = 0; o < l.out_dim; ++o) {
      const double* row = up_t.data() + static_cast<size_t>(o) * n;
      double acc = 0.0;
      for (int b = 0; b < n; ++b) acc += row[b];
      grads->bias[o] += acc;
    }
  }
  // din^T (in x n) = W^T (in x out) * up^T (out x n)
  std::vector<double> din_t(static_cast<size_t>(l.in_dim) * n);
  gemm_tn(l.in_dim, n, l.out_dim, l.weight.data(), up_t.data(), din_t.data(),
          /*accumulate=*/false);
  FeatureMap din(in.batch, in.channels, in.height, in.width);
  transpose(din_t.data(), l.in_dim, n, din.data.data());
  return din;
}

FeatureMap l2norm_forward(const FeatureMap& in, LayerCache* cache) {
  FeatureMap out = in;
  const int d = in.sample_size();
  std::vector<double> norms(in.batch);
  for (int b = 0; b < in.batch; ++b) {
    const double* x = in.sample(b);
    double sq = 0.0;
    for (int i = 0; i < d; ++i) sq += x[i] * x[i];
    const double norm = std::sqrt(sq);
    if (norm < 1e-12) {
      throw DegenerateError(
          "l2_normalize: input norm below 1e-12 for sample " + std::to_string(b), b);
    }
    norms[b] = norm;
    double* y = out.sample(b);
    for (int i = 0; i < d; ++i) y[i] = x[i] / norm;
  }
  if (cache) {
    cache->input = in;
    cache->output = out;
    cache->norms = std::move(norms);
  }
  return out;
}

FeatureMap l2norm_backward(const LayerCache& cache, const FeatureMap& up) {
  if (!up.same_shape(cache.output)) {
    dim_fail("l2_normalize upstream gradient shape mismatch");
  }
  // d/dx (x/|x|) applied to upstream g: (g - y <y,g>) / |x|.
  FeatureMap din = up;
  const int d = up.sample_size();
  for (int b = 0; b < up.batch; ++b) {
    const double* y = cache.output.sample(b);
    const double* g = up.sample(b);
    double dot = 0.0;
    for (int i = 0; i < d; ++i) dot += y[i] * g[i];
    double* out = din.sample(b);
    const double norm = cache.norms[b];
    for (int i = 0; i < d; ++i) out[i] = (g[i] - y[i] * dot) / norm;
  }
  return din;
}

}  // namespace

const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::Conv: return "conv";
    case LayerKind::MaxPool2: return "max_pool2";
    case LayerKind::Tanh: return "tanh";
    case LayerKind::Linear: return "linear";
    case LayerKind::L2Normalize: return "l2_normalize";
  }
  return "?";
}

LayerSpec LayerSpec::conv(int out_ch, int in_ch, int kh, int kw, int stride) {
  LayerSpec l;
  l.kind = LayerKind::Conv;
  l.out_channels = out_ch;
  l.in_channels = in_ch;
  l.kernel_h = kh;
  l.kernel_w = kw;
  l.stride = stride;
  l.weight.assign(static_cast<size_t>(out_ch) * in_ch * kh * kw, 0.0);
  l.bias.assign(out_ch, 0.0);
  return l;
}

LayerSpec LayerSpec::max_pool2() {
  LayerSpec l;
  l.kind = LayerKind::MaxPool2;
  return l;
}

LayerSpec LayerSpec::tanh() {
  LayerSpec l;
  l.kind = LayerKind::Tanh;
  return l;
}

LayerSpec LayerSpec::linear(int out_dim, int in_dim) {
  LayerSpec l;
  l.kind = LayerKind::Linear;
  l.out_dim = out_dim;
  l.in_dim = in_dim;
  l.weight.assign(static_cast<size_t>(out_dim) * in_dim, 0.0);
  l.bias.assign(out_dim, 0.0);
  return l;
}

LayerSpec LayerSpec::l2_normalize() {
  LayerSpec l;
  l.kind = LayerKind::L2Normalize;
  return l;
}

FeatureMap layer_forward(const LayerSpec& layer, const FeatureMap& input,
                         LayerCache* cache) {
  switch (layer.kind) {
    case LayerKind::Conv: return conv_forward(layer, input, cache);
    case LayerKind::MaxPool2: return pool_forward(input, cache);
    case LayerKind::Tanh: return tanh_forward(input, cache);
    case LayerKind::Linear: return linear_forward(layer, input, cache);
    case LayerKind::L2Normalize: return l2norm_forward(input, cache);
  }
  throw Error("unknown layer kind");
}

FeatureMap layer_backward(const LayerSpec& layer, const LayerCache& cache,
                          const FeatureMap& upstream, ParamGrads* grads) {
  switch (layer.kind) {
    case LayerKind::Conv: return conv_backward(layer, cache, upstream, grads);
    case LayerKind::MaxPool2: return pool_backward(cache, upstream);
    case LayerKind::Tanh: return tanh_backward(cache, upstream);
    case LayerKind::Linear: return linear_backward(layer, cache, upstream, grads);
    case LayerKind::L2Normalize: return l2norm_backward(cache, upstream);
  }
  throw Error("unknown layer kind");
}

void sgd_step(std::vector<double>& param, const std::vector<double>& grad,
              std::vector<double>& velocity, double lr, double momentum,
              double weight_decay) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    dim_fail("sgd_step: param/grad/velocity sizes disagree");
  }
  for (size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericError("sgd_step: non-finite gradient at entry " +
                         std::to_string(i));
    }
  }
  for (size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i] + weight_decay * param[i];
    velocity[i] = momentum * velocity[i] + g;
    param[i] -= lr * velocity[i];
  }
}

std::vector<double> finite_difference_gradient(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& point, double step) {
  std::vector<size_t> coords(point.size());
  for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  return finite_difference_gradient_at(f, point, step, coords);
}

std::vector<double> finite_difference_gradient_at(
    const std::function<double(const std::vector<double>&)>& f,
    const std::vector<double>& point, double step,
    const std::vector<size_t>& coords) {
  std::vector<double> grad(coords.size());
  std::vector<double> x = point;
  for (size_t ci = 0; ci < coords.size(); ++ci) {
    const size_t i = coords[ci];
    const double saved = x[i];
    x[i] = saved + step;
    const double hi = f(x);
    x[i] = saved - step;
    const double lo = f(x);
    x[i] = saved;
    if (!std::isfinite(hi) || !std::isfinite(lo)) {
      throw NumericError("finite_difference_gradient: non-finite evaluation at coordinate " +
                         std::to_string(i));
    }
    grad[ci] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    double* __restrict ci = c + static_cast<size_t>(i) * n;
    const double* ai = a + static_cast<size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double aik = ai[kk];
      const double* __restrict bk = b + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) ci[j] += aik * bk[j];
    }
  }
}

void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    double* __restrict ci = c + static_cast<size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double aki = a[static_cast<size_t>(kk) * m + i];
      const double* __restrict bk = b + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) ci[j] += aki * bk[j];
    }
  }
}

void transpose(const double* src, int rows, int cols, double* dst) {
  for (int r = 0; r < rows; ++r) {
    const double* s = src + static_cast<size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) dst[static_cast<size_t>(c) * rows + r] = s[c];
  }
}

}  // namespace dfeat
