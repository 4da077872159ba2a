#include "dfeat/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace dfeat {

namespace {

constexpr uint32_t kModelVersion = 1;
constexpr int kDescribeChunk = 64;

void init_uniform(std::vector<double>& w, double bound, Rng& rng) {
  for (double& v : w) v = rng.uniform(-bound, bound);
}

double fan_bound(int fan_in, int fan_out) {
  return std::sqrt(6.0 / (fan_in + fan_out));
}

Descriptor descriptor_from_output(const FeatureMap& out, int b) {
  const double* row = out.sample(b);
  return Descriptor(row, row + kDescriptorDim);
}

}  // namespace

Model build_model(uint64_t seed) {
  Model m;
  m.architecture = 0;
  m.seed = seed;
  Rng rng(seed);

  LayerSpec c1 = LayerSpec::conv(32, 1, 7, 7);
  init_uniform(c1.weight, fan_bound(1 * 7 * 7, 32 * 7 * 7), rng);
  LayerSpec c2 = LayerSpec::conv(64, 32, 6, 6);
  init_uniform(c2.weight, fan_bound(32 * 6 * 6, 64 * 6 * 6), rng);
  LayerSpec fc = LayerSpec::linear(kDescriptorDim, 64 * 8 * 8);
  init_uniform(fc.weight, fan_bound(64 * 8 * 8, kDescriptorDim), rng);

  m.layers.push_back(std::move(c1));
  m.layers.push_back(LayerSpec::tanh());
  m.layers.push_back(LayerSpec::max_pool2());
  m.layers.push_back(std::move(c2));
  m.layers.push_back(LayerSpec::tanh());
  m.layers.push_back(std::move(fc));
  m.layers.push_back(LayerSpec::tanh());
  m.layers.push_back(LayerSpec::l2_normalize());
  return m;
}

size_t parameter_count(const Model& model) {
  size_t n = 0;
  for (const LayerSpec& l : model.layers) n += l.weight.size() + l.bias.size();
  return n;
}

FeatureMap patches_to_input(const std::vector<Patch>& patches) {
  FeatureMap in(static_cast<int>(patches.size()), 1, kPatchSize, kPatchSize);
  for (size_t i = 0; i < patches.size(); ++i) {
    std::memcpy(in.sample(static_cast<int>(i)), patches[i].pixels.data(),
                sizeof(double) * patches[i].pixels.size());
  }
  return in;
}

FeatureMap model_forward(const Model& model, const FeatureMap& input,
                         std::vector<LayerCache>* caches) {
  if (caches) caches->assign(model.layers.size(), LayerCache{});
  FeatureMap x = input;
  for (size_t i = 0; i < model.layers.size(); ++i) {
    x = layer_forward(model.layers[i], x, caches ? &(*caches)[i] : nullptr);
  }
  return x;
}

ModelGrads make_zero_grads(const Model& model) {
  ModelGrads g;
  g.layers.resize(model.layers.size());
  for (size_t i = 0; i < model.layers.size(); ++i) {
    if (model.layers[i].has_params()) {
      g.layers[i].weight.assign(model.layers[i].weight.size(), 0.0);
      g.layers[i].bias.assign(model.layers[i].bias.size(), 0.0);
    }
  }
  return g;
}

FeatureMap model_backward(const Model& model, const std::vector<LayerCache>& caches,
                          const FeatureMap& upstream, ModelGrads& grads) {
  if (caches.size() != model.layers.size() ||
      grads.layers.size() != model.layers.size()) {
    throw DimensionError("model_backward: cache/grads not aligned with layers");
  }
  FeatureMap g = upstream;
  for (size_t i = model.layers.size(); i-- > 0;) {
    ParamGrads* pg = model.layers[i].has_params() ? &grads.layers[i] : nullptr;
    g = layer_backward(model.layers[i], caches[i], g, pg);
  }
  return g;
}

Descriptor describe_patch(const Model& model, const Patch& patch) {
  FeatureMap out = model_forward(model, patches_to_input({patch}));
  return descriptor_from_output(out, 0);
}

std::vector<Descriptor> describe_batch(const Model& model,
                                       const std::vector<Patch>& patches) {
  if (patches.empty()) throw ConstraintError("describe_batch: empty patch list");
  std::vector<Descriptor> result;
  result.reserve(patches.size());
  for (size_t start = 0; start < patches.size(); start += kDescribeChunk) {
    const size_t end = std::min(patches.size(), start + kDescribeChunk);
    std::vector<Patch> chunk(patches.begin() + start, patches.begin() + end);
    FeatureMap out;
    try {
      out = model_forward(model, patches_to_input(chunk));
    } catch (const DegenerateError& e) {
      const long idx = e.index() >= 0 ? static_cast<long>(start) + e.index() : -1;
      throw DegenerateError("describe_batch: degenerate patch at index " +
                                std::to_string(idx), idx);
    }
    for (int b = 0; b < out.batch; ++b) result.push_back(descriptor_from_output(out, b));
  }
  return result;
}

OptimizerState make_optimizer_state(const Model& model, double lr,
                                    double momentum, double weight_decay) {
  OptimizerState s;
  s.lr = lr;
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  s.velocity.resize(model.layers.size());
  for (size_t i = 0; i < model.layers.size(); ++i) {
    s.velocity[i].weight.assign(model.layers[i].weight.size(), 0.0);
    s.velocity[i].bias.assign(model.layers[i].bias.size(), 0.0);
  }
  return s;
}

void model_sgd_step(Model& model, const ModelGrads& grads, OptimizerState& state) {
  if (grads.layers.size() != model.layers.size() ||
      state.velocity.size() != model.layers.size()) {
    throw DimensionError("model_sgd_step: grads/state not aligned with layers");
  }
  auto all_finite = [](const std::vector<double>& v) {
    for (double x : v) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  };
  for (size_t i = 0; i < model.layers.size(); ++i) {
    if (!model.layers[i].has_params()) continue;
    if (!all_finite(grads.layers[i].weight) || !all_finite(grads.layers[i].bias)) {
      throw NumericError("model_sgd_step: non-finite gradient in layer " +
                         std::to_string(i) + " (" +
                         layer_kind_name(model.layers[i].kind) + ")");
    }
  }
  for (size_t i = 0; i < model.layers.size(); ++i) {
    if (!model.layers[i].has_params()) continue;
    sgd_step(model.layers[i].weight, grads.layers[i].weight,
             state.velocity[i].weight, state.lr, state.momentum,
             state.weight_decay);
    sgd_step(model.layers[i].bias, grads.layers[i].bias,
             state.velocity[i].bias, state.lr, state.momentum,
             state.weight_decay);
  }
}

Model round_params_to_f32(const Model& model) {
  Model m = model;
  for (LayerSpec& l : m.layers) {
    for (double& v : l.weight) v = static_cast<double>(static_cast<float>(v));
    for (double& v : l.bias) v = static_cast<double>(static_cast<float>(v));
  }
  return m;
}

void save_model(const Model& model, const std::filesystem::path& path) {
  ByteWriter w;
  w.raw("DFWT", 4);
  w.u32(kModelVersion);
  w.u8(model.architecture);
  uint32_t param_layers = 0;
  for (const LayerSpec& l : model.layers) {
    if (l.has_params()) ++param_layers;
  }
  w.u32(param_layers);
  for (const LayerSpec& l : model.layers) {
    if (!l.has_params()) continue;
    if (l.kind == LayerKind::Conv) {
      w.u8(0);
      w.u32(static_cast<uint32_t>(l.out_channels));
      w.u32(static_cast<uint32_t>(l.in_channels));
      w.u32(static_cast<uint32_t>(l.kernel_h));
      w.u32(static_cast<uint32_t>(l.kernel_w));
      w.u32(static_cast<uint32_t>(l.stride));
    } else {
      w.u8(1);
      w.u32(static_cast<uint32_t>(l.out_dim));
      w.u32(static_cast<uint32_t>(l.in_dim));
    }
    for (double v : l.weight) w.f32(static_cast<float>(v));
    for (double v : l.bias) w.f32(static_cast<float>(v));
  }
  write_file_atomic(path, w.data());
}

Model load_model(const std::filesystem::path& path) {
  ByteReader r(read_file(path), path.string());
  r.expect_magic("DFWT");
  const uint32_t version = r.u32();
  if (version != kModelVersion) {
    r.fail("unsupported version " + std::to_string(version));
  }
  const uint8_t architecture = r.u8();
  if (architecture != 0) r.fail("unknown architecture tag");
  const uint32_t param_layers = r.u32();
  if (param_layers != 3) r.fail("architecture 0 expects 3 parameterized layers");

  Model m = build_model(0);
  m.architecture = architecture;
  m.seed = 0;
  for (LayerSpec& l : m.layers) {
    if (!l.has_params()) continue;
    const uint8_t tag = r.u8();
    if (l.kind == LayerKind::Conv) {
      if (tag != 0) r.fail("expected conv layer tag");
      const uint32_t oc = r.u32(), ic = r.u32(), kh = r.u32(), kw = r.u32(),
                     stride = r.u32();
      if (static_cast<int>(oc) != l.out_channels || static_cast<int>(ic) != l.in_channels ||
          static_cast<int>(kh) != l.kernel_h || static_cast<int>(kw) != l.kernel_w ||
          static_cast<int>(stride) != l.stride) {
        r.fail("conv dims do not match architecture 0");
      }
    } else {
      if (tag != 1) r.fail("expected linear layer tag");
      const uint32_t od = r.u32(), id = r.u32();
      if (static_cast<int>(od) != l.out_dim || static_cast<int>(id) != l.in_dim) {
        r.fail("linear dims do not match architecture 0");
      }
    }
    for (double& v : l.weight) v = static_cast<double>(r.f32());
    for (double& v : l.bias) v = static_cast<double>(r.f32());
  }
  r.expect_end();
  return m;
}

void save_descriptors(const std::vector<Descriptor>& descriptors,
                      const std::filesystem::path& path) {
  const uint32_t dim = descriptors.empty()
                           ? kDescriptorDim
                           : static_cast<uint32_t>(descriptors[0].size());
  ByteWriter w;
  w.raw("DFDS", 4);
  w.u32(1);
  w.u32(static_cast<uint32_t>(descriptors.size()));
  w.u32(dim);
  for (const Descriptor& d : descriptors) {
    if (d.size() != dim) throw DimensionError("save_descriptors: ragged descriptors");
    for (double v : d) w.f32(static_cast<float>(v));
  }
  write_file_atomic(path, w.data());
}

std::vector<Descriptor> load_descriptors(const std::filesystem::path& path) {
  ByteReader r(read_file(path), path.string());
  r.expect_magic("DFDS");
  const uint32_t version = r.u32();
  if (version != 1) r.fail("unsupported version " + std::to_string(version));
  const uint32_t count = r.u32();
  const uint32_t dim = r.u32();
  if (dim < 1) r.fail("descriptor dim must be positive");
  if (r.remaining() != static_cast<size_t>(count) * dim * 4) {
    r.fail("payload size mismatch for " + std::to_string(count) + " descriptors");
  }
  std::vector<Descriptor> out(count, Descriptor(dim));
  for (uint32_t i = 0; i < count; ++i) {
    for (uint32_t j = 0; j < dim; ++j) out[i][j] = static_cast<double>(r.f32());
  }
  r.expect_end();
  return out;
}

}  // namespace dfeat
