#pragma once

// The shallow two-conv descriptor network: 1x32x32 patch in, unit-length
// 128-D descriptor out. Construction, batched inference, training-side
// forward/backward over the whole stack, and DFWT model persistence.

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "dfeat/numkit.hpp"

namespace dfeat {

inline constexpr int kPatchSize = 32;
inline constexpr int kDescriptorDim = 128;

// Normalized 32x32 grayscale sample around a keypoint.
struct Patch {
  std::array<double, kPatchSize * kPatchSize> pixels{};
  int32_t image_id = -1;  // optional provenance
  int32_t x = 0, y = 0;
};

using Descriptor = std::vector<double>;

struct Model {
  std::vector<LayerSpec> layers;
  uint8_t architecture = 0;  // 0 = two-conv 32x32 -> 128 design
  uint64_t seed = 0;
};

// Conv(32,7x7) -> Tanh -> MaxPool2 -> Conv(64,6x6) -> Tanh ->
// Linear(4096->128) -> Tanh -> L2Normalize, weights uniform in [-b, b] with
// b = sqrt(6/(fan_in+fan_out)), biases zero. Deterministic in `seed`.
Model build_model(uint64_t seed);

size_t parameter_count(const Model& model);

// Stacks patches into a (n,1,32,32) input tensor.
FeatureMap patches_to_input(const std::vector<Patch>& patches);

// Runs every layer; fills one cache per layer when `caches` is non-null.
FeatureMap model_forward(const Model& model, const FeatureMap& input,
                         std::vector<LayerCache>* caches = nullptr);

struct ModelGrads {
  std::vector<ParamGrads> layers;  // aligned with model.layers
};

ModelGrads make_zero_grads(const Model& model);

// Backpropagates `upstream` through the stack, accumulating parameter
// gradients into `grads`. Returns the gradient w.r.t. the input.
FeatureMap model_backward(const Model& model, const std::vector<LayerCache>& caches,
                          const FeatureMap& upstream, ModelGrads& grads);

Descriptor describe_patch(const Model& model, const Patch& patch);

// Elementwise identical to describe_patch on each entry; processes patches
// in fixed-size chunks. DegenerateError carries the offending patch index.
std::vector<Descriptor> describe_batch(const Model& model,
                                       const std::vector<Patch>& patches);

// Momentum buffers for every parameterized layer plus the hyperparameters.
struct OptimizerState {
  double lr = 0.01, momentum = 0.9, weight_decay = 0.0001;
  struct Slot {
    std::vector<double> weight, bias;
  };
  std::vector<Slot> velocity;  // aligned with model.layers
};

OptimizerState make_optimizer_state(const Model& model, double lr,
                                    double momentum, double weight_decay);

// Validates every gradient array before mutating anything; NumericError
// names the offending layer. Then applies sgd_step per parameter array.
void model_sgd_step(Model& model, const ModelGrads& grads, OptimizerState& state);

// Parameters rounded through 32-bit floats, as model files store them.
Model round_params_to_f32(const Model& model);

// DFWT file: magic "DFWT", version u32, architecture u8, parameterized layer
// count u32, then per layer a kind tag, its dims and f32 parameter arrays.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

// DFDS descriptor file: magic "DFDS", version u32, count u32, dim u32, then
// count*dim f32 values.
void save_descriptors(const std::vector<Descriptor>& descriptors,
                      const std::filesystem::path& path);
std::vector<Descriptor> load_descriptors(const std::filesystem::path& path);

}  // namespace dfeat
