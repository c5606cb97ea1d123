#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "maggen/tensor.hpp"

namespace maggen {

struct ModelConfig {
  int64_t input_dim = 0;
  std::vector<int64_t> feature_dims = {64, 32};  // last entry is the feature width
  int64_t num_classes = 0;
  std::vector<int64_t> metric_dims = {32, 16};   // last entry is the metric width
  uint64_t seed = 0;

  void validate() const;
  int64_t feature_width() const { return feature_dims.back(); }
  int64_t metric_width() const { return metric_dims.back(); }
};

// One fully-connected stack as a flat tensor list: W0, b0, W1, b1, ...
// Updates never mutate in place; apply_update returns a fresh set.
struct ParamSet {
  std::vector<Tensor> tensors;

  int64_t scalar_count() const;
  ParamSet detached() const;
};

// Feature extractor, task head and metric head. The heads both consume the
// feature extractor's output width.
struct Model {
  ModelConfig config;
  ParamSet psi;    // feature extractor
  ParamSet theta;  // task head (single linear layer to num_classes)
  ParamSet phi;    // metric head

  std::vector<Tensor> all_params() const;
};

// Deterministic init: weights ~ N(0, 2/fan_in), biases zero.
Model init_model(const ModelConfig& config);

// Linear layers with rectified-linear activations between them; the final
// layer of a stack stays linear.
Tensor mlp_forward(const ParamSet& params, const Tensor& inputs);

Tensor features(const ParamSet& psi, const Tensor& batch_inputs);
Tensor logits(const ParamSet& theta, const Tensor& feats);
// Metric embedding rows are scaled to unit Euclidean norm.
Tensor metric_embed(const ParamSet& phi, const Tensor& feats);

inline Tensor features(const Model& m, const Tensor& x) { return features(m.psi, x); }
inline Tensor logits(const Model& m, const Tensor& f) { return logits(m.theta, f); }
inline Tensor metric_embed(const Model& m, const Tensor& f) { return metric_embed(m.phi, f); }

// params - lr * grads, as a new set; the inputs are untouched.
ParamSet apply_update(const ParamSet& params, const std::vector<Tensor>& grads, double lr);

// Registers every tensor of the set as a leaf on the active tape.
ParamSet watch_params(Tape& tape, const ParamSet& params);

// Checkpoint file: "MGM1" magic, length-prefixed key=value config lines,
// parameter buffers as little-endian doubles in declaration order, and a
// trailing CRC-32 of everything after the magic.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

bool models_bitwise_equal(const Model& a, const Model& b);

}  // namespace maggen
