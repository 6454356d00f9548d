#pragma once

#include <map>
#include <string>

#include "sketchssl/rng.hpp"
#include "sketchssl/tensor.hpp"

namespace sketchssl {

/// Named model parameters plus Adam moment buffers. std::map keeps every
/// iteration order deterministic, which checkpoint bytes depend on.
struct ParameterStore {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, Tensor> adam_m;
  std::map<std::string, Tensor> adam_v;

  Tensor& add(const std::string& name, Tensor init) {
    require(!tensors.count(name), ErrorCode::ConfigError,
            "duplicate parameter '" + name + "'");
    return tensors[name] = std::move(init);
  }
  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  Tensor& at(const std::string& name) {
    auto it = tensors.find(name);
    require(it != tensors.end(), ErrorCode::ConfigError,
            "unknown parameter '" + name + "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), ErrorCode::ConfigError,
            "unknown parameter '" + name + "'");
    return it->second;
  }
  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& [k, v] : tensors) n += v.numel();
    return n;
  }
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient norm ceiling
  bool clip = true;
};

/// Adam with optional global-norm gradient clipping. The step counter is
/// serialized through checkpoints so resumed training continues the bias
/// correction exactly.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void update(ParameterStore& store, std::map<std::string, Tensor> grads);

  long long step_count() const { return step_; }
  void set_step_count(long long t) { step_ = t; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  long long step_ = 0;
};

// Initializers used by every model component.
Tensor he_normal(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng);
Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                      std::size_t fan_out, Rng& rng);

}  // namespace sketchssl
