#include "sketchssl/params.hpp"

#include <cmath>

namespace sketchssl {

void Adam::update(ParameterStore& store, std::map<std::string, Tensor> grads) {
  if (cfg_.clip) {
    double norm_sq = 0.0;
    for (const auto& [name, g] : grads)
      for (double x : g.data) norm_sq += x * x;
    const double norm = std::sqrt(norm_sq);
    if (norm > cfg_.clip_norm) {
      const double s = cfg_.clip_norm / norm;
      for (auto& [name, g] : grads)
        for (double& x : g.data) x *= s;
    }
  }

  ++step_;
  const double bias1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bias2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (auto& [name, g] : grads) {
    Tensor& p = store.at(name);
    require(p.same_shape(g), ErrorCode::ShapeMismatch,
            "gradient shape mismatch for '" + name + "'");
    Tensor& m = store.adam_m.try_emplace(name, Tensor(p.shape)).first->second;
    Tensor& v = store.adam_v.try_emplace(name, Tensor(p.shape)).first->second;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bias1;
      const double v_hat = v[i] / bias2;
      p[i] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
    }
  }
}

Tensor he_normal(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : t.data) x = rng.normal(0.0, stddev);
  return t;
}

Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                      std::size_t fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& x : t.data) x = rng.uniform(-limit, limit);
  return t;
}

}  // namespace sketchssl
