#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "sketchssl/tensor.hpp"

namespace sketchssl {

/// Handle to a node in a Graph. Plain index; cheap to copy.
struct Value {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode autodiff tape over double tensors.
///
/// A Graph is built fresh for every training step: leaves are constants and
/// named parameters, interior nodes record a backward closure, and
/// backward() sweeps the tape in reverse creation order. Gradients for every
/// named parameter are then read off with param_grads().
class Graph {
 public:
  // ----- leaves -----
  Value constant(Tensor t, bool needs_grad = false);
  Value param(const std::string& name, const Tensor& t);

  // ----- elementwise -----
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value scale(Value a, double c);
  Value add_scalar(Value a, double c);
  Value sigmoid(Value a);
  Value tanh(Value a);
  Value relu(Value a);
  Value square(Value a);
  Value sqrt(Value a);  // derivative unbounded at 0; callers keep inputs away

  // ----- shape -----
  Value reshape(Value a, std::vector<std::size_t> shape);
  Value concat_cols(Value a, Value b);          // [N,D1],[N,D2] -> [N,D1+D2]
  Value slice_cols(Value a, std::size_t lo, std::size_t hi);
  Value concat_time(Value a, Value b);          // [N,T1,D],[N,T2,D] -> [N,T1+T2,D]
  Value time_slice(Value a, std::size_t t);     // [N,T,D] -> [N,D]
  Value stack_time(const std::vector<Value>& steps);  // T x [N,D] -> [N,T,D]

  // ----- linear algebra -----
  Value matmul(Value a, Value b);               // [N,K]x[K,M] -> [N,M]
  Value linear(Value x, Value w, Value b);      // x[N,K], w[M,K], b[M] -> [N,M]
  Value add_rowvec(Value x, Value v);           // [N,D] + [D]
  Value add_timevec(Value x, Value v);          // [N,T,D] + [T,D]
  Value tile_rows(Value v, std::size_t n);      // [1,D] -> [N,D]
  Value mul_rows(Value x, Value m);             // [N,D] * m[N], row broadcast
  Value lerp_rows(Value prev, Value next, Value m);  // (1-m)*prev + m*next

  // ----- reductions / row losses -----
  Value sum_all(Value a);                       // -> [1]
  Value mean_all(Value a);                      // -> [1]
  Value row_sqerr_sum(Value a, Value b);        // [N,D] pairs -> [N]
  Value row_abserr_sum(Value a, Value b);       // [N,D] pairs -> [N]
  Value xent_rows(Value logits, const std::vector<int>& labels);  // [N,K] -> [N]

  // ----- convolution / pooling (NCHW) -----
  Value conv2d(Value x, Value w, Value b, int stride, int pad);
  Value conv_transpose2d(Value x, Value w, Value b, int stride, int pad);
  Value global_max_pool(Value x);               // [N,C,H,W] -> [N,C]
  Value global_avg_pool(Value x);
  Value collapse_height_mean(Value x);          // [N,C,H,W] -> [N,W,C]

  // ----- attention / norm / embedding -----
  // Normalizes over the last dimension; x is [N,D] or [N,T,D].
  Value layer_norm(Value x, Value gamma, Value beta, double eps = 1e-5);
  // Multi-head self-attention over [N,T,D]; mask [N,T] zeroes key positions.
  Value self_attention(Value x, Value mask, Value wq, Value bq, Value wk,
                       Value bk, Value wv, Value bv, Value wo, Value bo,
                       int heads);
  // Additive (Bahdanau) scores softmaxed over time: memory [N,T,D],
  // state [N,S] -> weights [N,T]. wm [A,D], ws [A,S], v [A].
  Value additive_attention_weights(Value memory, Value state, Value wm,
                                   Value ws, Value v, Value mask);
  Value weighted_sum_time(Value memory, Value weights);  // -> [N,D]
  Value gather_rows(Value table, const std::vector<int>& indices);  // [V,D] -> [n,D]

  // ----- execution -----
  void backward(Value loss);  // loss must be a [1] scalar
  const Tensor& value(Value v) const;
  const Tensor& grad(Value v) const;
  /// Name -> accumulated gradient for every param() leaf (zeros if untouched).
  std::map<std::string, Tensor> param_grads() const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;               // allocated lazily, same shape as value
    bool needs_grad = false;
    bool grad_ready = false;   // grad tensor allocated
    std::function<void()> backward;  // may be empty for leaves
  };

  Value make(Tensor value, bool needs_grad, std::function<void()> backward = {});
  Tensor& grad_of(int id);     // allocate-on-touch accumulator
  bool wants(Value v) const { return nodes_[v.id].needs_grad; }
  const Tensor& val(Value v) const { return nodes_[v.id].value; }

  std::vector<Node> nodes_;
  std::map<std::string, int> params_;
};

}  // namespace sketchssl
