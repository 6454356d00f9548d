#include "sketchssl/graph.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <utility>

namespace sketchssl {
namespace {

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatrixRM>;
using CMapM = Eigen::Map<const MatrixRM>;

CMapM cmap(const Tensor& t, std::size_t rows, std::size_t cols) {
  return CMapM(t.data.data(), static_cast<Eigen::Index>(rows),
               static_cast<Eigen::Index>(cols));
}

MapM mmap(Tensor& t, std::size_t rows, std::size_t cols) {
  return MapM(t.data.data(), static_cast<Eigen::Index>(rows),
              static_cast<Eigen::Index>(cols));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Large negative logit added at masked key positions; exp() of it underflows
// to exactly zero, which is what makes padding invariance bitwise.
constexpr double kMaskNegative = -1e30;

int conv_out_size(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// x is one sample [C,H,W]; col is [C*kh*kw, out_h*out_w].
void im2col(const double* x, int c_in, int h, int w, int kh, int kw, int stride,
            int pad, int out_h, int out_w, double* col) {
  for (int c = 0; c < c_in; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        double* row = col + ((static_cast<std::size_t>(c) * kh + ki) * kw + kj) *
                                (static_cast<std::size_t>(out_h) * out_w);
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride + ki - pad;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * stride + kj - pad;
            row[static_cast<std::size_t>(oh) * out_w + ow] =
                (ih >= 0 && ih < h && iw >= 0 && iw < w)
                    ? x[(static_cast<std::size_t>(c) * h + ih) * w + iw]
                    : 0.0;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates col entries back into the [C,H,W] image.
void col2im_add(const double* col, int c_in, int h, int w, int kh, int kw,
                int stride, int pad, int out_h, int out_w, double* x) {
  for (int c = 0; c < c_in; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const double* row =
            col + ((static_cast<std::size_t>(c) * kh + ki) * kw + kj) *
                      (static_cast<std::size_t>(out_h) * out_w);
        for (int oh = 0; oh < out_h; ++oh) {
          const int ih = oh * stride + ki - pad;
          if (ih < 0 || ih >= h) continue;
          for (int ow = 0; ow < out_w; ++ow) {
            const int iw = ow * stride + kj - pad;
            if (iw < 0 || iw >= w) continue;
            x[(static_cast<std::size_t>(c) * h + ih) * w + iw] +=
                row[static_cast<std::size_t>(oh) * out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Value Graph::make(Tensor value, bool needs_grad, std::function<void()> backward) {
  nodes_.push_back(Node{std::move(value), Tensor{}, needs_grad, false,
                        std::move(backward)});
  return Value{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_of(int id) {
  Node& node = nodes_[id];
  if (!node.grad_ready) {
    node.grad = Tensor(node.value.shape);
    node.grad_ready = true;
  }
  return node.grad;
}

Value Graph::constant(Tensor t, bool needs_grad) {
  return make(std::move(t), needs_grad);
}

Value Graph::param(const std::string& name, const Tensor& t) {
  require(!params_.count(name), ErrorCode::ConfigError,
          "parameter '" + name + "' already bound in this graph");
  Value v = make(t, true);
  params_[name] = v.id;
  return v;
}

const Tensor& Graph::value(Value v) const { return nodes_[v.id].value; }

const Tensor& Graph::grad(Value v) const {
  const Node& node = nodes_[v.id];
  require(node.grad_ready, ErrorCode::ConfigError,
          "gradient requested for a node backward() never reached");
  return node.grad;
}

std::map<std::string, Tensor> Graph::param_grads() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, id] : params_) {
    const Node& node = nodes_[id];
    out[name] = node.grad_ready ? node.grad : Tensor(node.value.shape);
  }
  return out;
}

void Graph::backward(Value loss) {
  require(nodes_[loss.id].value.numel() == 1, ErrorCode::ShapeMismatch,
          "backward() needs a scalar loss, got shape " +
              shape_str(nodes_[loss.id].value.shape));
  grad_of(loss.id)[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& node = nodes_[id];
    if (node.grad_ready && node.backward) node.backward();
  }
}

// ---------------------------------------------------------------- elementwise

Value Graph::add(Value a, Value b) {
  require(val(a).same_shape(val(b)), ErrorCode::ShapeMismatch,
          "add: " + shape_str(val(a).shape) + " vs " + shape_str(val(b).shape));
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += val(b)[i];
  const bool ng = wants(a) || wants(b);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, b, r] {
      const Tensor& g = nodes_[r.id].grad;
      if (wants(a)) {
        Tensor& ga = grad_of(a.id);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (wants(b)) {
        Tensor& gb = grad_of(b.id);
        for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
      }
    };
  }
  return r;
}

Value Graph::sub(Value a, Value b) {
  require(val(a).same_shape(val(b)), ErrorCode::ShapeMismatch,
          "sub: " + shape_str(val(a).shape) + " vs " + shape_str(val(b).shape));
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= val(b)[i];
  const bool ng = wants(a) || wants(b);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, b, r] {
      const Tensor& g = nodes_[r.id].grad;
      if (wants(a)) {
        Tensor& ga = grad_of(a.id);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
      }
      if (wants(b)) {
        Tensor& gb = grad_of(b.id);
        for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
      }
    };
  }
  return r;
}

Value Graph::mul(Value a, Value b) {
  require(val(a).same_shape(val(b)), ErrorCode::ShapeMismatch,
          "mul: " + shape_str(val(a).shape) + " vs " + shape_str(val(b).shape));
  Tensor out = val(a);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= val(b)[i];
  const bool ng = wants(a) || wants(b);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, b, r] {
      const Tensor& g = nodes_[r.id].grad;
      if (wants(a)) {
        Tensor& ga = grad_of(a.id);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * val(b)[i];
      }
      if (wants(b)) {
        Tensor& gb = grad_of(b.id);
        for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * val(a)[i];
      }
    };
  }
  return r;
}

Value Graph::scale(Value a, double c) {
  Tensor out = val(a);
  for (auto& x : out.data) x *= c;
  const bool ng = wants(a);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, r, c] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& ga = grad_of(a.id);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
    };
  }
  return r;
}

Value Graph::add_scalar(Value a, double c) {
  Tensor out = val(a);
  for (auto& x : out.data) x += c;
  const bool ng = wants(a);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, r] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& ga = grad_of(a.id);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    };
  }
  return r;
}

Value Graph::sigmoid(Value a) {
  Tensor out = val(a);
  for (auto& x : out.data) x = stable_sigmoid(x);
  const bool ng = wants(a);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, r] {
      const Tensor& g = nodes_[r.id].grad;
      const Tensor& y = nodes_[r.id].value;
      Tensor& ga = grad_of(a.id);
      for (std::size_t i = 0; i < g.numel(); ++i)
        ga[i] += g[i] * y[i] * (1.0 - y[i]);
    };
  }
  return r;
}

Value Graph::tanh(Value a) {
  Tensor out = val(a);
  for (auto& x : out.data) x = std::tanh(x);
  const bool ng = wants(a);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, r] {
      const Tensor& g = nodes_[r.id].grad;
      const Tensor& y = nodes_[r.id].value;
      Tensor& ga = grad_of(a.id);
      for (std::size_t i = 0; i < g.numel(); ++i)
        ga[i] += g[i] * (1.0 - y[i] * y[i]);
    };
  }
  return r;
}

Value Graph::relu(Value a) {
  Tensor out = val(a);
  for (auto& x : out.data) x = std::max(0.0, x);
  const bool ng = wants(a);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, r] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& ga = grad_of(a.id);
      for (std::size_t i = 0; i < g.numel(); ++i)
        if (val(a)[i] > 0.0) ga[i] += g[i];
    };
  }
  return r;
}

Value Graph::square(Value a) {
  Tensor out = val(a);
  for (auto& x : out.data) x *= x;
  const bool ng = wants(a);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, r] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& ga = grad_of(a.id);
      for (std::size_t i = 0; i < g.numel(); ++i)
        ga[i] += 2.0 * val(a)[i] * g[i];
    };
  }
  return r;
}

Value Graph::sqrt(Value a) {
  Tensor out = val(a);
  for (auto& x : out.data) x = std::sqrt(x);
  const bool ng = wants(a);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, r] {
      const Tensor& g = nodes_[r.id].grad;
      const Tensor& y = nodes_[r.id].value;
      Tensor& ga = grad_of(a.id);
      for (std::size_t i = 0; i < g.numel(); ++i)
        ga[i] += g[i] * 0.5 / y[i];
    };
  }
  return r;
}

// --------------------------------------------------------------------- shape

Value Graph::reshape(Value a, std::vector<std::size_t> shape) {
  require(Tensor::numel_of(shape) == val(a).numel(), ErrorCode::ShapeMismatch,
          "reshape: " + shape_str(val(a).shape) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), val(a).data);
  const bool ng = wants(a);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, r] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& ga = grad_of(a.id);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
    };
  }
  return r;
}

Value Graph::concat_cols(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.rank() == 2 && tb.rank() == 2 && ta.dim(0) == tb.dim(0),
          ErrorCode::ShapeMismatch,
          "concat_cols: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  const std::size_t n = ta.dim(0), da = ta.dim(1), db = tb.dim(1);
  Tensor out({n, da + db});
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(&out.data[i * (da + db)], &ta.data[i * da], da * sizeof(double));
    std::memcpy(&out.data[i * (da + db) + da], &tb.data[i * db],
                db * sizeof(double));
  }
  const bool ng = wants(a) || wants(b);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, b, r, n, da, db] {
      const Tensor& g = nodes_[r.id].grad;
      if (wants(a)) {
        Tensor& ga = grad_of(a.id);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < da; ++j)
            ga[i * da + j] += g[i * (da + db) + j];
      }
      if (wants(b)) {
        Tensor& gb = grad_of(b.id);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < db; ++j)
            gb[i * db + j] += g[i * (da + db) + da + j];
      }
    };
  }
  return r;
}

Value Graph::slice_cols(Value a, std::size_t lo, std::size_t hi) {
  const Tensor& ta = val(a);
  require(ta.rank() == 2 && lo < hi && hi <= ta.dim(1), ErrorCode::ShapeMismatch,
          "slice_cols [" + std::to_string(lo) + "," + std::to_string(hi) +
              ") of " + shape_str(ta.shape));
  const std::size_t n = ta.dim(0), d = ta.dim(1), w = hi - lo;
  Tensor out({n, w});
  for (std::size_t i = 0; i < n; ++i)
    std::memcpy(&out.data[i * w], &ta.data[i * d + lo], w * sizeof(double));
  const bool ng = wants(a);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, r, n, d, lo, w] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& ga = grad_of(a.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) ga[i * d + lo + j] += g[i * w + j];
    };
  }
  return r;
}

Value Graph::concat_time(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.rank() == 3 && tb.rank() == 3 && ta.dim(0) == tb.dim(0) &&
              ta.dim(2) == tb.dim(2),
          ErrorCode::ShapeMismatch,
          "concat_time: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  const std::size_t n = ta.dim(0), t1 = ta.dim(1), t2 = tb.dim(1), d = ta.dim(2);
  Tensor out({n, t1 + t2, d});
  for (std::size_t i = 0; i < n; ++i) {
    std::memcpy(&out.data[i * (t1 + t2) * d], &ta.data[i * t1 * d],
                t1 * d * sizeof(double));
    std::memcpy(&out.data[(i * (t1 + t2) + t1) * d], &tb.data[i * t2 * d],
                t2 * d * sizeof(double));
  }
  const bool ng = wants(a) || wants(b);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, b, r, n, t1, t2, d] {
      const Tensor& g = nodes_[r.id].grad;
      if (wants(a)) {
        Tensor& ga = grad_of(a.id);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < t1 * d; ++k)
            ga[i * t1 * d + k] += g[i * (t1 + t2) * d + k];
      }
      if (wants(b)) {
        Tensor& gb = grad_of(b.id);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < t2 * d; ++k)
            gb[i * t2 * d + k] += g[(i * (t1 + t2) + t1) * d + k];
      }
    };
  }
  return r;
}

Value Graph::time_slice(Value a, std::size_t t) {
  const Tensor& ta = val(a);
  require(ta.rank() == 3 && t < ta.dim(1), ErrorCode::ShapeMismatch,
          "time_slice " + std::to_string(t) + " of " + shape_str(ta.shape));
  const std::size_t n = ta.dim(0), tt = ta.dim(1), d = ta.dim(2);
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    std::memcpy(&out.data[i * d], &ta.data[(i * tt + t) * d], d * sizeof(double));
  const bool ng = wants(a);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, r, t, n, tt, d] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& ga = grad_of(a.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
          ga[(i * tt + t) * d + j] += g[i * d + j];
    };
  }
  return r;
}

Value Graph::stack_time(const std::vector<Value>& steps) {
  require(!steps.empty(), ErrorCode::EmptyInput, "stack_time of zero steps");
  const std::size_t n = val(steps[0]).dim(0), d = val(steps[0]).dim(1);
  const std::size_t t_len = steps.size();
  bool ng = false;
  for (Value s : steps) {
    require(val(s).rank() == 2 && val(s).dim(0) == n && val(s).dim(1) == d,
            ErrorCode::ShapeMismatch, "stack_time: inconsistent step shapes");
    ng = ng || wants(s);
  }
  Tensor out({n, t_len, d});
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t i = 0; i < n; ++i)
      std::memcpy(&out.data[(i * t_len + t) * d], &val(steps[t]).data[i * d],
                  d * sizeof(double));
  Value r = make(std::move(out), ng);
  if (ng) {
    std::vector<Value> parents = steps;
    nodes_[r.id].backward = [this, parents, r, n, t_len, d] {
      const Tensor& g = nodes_[r.id].grad;
      for (std::size_t t = 0; t < t_len; ++t) {
        if (!wants(parents[t])) continue;
        Tensor& gs = grad_of(parents[t].id);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j)
            gs[i * d + j] += g[(i * t_len + t) * d + j];
      }
    };
  }
  return r;
}

// ------------------------------------------------------------- linear algebra

Value Graph::matmul(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.rank() == 2 && tb.rank() == 2 && ta.dim(1) == tb.dim(0),
          ErrorCode::ShapeMismatch,
          "matmul: " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
  const std::size_t n = ta.dim(0), k = ta.dim(1), m = tb.dim(1);
  Tensor out({n, m});
  mmap(out, n, m).noalias() = cmap(ta, n, k) * cmap(tb, k, m);
  const bool ng = wants(a) || wants(b);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, b, r, n, k, m] {
      const Tensor& g = nodes_[r.id].grad;
      if (wants(a)) {
        mmap(grad_of(a.id), n, k).noalias() +=
            cmap(g, n, m) * cmap(val(b), k, m).transpose();
      }
      if (wants(b)) {
        mmap(grad_of(b.id), k, m).noalias() +=
            cmap(val(a), n, k).transpose() * cmap(g, n, m);
      }
    };
  }
  return r;
}

Value Graph::linear(Value x, Value w, Value b) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  const Tensor& tb = val(b);
  require(tx.rank() == 2 && tw.rank() == 2 && tb.rank() == 1 &&
              tx.dim(1) == tw.dim(1) && tb.dim(0) == tw.dim(0),
          ErrorCode::ShapeMismatch,
          "linear: x" + shape_str(tx.shape) + " w" + shape_str(tw.shape) +
              " b" + shape_str(tb.shape));
  const std::size_t n = tx.dim(0), k = tx.dim(1), m = tw.dim(0);
  Tensor out({n, m});
  mmap(out, n, m).noalias() = cmap(tx, n, k) * cmap(tw, m, k).transpose();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += tb[j];
  const bool ng = wants(x) || wants(w) || wants(b);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, x, w, b, r, n, k, m] {
      const Tensor& g = nodes_[r.id].grad;
      if (wants(x)) {
        mmap(grad_of(x.id), n, k).noalias() +=
            cmap(g, n, m) * cmap(val(w), m, k);
      }
      if (wants(w)) {
        mmap(grad_of(w.id), m, k).noalias() +=
            cmap(g, n, m).transpose() * cmap(val(x), n, k);
      }
      if (wants(b)) {
        Tensor& gb = grad_of(b.id);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) gb[j] += g[i * m + j];
      }
    };
  }
  return r;
}

Value Graph::add_rowvec(Value x, Value v) {
  const Tensor& tx = val(x);
  const Tensor& tv = val(v);
  require(tx.rank() == 2 && tv.rank() == 1 && tx.dim(1) == tv.dim(0),
          ErrorCode::ShapeMismatch,
          "add_rowvec: " + shape_str(tx.shape) + " + " + shape_str(tv.shape));
  const std::size_t n = tx.dim(0), d = tx.dim(1);
  Tensor out = tx;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += tv[j];
  const bool ng = wants(x) || wants(v);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, x, v, r, n, d] {
      const Tensor& g = nodes_[r.id].grad;
      if (wants(x)) {
        Tensor& gx = grad_of(x.id);
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
      }
      if (wants(v)) {
        Tensor& gv = grad_of(v.id);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) gv[j] += g[i * d + j];
      }
    };
  }
  return r;
}

Value Graph::add_timevec(Value x, Value v) {
  const Tensor& tx = val(x);
  const Tensor& tv = val(v);
  require(tx.rank() == 3 && tv.rank() == 2 && tx.dim(1) == tv.dim(0) &&
              tx.dim(2) == tv.dim(1),
          ErrorCode::ShapeMismatch,
          "add_timevec: " + shape_str(tx.shape) + " + " + shape_str(tv.shape));
  const std::size_t n = tx.dim(0), t_len = tx.dim(1), d = tx.dim(2);
  Tensor out = tx;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < t_len * d; ++k) out[i * t_len * d + k] += tv[k];
  const bool ng = wants(x) || wants(v);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, x, v, r, n, t_len, d] {
      const Tensor& g = nodes_[r.id].grad;
      if (wants(x)) {
        Tensor& gx = grad_of(x.id);
        for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
      }
      if (wants(v)) {
        Tensor& gv = grad_of(v.id);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t k = 0; k < t_len * d; ++k)
            gv[k] += g[i * t_len * d + k];
      }
    };
  }
  return r;
}

Value Graph::tile_rows(Value v, std::size_t n) {
  const Tensor& tv = val(v);
  require(tv.rank() == 2 && tv.dim(0) == 1, ErrorCode::ShapeMismatch,
          "tile_rows expects [1,D], got " + shape_str(tv.shape));
  const std::size_t d = tv.dim(1);
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    std::memcpy(&out.data[i * d], tv.data.data(), d * sizeof(double));
  const bool ng = wants(v);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, v, r, n, d] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& gv = grad_of(v.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) gv[j] += g[i * d + j];
    };
  }
  return r;
}

Value Graph::mul_rows(Value x, Value m) {
  const Tensor& tx = val(x);
  const Tensor& tm = val(m);
  require(tx.rank() == 2 && tm.rank() == 1 && tx.dim(0) == tm.dim(0),
          ErrorCode::ShapeMismatch,
          "mul_rows: " + shape_str(tx.shape) + " * " + shape_str(tm.shape));
  const std::size_t n = tx.dim(0), d = tx.dim(1);
  Tensor out = tx;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] *= tm[i];
  const bool ng = wants(x) || wants(m);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, x, m, r, n, d] {
      const Tensor& g = nodes_[r.id].grad;
      if (wants(x)) {
        Tensor& gx = grad_of(x.id);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j)
            gx[i * d + j] += g[i * d + j] * val(m)[i];
      }
      if (wants(m)) {
        Tensor& gm = grad_of(m.id);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j)
            gm[i] += g[i * d + j] * val(x)[i * d + j];
      }
    };
  }
  return r;
}

Value Graph::lerp_rows(Value prev, Value next, Value m) {
  const Tensor& tp = val(prev);
  const Tensor& tn = val(next);
  const Tensor& tm = val(m);
  require(tp.rank() == 2 && tp.same_shape(tn) && tm.rank() == 1 &&
              tm.dim(0) == tp.dim(0),
          ErrorCode::ShapeMismatch,
          "lerp_rows: " + shape_str(tp.shape) + " / " + shape_str(tn.shape) +
              " / " + shape_str(tm.shape));
  const std::size_t n = tp.dim(0), d = tp.dim(1);
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const double mi = tm[i];
    for (std::size_t j = 0; j < d; ++j)
      out[i * d + j] = (1.0 - mi) * tp[i * d + j] + mi * tn[i * d + j];
  }
  const bool ng = wants(prev) || wants(next) || wants(m);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, prev, next, m, r, n, d] {
      const Tensor& g = nodes_[r.id].grad;
      for (std::size_t i = 0; i < n; ++i) {
        const double mi = val(m)[i];
        for (std::size_t j = 0; j < d; ++j) {
          const double gij = g[i * d + j];
          if (wants(prev)) grad_of(prev.id)[i * d + j] += (1.0 - mi) * gij;
          if (wants(next)) grad_of(next.id)[i * d + j] += mi * gij;
          if (wants(m))
            grad_of(m.id)[i] +=
                gij * (val(next)[i * d + j] - val(prev)[i * d + j]);
        }
      }
    };
  }
  return r;
}

// ------------------------------------------------------ reductions / row loss

Value Graph::sum_all(Value a) {
  double s = 0.0;
  for (double x : val(a).data) s += x;
  const bool ng = wants(a);
  Value r = make(Tensor::scalar(s), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, r] {
      const double g = nodes_[r.id].grad[0];
      Tensor& ga = grad_of(a.id);
      for (auto& x : ga.data) x += g;
    };
  }
  return r;
}

Value Graph::mean_all(Value a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(val(a).numel()));
}

Value Graph::row_sqerr_sum(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.rank() == 2 && ta.same_shape(tb), ErrorCode::ShapeMismatch,
          "row_sqerr_sum: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  const std::size_t n = ta.dim(0), d = ta.dim(1);
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double e = ta[i * d + j] - tb[i * d + j];
      s += e * e;
    }
    out[i] = s;
  }
  const bool ng = wants(a) || wants(b);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, b, r, n, d] {
      const Tensor& g = nodes_[r.id].grad;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          const double e = 2.0 * (val(a)[i * d + j] - val(b)[i * d + j]) * g[i];
          if (wants(a)) grad_of(a.id)[i * d + j] += e;
          if (wants(b)) grad_of(b.id)[i * d + j] -= e;
        }
      }
    };
  }
  return r;
}

Value Graph::row_abserr_sum(Value a, Value b) {
  const Tensor& ta = val(a);
  const Tensor& tb = val(b);
  require(ta.rank() == 2 && ta.same_shape(tb), ErrorCode::ShapeMismatch,
          "row_abserr_sum: " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  const std::size_t n = ta.dim(0), d = ta.dim(1);
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += std::abs(ta[i * d + j] - tb[i * d + j]);
    out[i] = s;
  }
  const bool ng = wants(a) || wants(b);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, a, b, r, n, d] {
      const Tensor& g = nodes_[r.id].grad;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = val(a)[i * d + j] - val(b)[i * d + j];
          const double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
          if (wants(a)) grad_of(a.id)[i * d + j] += s * g[i];
          if (wants(b)) grad_of(b.id)[i * d + j] -= s * g[i];
        }
      }
    };
  }
  return r;
}

Value Graph::xent_rows(Value logits, const std::vector<int>& labels) {
  const Tensor& tl = val(logits);
  require(tl.rank() == 2 && tl.dim(0) == labels.size(), ErrorCode::ShapeMismatch,
          "xent_rows: logits " + shape_str(tl.shape) + " vs " +
              std::to_string(labels.size()) + " labels");
  const std::size_t n = tl.dim(0), k = tl.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < k,
            ErrorCode::LabelOutOfRange,
            "label " + std::to_string(labels[i]) + " outside [0," +
                std::to_string(k) + ") at row " + std::to_string(i));
  }
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double mx = tl[i * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, tl[i * k + j]);
    double se = 0.0;
    for (std::size_t j = 0; j < k; ++j) se += std::exp(tl[i * k + j] - mx);
    out[i] = mx + std::log(se) - tl[i * k + labels[i]];
  }
  const bool ng = wants(logits);
  Value r = make(std::move(out), ng);
  if (ng) {
    std::vector<int> labs = labels;
    nodes_[r.id].backward = [this, logits, r, labs, n, k] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& gl = grad_of(logits.id);
      for (std::size_t i = 0; i < n; ++i) {
        double mx = val(logits)[i * k];
        for (std::size_t j = 1; j < k; ++j)
          mx = std::max(mx, val(logits)[i * k + j]);
        double se = 0.0;
        for (std::size_t j = 0; j < k; ++j)
          se += std::exp(val(logits)[i * k + j] - mx);
        for (std::size_t j = 0; j < k; ++j) {
          const double p = std::exp(val(logits)[i * k + j] - mx) / se;
          gl[i * k + j] +=
              (p - (static_cast<std::size_t>(labs[i]) == j ? 1.0 : 0.0)) * g[i];
        }
      }
    };
  }
  return r;
}

// --------------------------------------------------------- convolution / pool

Value Graph::conv2d(Value x, Value w, Value b, int stride, int pad) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);
  const Tensor& tb = val(b);
  require(tx.rank() == 4 && tw.rank() == 4 && tb.rank() == 1 &&
              tx.dim(1) == tw.dim(1) && tb.dim(0) == tw.dim(0),
          ErrorCode::ShapeMismatch,
          "conv2d: x" + shape_str(tx.shape) + " w" + shape_str(tw.shape));
  const int n = static_cast<int>(tx.dim(0)), c = static_cast<int>(tx.dim(1));
  const int h = static_cast<int>(tx.dim(2)), wd = static_cast<int>(tx.dim(3));
  const int oc = static_cast<int>(tw.dim(0)), kh = static_cast<int>(tw.dim(2));
  const int kw = static_cast<int>(tw.dim(3));
  const int oh = conv_out_size(h, kh, stride, pad);
  const int ow = conv_out_size(wd, kw, stride, pad);
  require(oh >= 1 && ow >= 1, ErrorCode::ShapeMismatch,
          "conv2d output collapses to zero size");

  const std::size_t col_rows = static_cast<std::size_t>(c) * kh * kw;
  const std::size_t col_cols = static_cast<std::size_t>(oh) * ow;
  Tensor out({static_cast<std::size_t>(n), static_cast<std::size_t>(oc),
              static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  std::vector<double> col(col_rows * col_cols);
  CMapM wmat(tw.data.data(), oc, static_cast<Eigen::Index>(col_rows));
  for (int i = 0; i < n; ++i) {
    im2col(&tx.data[static_cast<std::size_t>(i) * c * h * wd], c, h, wd, kh, kw,
           stride, pad, oh, ow, col.data());
    MapM omat(&out.data[static_cast<std::size_t>(i) * oc * oh * ow], oc,
              static_cast<Eigen::Index>(col_cols));
    omat.noalias() = wmat * CMapM(col.data(), static_cast<Eigen::Index>(col_rows),
                                  static_cast<Eigen::Index>(col_cols));
    for (int o = 0; o < oc; ++o)
      for (std::size_t p = 0; p < col_cols; ++p)
        out.data[(static_cast<std::size_t>(i) * oc + o) * col_cols + p] += tb[o];
  }
  const bool ng = wants(x) || wants(w) || wants(b);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, x, w, b, r, n, c, h, wd, oc, kh, kw, stride,
                             pad, oh, ow, col_rows, col_cols] {
      const Tensor& g = nodes_[r.id].grad;
      const Tensor& tx2 = val(x);
      const Tensor& tw2 = val(w);
      std::vector<double> col(col_rows * col_cols);
      std::vector<double> dcol(col_rows * col_cols);
      CMapM wmat(tw2.data.data(), oc, static_cast<Eigen::Index>(col_rows));
      for (int i = 0; i < n; ++i) {
        CMapM gmat(&g.data[static_cast<std::size_t>(i) * oc * col_cols], oc,
                   static_cast<Eigen::Index>(col_cols));
        if (wants(w)) {
          im2col(&tx2.data[static_cast<std::size_t>(i) * c * h * wd], c, h, wd,
                 kh, kw, stride, pad, oh, ow, col.data());
          MapM gw(grad_of(w.id).data.data(), oc,
                  static_cast<Eigen::Index>(col_rows));
          gw.noalias() += gmat * CMapM(col.data(),
                                       static_cast<Eigen::Index>(col_rows),
                                       static_cast<Eigen::Index>(col_cols))
                                     .transpose();
        }
        if (wants(b)) {
          Tensor& gb = grad_of(b.id);
          for (int o = 0; o < oc; ++o)
            for (std::size_t p = 0; p < col_cols; ++p)
              gb[o] += g.data[(static_cast<std::size_t>(i) * oc + o) * col_cols + p];
        }
        if (wants(x)) {
          MapM(dcol.data(), static_cast<Eigen::Index>(col_rows),
               static_cast<Eigen::Index>(col_cols))
              .noalias() = wmat.transpose() * gmat;
          col2im_add(dcol.data(), c, h, wd, kh, kw, stride, pad, oh, ow,
                     &grad_of(x.id).data[static_cast<std::size_t>(i) * c * h * wd]);
        }
      }
    };
  }
  return r;
}

Value Graph::conv_transpose2d(Value x, Value w, Value b, int stride, int pad) {
  const Tensor& tx = val(x);
  const Tensor& tw = val(w);  // [C_in, C_out, kh, kw]
  const Tensor& tb = val(b);
  require(tx.rank() == 4 && tw.rank() == 4 && tb.rank() == 1 &&
              tx.dim(1) == tw.dim(0) && tb.dim(0) == tw.dim(1),
          ErrorCode::ShapeMismatch,
          "conv_transpose2d: x" + shape_str(tx.shape) + " w" + shape_str(tw.shape));
  const int n = static_cast<int>(tx.dim(0)), c = static_cast<int>(tx.dim(1));
  const int h = static_cast<int>(tx.dim(2)), wd = static_cast<int>(tx.dim(3));
  const int oc = static_cast<int>(tw.dim(1)), kh = static_cast<int>(tw.dim(2));
  const int kw = static_cast<int>(tw.dim(3));
  const int oh = (h - 1) * stride - 2 * pad + kh;
  const int ow = (wd - 1) * stride - 2 * pad + kw;
  require(oh >= 1 && ow >= 1, ErrorCode::ShapeMismatch,
          "conv_transpose2d output collapses to zero size");

  const std::size_t col_rows = static_cast<std::size_t>(oc) * kh * kw;
  const std::size_t col_cols = static_cast<std::size_t>(h) * wd;
  Tensor out({static_cast<std::size_t>(n), static_cast<std::size_t>(oc),
              static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  std::vector<double> col(col_rows * col_cols);
  // weight viewed as [C_in, C_out*kh*kw]
  CMapM wmat(tw.data.data(), c, static_cast<Eigen::Index>(col_rows));
  for (int i = 0; i < n; ++i) {
    CMapM xmat(&tx.data[static_cast<std::size_t>(i) * c * col_cols], c,
               static_cast<Eigen::Index>(col_cols));
    MapM(col.data(), static_cast<Eigen::Index>(col_rows),
         static_cast<Eigen::Index>(col_cols))
        .noalias() = wmat.transpose() * xmat;
    double* oi = &out.data[static_cast<std::size_t>(i) * oc * oh * ow];
    col2im_add(col.data(), oc, oh, ow, kh, kw, stride, pad, h, wd, oi);
    for (int o = 0; o < oc; ++o)
      for (int p = 0; p < oh * ow; ++p)
        oi[static_cast<std::size_t>(o) * oh * ow + p] += tb[o];
  }
  const bool ng = wants(x) || wants(w) || wants(b);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, x, w, b, r, n, c, h, wd, oc, kh, kw, stride,
                             pad, oh, ow, col_rows, col_cols] {
      const Tensor& g = nodes_[r.id].grad;
      std::vector<double> dcol(col_rows * col_cols);
      CMapM wmat(val(w).data.data(), c, static_cast<Eigen::Index>(col_rows));
      for (int i = 0; i < n; ++i) {
        // dcol gathers the output gradient through the scatter pattern.
        im2col(&g.data[static_cast<std::size_t>(i) * oc * oh * ow], oc, oh, ow,
               kh, kw, stride, pad, h, wd, dcol.data());
        CMapM dcm(dcol.data(), static_cast<Eigen::Index>(col_rows),
                  static_cast<Eigen::Index>(col_cols));
        if (wants(x)) {
          MapM(&grad_of(x.id).data[static_cast<std::size_t>(i) * c * col_cols],
               c, static_cast<Eigen::Index>(col_cols))
              .noalias() += wmat * dcm;
        }
        if (wants(w)) {
          CMapM xmat(&val(x).data[static_cast<std::size_t>(i) * c * col_cols],
                     c, static_cast<Eigen::Index>(col_cols));
          MapM(grad_of(w.id).data.data(), c,
               static_cast<Eigen::Index>(col_rows))
              .noalias() += xmat * dcm.transpose();
        }
        if (wants(b)) {
          Tensor& gb = grad_of(b.id);
          for (int o = 0; o < oc; ++o)
            for (int p = 0; p < oh * ow; ++p)
              gb[o] += g.data[(static_cast<std::size_t>(i) * oc + o) * oh * ow + p];
        }
      }
    };
  }
  return r;
}

Value Graph::global_max_pool(Value x) {
  const Tensor& tx = val(x);
  require(tx.rank() == 4, ErrorCode::ShapeMismatch,
          "global_max_pool expects NCHW, got " + shape_str(tx.shape));
  const std::size_t n = tx.dim(0), c = tx.dim(1), hw = tx.dim(2) * tx.dim(3);
  Tensor out({n, c});
  std::vector<std::size_t> arg(n * c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      const double* base = &tx.data[(i * c + k) * hw];
      std::size_t best = 0;
      for (std::size_t p = 1; p < hw; ++p)
        if (base[p] > base[best]) best = p;
      out[i * c + k] = base[best];
      arg[i * c + k] = best;
    }
  }
  const bool ng = wants(x);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, x, r, arg, n, c, hw] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& gx = grad_of(x.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k)
          gx[(i * c + k) * hw + arg[i * c + k]] += g[i * c + k];
    };
  }
  return r;
}

Value Graph::global_avg_pool(Value x) {
  const Tensor& tx = val(x);
  require(tx.rank() == 4, ErrorCode::ShapeMismatch,
          "global_avg_pool expects NCHW, got " + shape_str(tx.shape));
  const std::size_t n = tx.dim(0), c = tx.dim(1), hw = tx.dim(2) * tx.dim(3);
  Tensor out({n, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) {
      double s = 0.0;
      for (std::size_t p = 0; p < hw; ++p) s += tx.data[(i * c + k) * hw + p];
      out[i * c + k] = s / static_cast<double>(hw);
    }
  const bool ng = wants(x);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, x, r, n, c, hw] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& gx = grad_of(x.id);
      const double inv = 1.0 / static_cast<double>(hw);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k)
          for (std::size_t p = 0; p < hw; ++p)
            gx[(i * c + k) * hw + p] += g[i * c + k] * inv;
    };
  }
  return r;
}

Value Graph::collapse_height_mean(Value x) {
  const Tensor& tx = val(x);
  require(tx.rank() == 4, ErrorCode::ShapeMismatch,
          "collapse_height_mean expects NCHW, got " + shape_str(tx.shape));
  const std::size_t n = tx.dim(0), c = tx.dim(1), h = tx.dim(2), w = tx.dim(3);
  Tensor out({n, w, c});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t col = 0; col < w; ++col) {
        double s = 0.0;
        for (std::size_t row = 0; row < h; ++row)
          s += tx.data[((i * c + k) * h + row) * w + col];
        out[(i * w + col) * c + k] = s / static_cast<double>(h);
      }
  const bool ng = wants(x);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, x, r, n, c, h, w] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& gx = grad_of(x.id);
      const double inv = 1.0 / static_cast<double>(h);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < c; ++k)
          for (std::size_t col = 0; col < w; ++col) {
            const double gv = g[(i * w + col) * c + k] * inv;
            for (std::size_t row = 0; row < h; ++row)
              gx[((i * c + k) * h + row) * w + col] += gv;
          }
    };
  }
  return r;
}

// ------------------------------------------------- attention / norm / lookup

Value Graph::layer_norm(Value x, Value gamma, Value beta, double eps) {
  const Tensor& tx = val(x);
  require(tx.rank() == 2 || tx.rank() == 3, ErrorCode::ShapeMismatch,
          "layer_norm expects rank 2 or 3, got " + shape_str(tx.shape));
  const std::size_t d = tx.shape.back();
  const std::size_t rows = tx.numel() / d;
  require(val(gamma).shape == std::vector<std::size_t>{d} &&
              val(beta).shape == std::vector<std::size_t>{d},
          ErrorCode::ShapeMismatch, "layer_norm: gamma/beta must be [D]");
  Tensor out(tx.shape);
  std::vector<double> mu(rows), istd(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* row = &tx.data[i * d];
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += row[j];
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - m) * (row[j] - m);
    var /= static_cast<double>(d);
    mu[i] = m;
    istd[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j)
      out.data[i * d + j] = (row[j] - m) * istd[i] * val(gamma)[j] + val(beta)[j];
  }
  const bool ng = wants(x) || wants(gamma) || wants(beta);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, x, gamma, beta, r, rows, d, mu, istd] {
      const Tensor& g = nodes_[r.id].grad;
      for (std::size_t i = 0; i < rows; ++i) {
        const double* xr = &val(x).data[i * d];
        const double* gr = &g.data[i * d];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          const double xhat = (xr[j] - mu[i]) * istd[i];
          const double dxhat = gr[j] * val(gamma)[j];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          if (wants(gamma)) grad_of(gamma.id)[j] += gr[j] * xhat;
          if (wants(beta)) grad_of(beta.id)[j] += gr[j];
        }
        if (wants(x)) {
          Tensor& gx = grad_of(x.id);
          const double n_inv = 1.0 / static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (xr[j] - mu[i]) * istd[i];
            const double dxhat = gr[j] * val(gamma)[j];
            gx[i * d + j] += istd[i] * (dxhat - n_inv * sum_dxhat -
                                        n_inv * xhat * sum_dxhat_xhat);
          }
        }
      }
    };
  }
  return r;
}

Value Graph::self_attention(Value x, Value mask, Value wq, Value bq, Value wk,
                            Value bk, Value wv, Value bv, Value wo, Value bo,
                            int heads) {
  const Tensor& tx = val(x);
  require(tx.rank() == 3, ErrorCode::ShapeMismatch,
          "self_attention expects [N,T,D], got " + shape_str(tx.shape));
  const std::size_t n = tx.dim(0), t_len = tx.dim(1), d = tx.dim(2);
  require(d % static_cast<std::size_t>(heads) == 0, ErrorCode::ConfigError,
          "model dim not divisible by head count");
  require(val(mask).shape == (std::vector<std::size_t>{n, t_len}),
          ErrorCode::ShapeMismatch, "self_attention mask must be [N,T]");
  const std::size_t dh = d / static_cast<std::size_t>(heads);
  const double scale_f = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t rows = n * t_len;

  // Projections over the flattened [N*T, D] view.
  auto project = [&](Value wgt, Value bias, Tensor& dst) {
    dst = Tensor({rows, d});
    mmap(dst, rows, d).noalias() =
        cmap(tx, rows, d) * cmap(val(wgt), d, d).transpose();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < d; ++j) dst[i * d + j] += val(bias)[j];
  };
  auto q = std::make_shared<Tensor>();
  auto k = std::make_shared<Tensor>();
  auto v = std::make_shared<Tensor>();
  project(wq, bq, *q);
  project(wk, bk, *k);
  project(wv, bv, *v);

  // Attention weights per (sample, head): A[n,h] is [T,T].
  auto attn = std::make_shared<std::vector<double>>(
      n * static_cast<std::size_t>(heads) * t_len * t_len);
  Tensor ctx({rows, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (int hd = 0; hd < heads; ++hd) {
      double* a = attn->data() +
                  ((i * heads + hd) * t_len) * t_len;
      for (std::size_t ti = 0; ti < t_len; ++ti) {
        const double* qrow = &q->data[(i * t_len + ti) * d + hd * dh];
        double mx = -1e300;
        for (std::size_t tj = 0; tj < t_len; ++tj) {
          const double* krow = &k->data[(i * t_len + tj) * d + hd * dh];
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += qrow[e] * krow[e];
          s *= scale_f;
          if (val(mask)[i * t_len + tj] == 0.0) s += kMaskNegative;
          a[ti * t_len + tj] = s;
          mx = std::max(mx, s);
        }
        double se = 0.0;
        for (std::size_t tj = 0; tj < t_len; ++tj) {
          a[ti * t_len + tj] = std::exp(a[ti * t_len + tj] - mx);
          se += a[ti * t_len + tj];
        }
        for (std::size_t tj = 0; tj < t_len; ++tj) a[ti * t_len + tj] /= se;
        double* crow = &ctx.data[(i * t_len + ti) * d + hd * dh];
        for (std::size_t e = 0; e < dh; ++e) crow[e] = 0.0;
        for (std::size_t tj = 0; tj < t_len; ++tj) {
          const double w8 = a[ti * t_len + tj];
          if (w8 == 0.0) continue;
          const double* vrow = &v->data[(i * t_len + tj) * d + hd * dh];
          for (std::size_t e = 0; e < dh; ++e) crow[e] += w8 * vrow[e];
        }
      }
    }
  }

  auto ctx_keep = std::make_shared<Tensor>(std::move(ctx));
  Tensor out_t({n, t_len, d});
  mmap(out_t, rows, d).noalias() =
      cmap(*ctx_keep, rows, d) * cmap(val(wo), d, d).transpose();
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d; ++j) out_t[i * d + j] += val(bo)[j];

  const bool ng = wants(x) || wants(wq) || wants(bq) || wants(wk) || wants(bk) ||
                  wants(wv) || wants(bv) || wants(wo) || wants(bo);
  Value r = make(std::move(out_t), ng);
  if (ng) {
    nodes_[r.id].backward = [this, x, mask, wq, bq, wk, bk, wv, bv, wo, bo, r,
                             q, k, v, attn, ctx_keep, n, t_len, d, dh, heads,
                             scale_f, rows] {
      const Tensor& g = nodes_[r.id].grad;
      // Output projection.
      Tensor dctx({rows, d});
      mmap(dctx, rows, d).noalias() = cmap(g, rows, d) * cmap(val(wo), d, d);
      if (wants(wo)) {
        mmap(grad_of(wo.id), d, d).noalias() +=
            cmap(g, rows, d).transpose() * cmap(*ctx_keep, rows, d);
      }
      if (wants(bo)) {
        Tensor& gb = grad_of(bo.id);
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[i * d + j];
      }
      // Attention core.
      Tensor dq({rows, d}), dk({rows, d}), dv({rows, d});
      for (std::size_t i = 0; i < n; ++i) {
        for (int hd = 0; hd < heads; ++hd) {
          const double* a = attn->data() + ((i * heads + hd) * t_len) * t_len;
          for (std::size_t ti = 0; ti < t_len; ++ti) {
            const double* dcrow = &dctx.data[(i * t_len + ti) * d + hd * dh];
            // dA and softmax backward on the fly.
            double dot = 0.0;
            std::vector<double> da(t_len);
            for (std::size_t tj = 0; tj < t_len; ++tj) {
              const double* vrow = &v->data[(i * t_len + tj) * d + hd * dh];
              double s = 0.0;
              for (std::size_t e = 0; e < dh; ++e) s += dcrow[e] * vrow[e];
              da[tj] = s;
              dot += s * a[ti * t_len + tj];
            }
            const double* qrow = &q->data[(i * t_len + ti) * d + hd * dh];
            double* dqrow = &dq.data[(i * t_len + ti) * d + hd * dh];
            for (std::size_t tj = 0; tj < t_len; ++tj) {
              const double w8 = a[ti * t_len + tj];
              if (w8 != 0.0) {
                double* dvrow = &dv.data[(i * t_len + tj) * d + hd * dh];
                for (std::size_t e = 0; e < dh; ++e)
                  dvrow[e] += w8 * dcrow[e];
              }
              const double ds = w8 * (da[tj] - dot) * scale_f;
              if (ds == 0.0) continue;
              const double* krow = &k->data[(i * t_len + tj) * d + hd * dh];
              double* dkrow = &dk.data[(i * t_len + tj) * d + hd * dh];
              for (std::size_t e = 0; e < dh; ++e) {
                dqrow[e] += ds * krow[e];
                dkrow[e] += ds * qrow[e];
              }
            }
          }
        }
      }
      // Input projections.
      const Tensor& tx2 = val(x);
      auto backproject = [&](const Tensor& dproj, Value wgt, Value bias) {
        if (wants(x)) {
          mmap(grad_of(x.id), rows, d).noalias() +=
              cmap(dproj, rows, d) * cmap(val(wgt), d, d);
        }
        if (wants(wgt)) {
          mmap(grad_of(wgt.id), d, d).noalias() +=
              cmap(dproj, rows, d).transpose() * cmap(tx2, rows, d);
        }
        if (wants(bias)) {
          Tensor& gb = grad_of(bias.id);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < d; ++j) gb[j] += dproj[i * d + j];
        }
      };
      backproject(dq, wq, bq);
      backproject(dk, wk, bk);
      backproject(dv, wv, bv);
    };
  }
  return r;
}

Value Graph::additive_attention_weights(Value memory, Value state, Value wm,
                                        Value ws, Value v, Value mask) {
  const Tensor& tm = val(memory);
  const Tensor& tst = val(state);
  require(tm.rank() == 3 && tst.rank() == 2 && tm.dim(0) == tst.dim(0),
          ErrorCode::ShapeMismatch,
          "additive attention: memory " + shape_str(tm.shape) + " state " +
              shape_str(tst.shape));
  const std::size_t n = tm.dim(0), t_len = tm.dim(1), d = tm.dim(2);
  const std::size_t s_dim = tst.dim(1), a_dim = val(v).dim(0);
  require(val(wm).shape == (std::vector<std::size_t>{a_dim, d}) &&
              val(ws).shape == (std::vector<std::size_t>{a_dim, s_dim}),
          ErrorCode::ShapeMismatch, "additive attention: wm/ws shapes");
  require(val(mask).shape == (std::vector<std::size_t>{n, t_len}),
          ErrorCode::ShapeMismatch, "additive attention: mask must be [N,T]");

  // h[n,t,a] = tanh(wm·mem + ws·state); e[n,t] = v·h
  auto hact = std::make_shared<Tensor>(Tensor({n, t_len, a_dim}));
  Tensor weights({n, t_len});
  std::vector<double> sproj(a_dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < a_dim; ++a) {
      double s = 0.0;
      for (std::size_t e = 0; e < s_dim; ++e)
        s += val(ws)[a * s_dim + e] * tst[i * s_dim + e];
      sproj[a] = s;
    }
    double mx = -1e300;
    for (std::size_t t = 0; t < t_len; ++t) {
      double score = 0.0;
      for (std::size_t a = 0; a < a_dim; ++a) {
        double pre = sproj[a];
        for (std::size_t e = 0; e < d; ++e)
          pre += val(wm)[a * d + e] * tm[(i * t_len + t) * d + e];
        const double hv = std::tanh(pre);
        hact->data[(i * t_len + t) * a_dim + a] = hv;
        score += val(v)[a] * hv;
      }
      if (val(mask)[i * t_len + t] == 0.0) score += kMaskNegative;
      weights[i * t_len + t] = score;
      mx = std::max(mx, score);
    }
    double se = 0.0;
    for (std::size_t t = 0; t < t_len; ++t) {
      weights[i * t_len + t] = std::exp(weights[i * t_len + t] - mx);
      se += weights[i * t_len + t];
    }
    for (std::size_t t = 0; t < t_len; ++t) weights[i * t_len + t] /= se;
  }

  const bool ng =
      wants(memory) || wants(state) || wants(wm) || wants(ws) || wants(v);
  Value r = make(std::move(weights), ng);
  if (ng) {
    nodes_[r.id].backward = [this, memory, state, wm, ws, v, r, hact, n, t_len,
                             d, s_dim, a_dim] {
      const Tensor& g = nodes_[r.id].grad;
      const Tensor& wgt = nodes_[r.id].value;
      for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0;
        for (std::size_t t = 0; t < t_len; ++t)
          dot += g[i * t_len + t] * wgt[i * t_len + t];
        for (std::size_t t = 0; t < t_len; ++t) {
          const double de = wgt[i * t_len + t] * (g[i * t_len + t] - dot);
          if (de == 0.0) continue;
          for (std::size_t a = 0; a < a_dim; ++a) {
            const double hv = hact->data[(i * t_len + t) * a_dim + a];
            if (wants(v)) grad_of(v.id)[a] += de * hv;
            const double dpre = de * val(v)[a] * (1.0 - hv * hv);
            if (dpre == 0.0) continue;
            if (wants(wm)) {
              Tensor& gwm = grad_of(wm.id);
              for (std::size_t e = 0; e < d; ++e)
                gwm[a * d + e] += dpre * val(memory)[(i * t_len + t) * d + e];
            }
            if (wants(memory)) {
              Tensor& gm = grad_of(memory.id);
              for (std::size_t e = 0; e < d; ++e)
                gm[(i * t_len + t) * d + e] += dpre * val(wm)[a * d + e];
            }
            if (wants(ws)) {
              Tensor& gws = grad_of(ws.id);
              for (std::size_t e = 0; e < s_dim; ++e)
                gws[a * s_dim + e] += dpre * val(state)[i * s_dim + e];
            }
            if (wants(state)) {
              Tensor& gs = grad_of(state.id);
              for (std::size_t e = 0; e < s_dim; ++e)
                gs[i * s_dim + e] += dpre * val(ws)[a * s_dim + e];
            }
          }
        }
      }
    };
  }
  return r;
}

Value Graph::weighted_sum_time(Value memory, Value weights) {
  const Tensor& tm = val(memory);
  const Tensor& tw = val(weights);
  require(tm.rank() == 3 && tw.rank() == 2 && tm.dim(0) == tw.dim(0) &&
              tm.dim(1) == tw.dim(1),
          ErrorCode::ShapeMismatch,
          "weighted_sum_time: " + shape_str(tm.shape) + " / " +
              shape_str(tw.shape));
  const std::size_t n = tm.dim(0), t_len = tm.dim(1), d = tm.dim(2);
  Tensor out({n, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < t_len; ++t) {
      const double w8 = tw[i * t_len + t];
      if (w8 == 0.0) continue;
      for (std::size_t e = 0; e < d; ++e)
        out[i * d + e] += w8 * tm[(i * t_len + t) * d + e];
    }
  const bool ng = wants(memory) || wants(weights);
  Value r = make(std::move(out), ng);
  if (ng) {
    nodes_[r.id].backward = [this, memory, weights, r, n, t_len, d] {
      const Tensor& g = nodes_[r.id].grad;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < t_len; ++t) {
          const double w8 = val(weights)[i * t_len + t];
          if (wants(memory) && w8 != 0.0) {
            Tensor& gm = grad_of(memory.id);
            for (std::size_t e = 0; e < d; ++e)
              gm[(i * t_len + t) * d + e] += w8 * g[i * d + e];
          }
          if (wants(weights)) {
            double s = 0.0;
            for (std::size_t e = 0; e < d; ++e)
              s += g[i * d + e] * val(memory)[(i * t_len + t) * d + e];
            grad_of(weights.id)[i * t_len + t] += s;
          }
        }
    };
  }
  return r;
}

Value Graph::gather_rows(Value table, const std::vector<int>& indices) {
  const Tensor& tt = val(table);
  require(tt.rank() == 2, ErrorCode::ShapeMismatch,
          "gather_rows expects [V,D], got " + shape_str(tt.shape));
  const std::size_t v_rows = tt.dim(0), d = tt.dim(1);
  for (int idx : indices) {
    require(idx >= 0 && static_cast<std::size_t>(idx) < v_rows,
            ErrorCode::LabelOutOfRange,
            "gather index " + std::to_string(idx) + " outside [0," +
                std::to_string(v_rows) + ")");
  }
  Tensor out({indices.size(), d});
  for (std::size_t i = 0; i < indices.size(); ++i)
    std::memcpy(&out.data[i * d], &tt.data[static_cast<std::size_t>(indices[i]) * d],
                d * sizeof(double));
  const bool ng = wants(table);
  Value r = make(std::move(out), ng);
  if (ng) {
    std::vector<int> idxs = indices;
    nodes_[r.id].backward = [this, table, r, idxs, d] {
      const Tensor& g = nodes_[r.id].grad;
      Tensor& gt = grad_of(table.id);
      for (std::size_t i = 0; i < idxs.size(); ++i)
        for (std::size_t j = 0; j < d; ++j)
          gt[static_cast<std::size_t>(idxs[i]) * d + j] += g[i * d + j];
    };
  }
  return r;
}

}  // namespace sketchssl
