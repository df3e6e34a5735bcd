#pragma once

// Differentiable operations on Graph<T>. Each op computes its value eagerly
// and registers a closure that reads the upstream gradient of its own node.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "txnf/autodiff.hpp"

namespace txnf::ops {

template <class T>
bool any_grad(const Graph<T>& g, std::initializer_list<Var> vs) {
  return std::any_of(vs.begin(), vs.end(), [&](Var v) { return g.needs_grad(v); });
}

template <class T>
void require(bool ok, const char* what) {
  if (!ok) throw Error(std::string("shape mismatch in ") + what);
}

/// a [n×k] · b [k×m]
template <class T>
Var matmul(Graph<T>& g, Var a, Var b) {
  require<T>(g.value(a).cols() == g.value(b).rows(), "matmul");
  Mat<T> out;
  out.noalias() = g.value(a) * g.value(b);
  return g.push(std::move(out), any_grad(g, {a, b}), [a, b](Graph<T>& g, Var self) {
    const Mat<T>& up = g.grad(self);
    if (g.needs_grad(a)) g.grad(a).noalias() += up * g.value(b).transpose();
    if (g.needs_grad(b)) g.grad(b).noalias() += g.value(a).transpose() * up;
  });
}

/// a [n×k] · b[m×k]ᵀ
template <class T>
Var matmul_nt(Graph<T>& g, Var a, Var b) {
  require<T>(g.value(a).cols() == g.value(b).cols(), "matmul_nt");
  Mat<T> out;
  out.noalias() = g.value(a) * g.value(b).transpose();
  return g.push(std::move(out), any_grad(g, {a, b}), [a, b](Graph<T>& g, Var self) {
    const Mat<T>& up = g.grad(self);
    if (g.needs_grad(a)) g.grad(a).noalias() += up * g.value(b);
    if (g.needs_grad(b)) g.grad(b).noalias() += up.transpose() * g.value(a);
  });
}

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
  require<T>(g.value(a).rows() == g.value(b).rows() && g.value(a).cols() == g.value(b).cols(), "add");
  Mat<T> out = g.value(a) + g.value(b);
  return g.push(std::move(out), any_grad(g, {a, b}), [a, b](Graph<T>& g, Var self) {
    const Mat<T>& up = g.grad(self);
    if (g.needs_grad(a)) g.grad(a) += up;
    if (g.needs_grad(b)) g.grad(b) += up;
  });
}

/// Adds a [1×m] row to every row of a [n×m].
template <class T>
Var add_row(Graph<T>& g, Var a, Var row) {
  require<T>(g.value(row).rows() == 1 && g.value(row).cols() == g.value(a).cols(), "add_row");
  Mat<T> out = g.value(a);
  out.rowwise() += g.value(row).row(0);
  return g.push(std::move(out), any_grad(g, {a, row}), [a, row](Graph<T>& g, Var self) {
    const Mat<T>& up = g.grad(self);
    if (g.needs_grad(a)) g.grad(a) += up;
    if (g.needs_grad(row)) g.grad(row) += up.colwise().sum();
  });
}

/// x·W + b
template <class T>
Var linear(Graph<T>& g, Var x, Var w, Var b) {
  return add_row(g, matmul(g, x, w), b);
}

/// tanh-approximated GELU.
template <class T>
Var gelu(Graph<T>& g, Var a) {
  constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k = T(0.044715);
  const auto x = g.value(a).array();
  Mat<T> out = (T(0.5) * x * (T(1) + (c * (x + k * x.cube())).tanh())).matrix();
  return g.push(std::move(out), g.needs_grad(a), [a, c, k](Graph<T>& g, Var self) {
    const auto x = g.value(a).array();
    const auto t = (c * (x + k * x.cube())).tanh().eval();
    const auto du = c * (T(1) + T(3) * k * x.square());
    g.grad(a).array() += g.grad(self).array() * (T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t.square()) * du);
  });
}

/// softplus(a) + floor, elementwise.
template <class T>
Var softplus(Graph<T>& g, Var a, T floor) {
  const Mat<T>& x = g.value(a);
  Mat<T> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const T v = x.data()[i];
    out.data()[i] = (v > T(20) ? v : std::log1p(std::exp(v))) + floor;
  }
  return g.push(std::move(out), g.needs_grad(a), [a](Graph<T>& g, Var self) {
    const Mat<T>& up = g.grad(self);
    const Mat<T>& x = g.value(a);
    Mat<T>& ga = g.grad(a);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      ga.data()[i] += up.data()[i] / (T(1) + std::exp(-x.data()[i]));
    }
  });
}

/// Row-wise layer normalization with learned [1×d] gain and bias.
template <class T>
Var layer_norm(Graph<T>& g, Var a, Var gain, Var bias, T eps = T(1e-5)) {
  const Mat<T>& x = g.value(a);
  const Eigen::Index n = x.rows(), d = x.cols();
  Mat<T> xhat(n, d);
  Mat<T> inv_std(n, 1);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = x.row(r).mean();
    const T var = (x.row(r).array() - mean).square().mean();
    inv_std(r, 0) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mean) * inv_std(r, 0);
  }
  Mat<T> out = xhat;
  out.array().rowwise() *= g.value(gain).row(0).array();
  out.rowwise() += g.value(bias).row(0);
  return g.push(std::move(out), any_grad(g, {a, gain, bias}),
                [a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph<T>& g, Var self) {
                  const Mat<T>& up = g.grad(self);
                  if (g.needs_grad(gain)) g.grad(gain) += (up.array() * xhat.array()).colwise().sum().matrix();
                  if (g.needs_grad(bias)) g.grad(bias) += up.colwise().sum();
                  if (!g.needs_grad(a)) return;
                  Mat<T>& ga = g.grad(a);
                  const auto d = static_cast<T>(up.cols());
                  for (Eigen::Index r = 0; r < up.rows(); ++r) {
                    const auto dxhat = (up.row(r).array() * g.value(gain).row(0).array()).eval();
                    const T s1 = dxhat.sum();
                    const T s2 = (dxhat * xhat.row(r).array()).sum();
                    ga.row(r).array() += inv_std(r, 0) / d * (d * dxhat - s1 - xhat.row(r).array() * s2);
                  }
                });
}

/// out[i] = a[index[i]]; gradients scatter-add back.
template <class T>
Var gather_rows(Graph<T>& g, Var a, std::vector<std::int32_t> index) {
  const Mat<T>& x = g.value(a);
  Mat<T> out(static_cast<Eigen::Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= x.rows()) throw Error("gather_rows index out of range");
    out.row(static_cast<Eigen::Index>(i)) = x.row(index[i]);
  }
  return g.push(std::move(out), g.needs_grad(a), [a, index = std::move(index)](Graph<T>& g, Var self) {
    const Mat<T>& up = g.grad(self);
    Mat<T>& ga = g.grad(a);
    for (std::size_t i = 0; i < index.size(); ++i) ga.row(index[i]) += up.row(static_cast<Eigen::Index>(i));
  });
}

template <class T>
Var concat_cols(Graph<T>& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_cols of nothing");
  const Eigen::Index n = g.value(parts[0]).rows();
  Eigen::Index width = 0;
  bool needs = false;
  for (Var p : parts) {
    require<T>(g.value(p).rows() == n, "concat_cols");
    width += g.value(p).cols();
    needs = needs || g.needs_grad(p);
  }
  Mat<T> out(n, width);
  Eigen::Index c = 0;
  for (Var p : parts) {
    out.middleCols(c, g.value(p).cols()) = g.value(p);
    c += g.value(p).cols();
  }
  return g.push(std::move(out), needs, [parts](Graph<T>& g, Var self) {
    const Mat<T>& up = g.grad(self);
    Eigen::Index c = 0;
    for (Var p : parts) {
      const Eigen::Index w = g.value(p).cols();
      if (g.needs_grad(p)) g.grad(p) += up.middleCols(c, w);
      c += w;
    }
  });
}

template <class T>
Var concat_rows(Graph<T>& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_rows of nothing");
  const Eigen::Index d = g.value(parts[0]).cols();
  Eigen::Index rows = 0;
  bool needs = false;
  for (Var p : parts) {
    require<T>(g.value(p).cols() == d, "concat_rows");
    rows += g.value(p).rows();
    needs = needs || g.needs_grad(p);
  }
  Mat<T> out(rows, d);
  Eigen::Index r = 0;
  for (Var p : parts) {
    out.middleRows(r, g.value(p).rows()) = g.value(p);
    r += g.value(p).rows();
  }
  return g.push(std::move(out), needs, [parts](Graph<T>& g, Var self) {
    const Mat<T>& up = g.grad(self);
    Eigen::Index r = 0;
    for (Var p : parts) {
      const Eigen::Index h = g.value(p).rows();
      if (g.needs_grad(p)) g.grad(p) += up.middleRows(r, h);
      r += h;
    }
  });
}

template <class T>
Var slice_cols(Graph<T>& g, Var a, Eigen::Index begin, Eigen::Index count) {
  require<T>(begin >= 0 && begin + count <= g.value(a).cols(), "slice_cols");
  Mat<T> out = g.value(a).middleCols(begin, count);
  return g.push(std::move(out), g.needs_grad(a), [a, begin, count](Graph<T>& g, Var self) {
    g.grad(a).middleCols(begin, count) += g.grad(self);
  });
}

/// Σ weights[i]·scalars[i]; weights are constants (detached).
template <class T>
Var weighted_sum(Graph<T>& g, const std::vector<Var>& scalars, const std::vector<T>& weights) {
  if (scalars.size() != weights.size()) throw Error("weighted_sum size mismatch");
  T total = T(0);
  bool needs = false;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    require<T>(g.value(scalars[i]).size() == 1, "weighted_sum");
    total += weights[i] * g.value(scalars[i])(0, 0);
    needs = needs || g.needs_grad(scalars[i]);
  }
  Mat<T> out(1, 1);
  out(0, 0) = total;
  return g.push(std::move(out), needs, [scalars, weights](Graph<T>& g, Var self) {
    const T up = g.grad(self)(0, 0);
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      if (g.needs_grad(scalars[i])) g.grad(scalars[i])(0, 0) += weights[i] * up;
    }
  });
}

/// Multi-head scaled dot-product attention over `batch` sequences of
/// `seq` rows each (rows are [b*seq + s]). Query s attends to keys
/// s' <= s with key_valid set. Row 0 of every sequence must be valid.
///
/// Probabilities are recomputed in the backward pass instead of stored.
template <class T>
Var causal_attention(Graph<T>& g, Var q, Var k, Var v, int batch, int seq, int heads,
                     std::vector<std::uint8_t> key_valid) {
  const Mat<T>& Q = g.value(q);
  const Mat<T>& K = g.value(k);
  const Mat<T>& V = g.value(v);
  const Eigen::Index d = Q.cols();
  require<T>(Q.rows() == Eigen::Index(batch) * seq && K.rows() == Q.rows() && V.rows() == Q.rows(), "attention");
  require<T>(d % heads == 0 && K.cols() == d && V.cols() == d, "attention");
  require<T>(key_valid.size() == static_cast<std::size_t>(Q.rows()), "attention mask");
  const Eigen::Index dh = d / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  auto probabilities = [=](const Mat<T>& Q, const Mat<T>& K, const std::vector<std::uint8_t>& valid, int b, int h) {
    Mat<T> s;
    s.noalias() = Q.block(Eigen::Index(b) * seq, h * dh, seq, dh) * K.block(Eigen::Index(b) * seq, h * dh, seq, dh).transpose();
    for (int i = 0; i < seq; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (int j = 0; j <= i; ++j) {
        if (valid[static_cast<std::size_t>(b * seq + j)]) mx = std::max(mx, s(i, j) * scale);
      }
      T sum = T(0);
      for (int j = 0; j < seq; ++j) {
        if (j <= i && valid[static_cast<std::size_t>(b * seq + j)]) {
          s(i, j) = std::exp(s(i, j) * scale - mx);
          sum += s(i, j);
        } else {
          s(i, j) = T(0);
        }
      }
      s.row(i) /= sum;
    }
    return s;
  };

  Mat<T> out(Q.rows(), d);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const Mat<T> p = probabilities(Q, K, key_valid, b, h);
      out.block(Eigen::Index(b) * seq, h * dh, seq, dh).noalias() = p * V.block(Eigen::Index(b) * seq, h * dh, seq, dh);
    }
  }
  return g.push(std::move(out), any_grad(g, {q, k, v}),
                [=, key_valid = std::move(key_valid)](Graph<T>& g, Var self) {
                  const Mat<T>& up = g.grad(self);
                  const Mat<T>& Q = g.value(q);
                  const Mat<T>& K = g.value(k);
                  const Mat<T>& V = g.value(v);
                  Mat<T> dQ = Mat<T>::Zero(Q.rows(), d), dK = Mat<T>::Zero(Q.rows(), d), dV = Mat<T>::Zero(Q.rows(), d);
                  for (int b = 0; b < batch; ++b) {
                    for (int h = 0; h < heads; ++h) {
                      const Eigen::Index r0 = Eigen::Index(b) * seq, c0 = h * dh;
                      const Mat<T> p = probabilities(Q, K, key_valid, b, h);
                      const auto dO = up.block(r0, c0, seq, dh);
                      dV.block(r0, c0, seq, dh).noalias() += p.transpose() * dO;
                      Mat<T> dp;
                      dp.noalias() = dO * V.block(r0, c0, seq, dh).transpose();
                      // dS = P ⊙ (dP − rowsum(P ⊙ dP))
                      const auto rowdot = (p.array() * dp.array()).rowwise().sum().eval();
                      Mat<T> ds = (p.array() * (dp.array().colwise() - rowdot)).matrix() * scale;
                      dQ.block(r0, c0, seq, dh).noalias() += ds * K.block(r0, c0, seq, dh);
                      dK.block(r0, c0, seq, dh).noalias() += ds.transpose() * Q.block(r0, c0, seq, dh);
                    }
                  }
                  if (g.needs_grad(q)) g.grad(q) += dQ;
                  if (g.needs_grad(k)) g.grad(k) += dK;
                  if (g.needs_grad(v)) g.grad(v) += dV;
                });
}

}  // namespace txnf::ops
