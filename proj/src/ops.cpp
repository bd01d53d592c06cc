#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <memory>

#include "kdmt/autodiff.hpp"
#include "kdmt/error.hpp"

namespace kdmt::ad {
namespace {

using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;

ConstMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(rows),
                  static_cast<Eigen::Index>(cols));
}
MutMap as_matrix(Tensor& t, std::size_t rows, std::size_t cols) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(rows),
                static_cast<Eigen::Index>(cols));
}

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": " + to_string(a.shape()) +
                         " vs " + to_string(b.shape()));
}

void require_matrix(const char* op, const Var& a) {
  if (a.value().rank() != 2)
    throw DimensionError(std::string(op) + " expects a matrix, got " +
                         to_string(a.shape()));
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         to_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Writes value_at(i) into the gradient of `in`, adding when earlier
// contributions exist.
template <class F>
void write_grad(Tape& tape, const Var& in, F&& value_at) {
  auto slot = tape.grad_slot(in.id());
  auto dst = slot.grad.data();
  if (slot.fresh)
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = value_at(i);
  else
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += value_at(i);
}

template <class Expr>
void write_grad_matrix(Tape& tape, const Var& in, std::size_t rows,
                       std::size_t cols, const Expr& expr) {
  auto slot = tape.grad_slot(in.id());
  if (slot.fresh)
    as_matrix(slot.grad, rows, cols).noalias() = expr;
  else
    as_matrix(slot.grad, rows, cols).noalias() += expr;
}

}  // namespace

Var matmul(Var a, Var b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k)
    throw DimensionError("matmul: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  auto out = Tensor::uninitialized({m, n});
  as_matrix(out, m, n).noalias() =
      as_matrix(a.value(), m, k) * as_matrix(b.value(), k, n);
  const Var inputs[] = {a, b};
  return a.tape().record(
      std::move(out), inputs, [a, b, m, k, n](Tape& tape, std::size_t self) {
        auto dout = as_matrix(tape.grad(self), m, n);
        if (a.requires_grad())
          write_grad_matrix(tape, a, m, k,
                            dout * as_matrix(b.value(), k, n).transpose());
        if (b.requires_grad())
          write_grad_matrix(tape, b, k, n,
                            as_matrix(a.value(), m, k).transpose() * dout);
      });
}

Var linear(Var x, Var weight, Var bias) {
  require_matrix("linear", x);
  require_matrix("linear", weight);
  const std::size_t m = x.shape()[0], k = x.shape()[1], n = weight.shape()[1];
  if (weight.shape()[0] != k || bias.value().size() != n)
    throw DimensionError("linear: " + to_string(x.shape()) + " x " +
                         to_string(weight.shape()) + " + " +
                         to_string(bias.shape()));
  auto out = Tensor::uninitialized({m, n});
  auto y = as_matrix(out, m, n);
  y.noalias() = as_matrix(x.value(), m, k) * as_matrix(weight.value(), k, n);
  y.rowwise() += as_matrix(bias.value(), 1, n).row(0);
  const Var inputs[] = {x, weight, bias};
  return x.tape().record(
      std::move(out), inputs,
      [x, weight, bias, m, k, n](Tape& tape, std::size_t self) {
        auto dout = as_matrix(tape.grad(self), m, n);
        if (x.requires_grad())
          write_grad_matrix(tape, x, m, k,
                            dout * as_matrix(weight.value(), k, n).transpose());
        if (weight.requires_grad())
          write_grad_matrix(tape, weight, k, n,
                            as_matrix(x.value(), m, k).transpose() * dout);
        if (bias.requires_grad())
          as_matrix(tape.grad_accumulator(bias.id()), 1, n) +=
              dout.colwise().sum();
      });
}

Var add(Var a, Var b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  auto y = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  const Var inputs[] = {a, b};
  return a.tape().record(std::move(out), inputs,
                         [a, b](Tape& tape, std::size_t self) {
                           auto g = tape.grad(self).data();
                           for (const Var& in : {a, b})
                             if (in.requires_grad())
                               write_grad(tape, in,
                                          [g](std::size_t i) { return g[i]; });
                         });
}

Var add_bias(Var x, Var bias) {
  const std::size_t n = x.value().rows(), d = x.value().cols();
  if (bias.value().size() != d)
    throw DimensionError("add_bias: " + to_string(x.shape()) + " + " +
                         to_string(bias.shape()));
  auto out = Tensor::uninitialized(x.shape());
  const auto xv = x.value().data();
  const auto bv = bias.value().data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] + bv[c];
  const Var inputs[] = {x, bias};
  return x.tape().record(
      std::move(out), inputs, [x, bias, n, d](Tape& tape, std::size_t self) {
        auto g = tape.grad(self).data();
        if (x.requires_grad())
          write_grad(tape, x, [g](std::size_t i) { return g[i]; });
        if (bias.requires_grad()) {
          auto dst = tape.grad_accumulator(bias.id()).data();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) dst[c] += g[r * d + c];
        }
      });
}

Var multiply(Var a, Var b) {
  require_same_shape("multiply", a, b);
  Tensor out = a.value();
  auto y = out.data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  const Var inputs[] = {a, b};
  return a.tape().record(
      std::move(out), inputs, [a, b](Tape& tape, std::size_t self) {
        auto g = tape.grad(self).data();
        if (a.requires_grad()) {
          auto other = b.value().data();
          write_grad(tape, a, [&](std::size_t i) { return g[i] * other[i]; });
        }
        if (b.requires_grad()) {
          auto other = a.value().data();
          write_grad(tape, b, [&](std::size_t i) { return g[i] * other[i]; });
        }
      });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  const Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs,
                         [a, factor](Tape& tape, std::size_t self) {
                           auto g = tape.grad(self).data();
                           write_grad(tape, a, [&](std::size_t i) {
                             return g[i] * factor;
                           });
                         });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  const Var inputs[] = {a};
  return a.tape().record(Tensor::scalar(total), inputs,
                         [a](Tape& tape, std::size_t self) {
                           const double g = tape.grad(self)[0];
                           for (double& d : tape.grad_accumulator(a.id()).data())
                             d += g;
                         });
}

Var mean(Var a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var relu(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  const Var inputs[] = {a};
  return a.tape().record(std::move(out), inputs,
                         [a](Tape& tape, std::size_t self) {
                           auto g = tape.grad(self).data();
                           auto x = a.value().data();
                           write_grad(tape, a, [&](std::size_t i) {
                             return x[i] > 0.0 ? g[i] : 0.0;
                           });
                         });
}

Var softmax(Var x, std::size_t axis) {
  const AxisSplit s = split_at(x.shape(), axis);
  auto out = Tensor::uninitialized(x.shape());
  const auto in = x.value().data();
  auto y = out.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      double mx = in[base];
      for (std::size_t j = 1; j < s.len; ++j)
        mx = std::max(mx, in[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const double e = std::exp(in[base + j * s.inner] - mx);
        y[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) y[base + j * s.inner] /= z;
    }
  const Var inputs[] = {x};
  return x.tape().record(
      std::move(out), inputs, [x, s](Tape& tape, std::size_t self) {
        auto g = tape.grad(self).data();
        auto y = tape.value(self).data();
        auto dst = tape.grad_accumulator(x.id()).data();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.len * s.inner + i;
            double dot = 0.0;
            for (std::size_t j = 0; j < s.len; ++j)
              dot += y[base + j * s.inner] * g[base + j * s.inner];
            for (std::size_t j = 0; j < s.len; ++j) {
              const std::size_t idx = base + j * s.inner;
              dst[idx] += y[idx] * (g[idx] - dot);
            }
          }
      });
}

Var log_softmax(Var x) {
  const std::size_t n = x.value().rows(), v = x.value().cols();
  auto out = Tensor::uninitialized(x.shape());
  const auto in = x.value().data();
  auto y = out.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = in.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < v; ++c) y[r * v + c] = row[c] - lse;
  }
  const Var inputs[] = {x};
  return x.tape().record(
      std::move(out), inputs, [x, n, v](Tape& tape, std::size_t self) {
        auto g = tape.grad(self).data();
        auto y = tape.value(self).data();
        auto dst = tape.grad_accumulator(x.id()).data();
        for (std::size_t r = 0; r < n; ++r) {
          double gs = 0.0;
          for (std::size_t c = 0; c < v; ++c) gs += g[r * v + c];
          for (std::size_t c = 0; c < v; ++c)
            dst[r * v + c] += g[r * v + c] - std::exp(y[r * v + c]) * gs;
        }
      });
}

Var cross_entropy(Var logits, std::span<const int> targets, int pad_id) {
  require_matrix("cross_entropy", logits);
  const std::size_t n = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != n)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits " + to_string(logits.shape()));
  auto probs = std::make_shared<std::vector<double>>(n * v);
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  const auto in = logits.value().data();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const int t = targets[r];
    if (t == pad_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw VocabularyError("target id " + std::to_string(t) +
                            " outside vocabulary of size " + std::to_string(v));
    const double* row = in.data() + r * v;
    const double mx = *std::max_element(row, row + v);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      const double e = std::exp(row[c] - mx);
      (*probs)[r * v + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < v; ++c) (*probs)[r * v + c] /= z;
    total += mx + std::log(z) - row[t];
    ++count;
  }
  const double denom = count ? static_cast<double>(count) : 1.0;
  const Var inputs[] = {logits};
  return logits.tape().record(
      Tensor::scalar(total / denom), inputs,
      [logits, probs, tgt, n, v, pad_id, denom](Tape& tape, std::size_t self) {
        const double g = tape.grad(self)[0] / denom;
        auto dst = tape.grad_accumulator(logits.id()).data();
        for (std::size_t r = 0; r < n; ++r) {
          const int t = (*tgt)[r];
          if (t == pad_id) continue;
          for (std::size_t c = 0; c < v; ++c)
            dst[r * v + c] += g * (*probs)[r * v + c];
          dst[r * v + static_cast<std::size_t>(t)] -= g;
        }
      });
}

Var embedding_lookup(Var table, std::span<const int> ids) {
  require_matrix("embedding_lookup", table);
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  auto out = Tensor::uninitialized({ids.size(), d});
  const auto tv = table.value().data();
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const int id = ids[r];
    if (id < 0 || static_cast<std::size_t>(id) >= v)
      throw VocabularyError("token id " + std::to_string(id) +
                            " outside embedding table of " + std::to_string(v));
    std::copy_n(tv.data() + static_cast<std::size_t>(id) * d, d,
                out.data().data() + r * d);
  }
  const Var inputs[] = {table};
  return table.tape().record(
      std::move(out), inputs, [table, idx, d](Tape& tape, std::size_t self) {
        auto g = tape.grad(self).data();
        auto dst = tape.grad_accumulator(table.id()).data();
        for (std::size_t r = 0; r < idx->size(); ++r) {
          const std::size_t base = static_cast<std::size_t>((*idx)[r]) * d;
          for (std::size_t c = 0; c < d; ++c) dst[base + c] += g[r * d + c];
        }
      });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const std::size_t n = x.value().rows(), d = x.value().cols();
  if (gamma.value().size() != d || beta.value().size() != d)
    throw DimensionError("layer_norm: input " + to_string(x.shape()) +
                         ", gain " + to_string(gamma.shape()) + ", bias " +
                         to_string(beta.shape()));
  auto xhat = std::make_shared<std::vector<double>>(n * d);
  auto rstd = std::make_shared<std::vector<double>>(n);
  auto out = Tensor::uninitialized(x.shape());
  const auto in = x.value().data();
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = in.data() + r * d;
    double mu = 0.0;
    for (std::size_t c = 0; c < d; ++c) mu += row[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (row[c] - mu) * rs;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  const Var inputs[] = {x, gamma, beta};
  return x.tape().record(
      std::move(out), inputs,
      [x, gamma, beta, xhat, rstd, n, d](Tape& tape, std::size_t self) {
        auto g = tape.grad(self).data();
        const auto gv = gamma.value().data();
        if (gamma.requires_grad()) {
          auto dst = tape.grad_accumulator(gamma.id()).data();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c)
              dst[c] += g[r * d + c] * (*xhat)[r * d + c];
        }
        if (beta.requires_grad()) {
          auto dst = tape.grad_accumulator(beta.id()).data();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < d; ++c) dst[c] += g[r * d + c];
        }
        if (x.requires_grad()) {
          auto slot = tape.grad_slot(x.id());
          auto dst = slot.grad.data();
          if (slot.fresh) std::fill(dst.begin(), dst.end(), 0.0);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = g[r * d + c] * gv[c];
              mean_dh += dh;
              mean_dh_h += dh * (*xhat)[r * d + c];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t c = 0; c < d; ++c) {
              const double dh = g[r * d + c] * gv[c];
              dst[r * d + c] += (*rstd)[r] * (dh - mean_dh -
                                              (*xhat)[r * d + c] * mean_dh_h);
            }
          }
        }
      });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  Shape out_shape = first;
  out_shape.at(axis) = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i)
      ok = i == axis || s[i] == first[i];
    if (!ok)
      throw DimensionError("concat along axis " + std::to_string(axis) + ": " +
                           to_string(first) + " vs " + to_string(s));
    out_shape[axis] += s[axis];
  }
  const AxisSplit whole = split_at(out_shape, axis);
  auto out = Tensor::uninitialized(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.shape()[axis] * whole.inner;
    const auto src = p.value().data();
    for (std::size_t o = 0; o < whole.outer; ++o)
      std::copy_n(src.data() + o * chunk, chunk,
                  out.data().data() + o * whole.len * whole.inner + offset);
    offset += chunk;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(
      std::move(out), inputs,
      [inputs, offsets, whole, axis](Tape& tape, std::size_t self) {
        auto g = tape.grad(self).data();
        for (std::size_t p = 0; p < inputs.size(); ++p) {
          if (!inputs[p].requires_grad()) continue;
          const std::size_t chunk = inputs[p].shape()[axis] * whole.inner;
          auto dst = tape.grad_accumulator(inputs[p].id()).data();
          for (std::size_t o = 0; o < whole.outer; ++o) {
            const double* src = g.data() + o * whole.len * whole.inner + offsets[p];
            for (std::size_t i = 0; i < chunk; ++i) dst[o * chunk + i] += src[i];
          }
        }
      });
}

Var mask_fill(Var x, const std::vector<bool>& mask, double value) {
  if (mask.size() != x.value().size())
    throw DimensionError("mask_fill: mask of " + std::to_string(mask.size()) +
                         " entries for " + to_string(x.shape()));
  Tensor out = x.value();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) out[i] = value;
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs,
                         [x, mask](Tape& tape, std::size_t self) {
                           auto g = tape.grad(self).data();
                           write_grad(tape, x, [&](std::size_t i) {
                             return mask[i] ? 0.0 : g[i];
                           });
                         });
}

Var dropout(Var x, double rate, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ConfigError("dropout rate must lie in [0, 1)");
  if (rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  auto factors = std::make_shared<std::vector<double>>(x.value().size());
  // A draw below rate * 2^64 drops the unit.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(rate, 64));
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*factors)[i] = rng() < threshold ? 0.0 : keep_scale;
    out[i] *= (*factors)[i];
  }
  const Var inputs[] = {x};
  return x.tape().record(std::move(out), inputs,
                         [x, factors](Tape& tape, std::size_t self) {
                           auto g = tape.grad(self).data();
                           const auto& f = *factors;
                           write_grad(tape, x, [&](std::size_t i) {
                             return g[i] * f[i];
                           });
                         });
}

Var attention(Var q, Var k, Var v, const AttentionLayout& layout) {
  require_matrix("attention", q);
  require_matrix("attention", k);
  require_matrix("attention", v);
  const std::size_t B = layout.batch, Tq = layout.query_len,
                    Tk = layout.key_len, H = layout.heads;
  const std::size_t d = q.shape()[1];
  if (q.shape()[0] != B * Tq || k.shape()[0] != B * Tk ||
      v.shape()[0] != B * Tk || k.shape()[1] != d || v.shape()[1] != d)
    throw DimensionError("attention: q " + to_string(q.shape()) + ", k " +
                         to_string(k.shape()) + ", v " + to_string(v.shape()));
  if (H == 0 || d % H != 0)
    throw DimensionError("attention: width " + std::to_string(d) +
                         " not divisible into " + std::to_string(H) + " heads");
  if (!layout.key_padding.empty() && layout.key_padding.size() != B * Tk)
    throw DimensionError("attention: key padding mask size");
  const std::size_t dh = d / H;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  auto probs = std::make_shared<std::vector<double>>(B * H * Tq * Tk);
  Tensor out({B * Tq, d});
  const double* qd = q.value().data().data();
  const double* kd = k.value().data().data();
  const double* vd = v.value().data().data();
  double* od = out.data().data();
  std::vector<double> scores(Tk);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < Tq; ++i) {
        const double* qi = qd + (b * Tq + i) * d + h * dh;
        double mx = kMaskValue;
        for (std::size_t j = 0; j < Tk; ++j) {
          const bool masked =
              (layout.causal && j > i) ||
              (!layout.key_padding.empty() && layout.key_padding[b * Tk + j]);
          double s = kMaskValue;
          if (!masked) {
            const double* kj = kd + (b * Tk + j) * d + h * dh;
            s = 0.0;
            for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
            s *= inv_sqrt;
          }
          scores[j] = s;
          mx = std::max(mx, s);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < Tk; ++j) {
          scores[j] = std::exp(scores[j] - mx);
          z += scores[j];
        }
        double* p = probs->data() + ((b * H + h) * Tq + i) * Tk;
        double* oi = od + (b * Tq + i) * d + h * dh;
        for (std::size_t j = 0; j < Tk; ++j) {
          p[j] = scores[j] / z;
          if (p[j] == 0.0) continue;
          const double* vj = vd + (b * Tk + j) * d + h * dh;
          for (std::size_t c = 0; c < dh; ++c) oi[c] += p[j] * vj[c];
        }
      }

  const Var inputs[] = {q, k, v};
  return q.tape().record(
      std::move(out), inputs,
      [q, k, v, probs, B, Tq, Tk, H, d, dh, inv_sqrt](Tape& tape,
                                                      std::size_t self) {
        const double* g = tape.grad(self).data().data();
        const double* qd = q.value().data().data();
        const double* kd = k.value().data().data();
        const double* vd = v.value().data().data();
        double* dq = q.requires_grad()
                         ? tape.grad_accumulator(q.id()).data().data()
                         : nullptr;
        double* dk = k.requires_grad()
                         ? tape.grad_accumulator(k.id()).data().data()
                         : nullptr;
        double* dv = v.requires_grad()
                         ? tape.grad_accumulator(v.id()).data().data()
                         : nullptr;
        std::vector<double> dp(Tk);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < Tq; ++i) {
              const double* p = probs->data() + ((b * H + h) * Tq + i) * Tk;
              const double* gi = g + (b * Tq + i) * d + h * dh;
              double dot = 0.0;
              for (std::size_t j = 0; j < Tk; ++j) {
                dp[j] = 0.0;
                if (p[j] == 0.0) continue;
                const double* vj = vd + (b * Tk + j) * d + h * dh;
                for (std::size_t c = 0; c < dh; ++c) dp[j] += gi[c] * vj[c];
                dot += p[j] * dp[j];
                if (dv) {
                  double* dvj = dv + (b * Tk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dvj[c] += p[j] * gi[c];
                }
              }
              const double* qi = qd + (b * Tq + i) * d + h * dh;
              for (std::size_t j = 0; j < Tk; ++j) {
                if (p[j] == 0.0) continue;
                const double ds = p[j] * (dp[j] - dot) * inv_sqrt;
                if (dq) {
                  const double* kj = kd + (b * Tk + j) * d + h * dh;
                  double* dqi = dq + (b * Tq + i) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                }
                if (dk) {
                  double* dkj = dk + (b * Tk + j) * d + h * dh;
                  for (std::size_t c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                }
              }
            }
      });
}

}  // namespace kdmt::ad
