#include "deepcsp/tape.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include "deepcsp/conv.hpp"
#include "deepcsp/error.hpp"

namespace deepcsp {
namespace {

std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter++;
}

// Outer / axis / inner extents of `shape` around `axis`.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) throw ShapeError("axis out of range for shape " + shape_string(shape));
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// c (M, N) += a (M, K) · b (K, N), raw row-major buffers.
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// c (M, N) += a (M, K) · b(N, K)ᵀ
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ar = a + i * k;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      const double *b0 = b + j * k, *b1 = b0 + k, *b2 = b1 + k, *b3 = b2 + k;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        s0 += ar[p] * b0[p];
        s1 += ar[p] * b1[p];
        s2 += ar[p] * b2[p];
        s3 += ar[p] * b3[p];
      }
      c[i * n + j] += s0;
      c[i * n + j + 1] += s1;
      c[i * n + j + 2] += s2;
      c[i * n + j + 3] += s3;
    }
    for (; j < n; ++j) {
      double acc = 0.0;
      const double* br = b + j * k;
      for (std::size_t p = 0; p < k; ++p) acc += ar[p] * br[p];
      c[i * n + j] += acc;
    }
  }
}

// c (K, N) += a(M, K)ᵀ · b (M, N)
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = b + i * n;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
}

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  auto d = dst->data();
  auto s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

}  // namespace

const Tensor* Gradients::find(Var v) const {
  if (v.tape_id != tape_id_ || v.index >= grads_.size() || !grads_[v.index]) return nullptr;
  return &*grads_[v.index];
}

Tensor Gradients::get(Var v, const Tensor& like) const {
  if (const Tensor* g = find(v)) return *g;
  return Tensor(like.shape());
}

Tape::Tape() : id_(next_tape_id()) {}

std::size_t Tape::check(Var v) const {
  if (v.tape_id != id_ || v.index >= nodes_.size()) {
    throw Error("value is not recorded on this tape");
  }
  return v.index;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{id_, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const { return nodes_[check(v)].value; }

bool Tape::requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = std::any_of(inputs.begin(), inputs.end(),
                                [&](std::size_t i) { return nodes_[i].requires_grad; });
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{id_, nodes_.size() - 1};
}

Var Tape::add(Var a, Var b) {
  const auto ia = check(a), ib = check(b);
  Tensor out = nodes_[ia].value + nodes_[ib].value;
  return record(std::move(out), {ia, ib},
                [](auto, const Tensor&, const Tensor& g, std::span<Tensor* const> gi) {
                  accumulate(gi[0], g);
                  accumulate(gi[1], g);
                });
}

Var Tape::sub(Var a, Var b) {
  const auto ia = check(a), ib = check(b);
  Tensor out = nodes_[ia].value - nodes_[ib].value;
  return record(std::move(out), {ia, ib},
                [](auto, const Tensor&, const Tensor& g, std::span<Tensor* const> gi) {
                  accumulate(gi[0], g);
                  if (gi[1]) accumulate(gi[1], -1.0 * g);
                });
}

Var Tape::mul(Var a, Var b) {
  const auto ia = check(a), ib = check(b);
  const Tensor& x = nodes_[ia].value;
  const Tensor& y = nodes_[ib].value;
  require_same_shape(x, y, "mul");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return record(std::move(out), {ia, ib},
                [](std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                   std::span<Tensor* const> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (gi[0]) (*gi[0])[i] += g[i] * (*in[1])[i];
                    if (gi[1]) (*gi[1])[i] += g[i] * (*in[0])[i];
                  }
                });
}

Var Tape::scale(Var a, double s) {
  const auto ia = check(a);
  return record(s * nodes_[ia].value, {ia},
                [s](auto, const Tensor&, const Tensor& g, std::span<Tensor* const> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += s * g[i];
                });
}

Var Tape::add_bias(Var x, Var bias, std::size_t axis) {
  const auto ix = check(x), ib = check(bias);
  const Tensor& xv = nodes_[ix].value;
  const Tensor& bv = nodes_[ib].value;
  const AxisSplit sp = split_axis(xv.shape(), axis);
  if (bv.rank() != 1 || bv.size() != sp.extent) {
    throw ShapeError("add_bias: bias shape " + shape_string(bv.shape()) + " does not match axis " +
                     std::to_string(axis) + " of " + shape_string(xv.shape()));
  }
  Tensor out = xv;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t e = 0; e < sp.extent; ++e) {
      double* row = &out[(o * sp.extent + e) * sp.inner];
      for (std::size_t i = 0; i < sp.inner; ++i) row[i] += bv[e];
    }
  return record(std::move(out), {ix, ib},
                [sp](auto, const Tensor&, const Tensor& g, std::span<Tensor* const> gi) {
                  accumulate(gi[0], g);
                  if (!gi[1]) return;
                  for (std::size_t o = 0; o < sp.outer; ++o)
                    for (std::size_t e = 0; e < sp.extent; ++e) {
                      const double* row = &g[(o * sp.extent + e) * sp.inner];
                      double acc = 0.0;
                      for (std::size_t i = 0; i < sp.inner; ++i) acc += row[i];
                      (*gi[1])[e] += acc;
                    }
                });
}

Var Tape::matmul(Var a, Var b) {
  const auto ia = check(a), ib = check(b);
  const Tensor& av = nodes_[ia].value;
  const Tensor& bv = nodes_[ib].value;
  if (av.rank() != 2 || (bv.rank() != 2 && bv.rank() != 3)) {
    throw ShapeError("matmul: unsupported ranks " + shape_string(av.shape()) + " · " +
                     shape_string(bv.shape()));
  }
  const bool batched = bv.rank() == 3;
  const std::size_t batch = batched ? bv.dim(0) : 1;
  const std::size_t m = av.dim(0), k = av.dim(1);
  const std::size_t kb = bv.dim(batched ? 1 : 0), n = bv.dim(batched ? 2 : 1);
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(av.shape()) + " · " +
                     shape_string(bv.shape()));
  }
  Tensor out(batched ? Shape{batch, m, n} : Shape{m, n});
  for (std::size_t bi = 0; bi < batch; ++bi)
    gemm_acc(av.data().data(), bv.data().data() + bi * k * n, out.data().data() + bi * m * n, m, k, n);
  return record(std::move(out), {ia, ib},
                [batch, m, k, n](std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                                 std::span<Tensor* const> gi) {
                  for (std::size_t bi = 0; bi < batch; ++bi) {
                    const double* gb = g.data().data() + bi * m * n;
                    if (gi[0]) gemm_nt_acc(gb, in[1]->data().data() + bi * k * n, gi[0]->data().data(), m, n, k);
                    if (gi[1]) gemm_tn_acc(in[0]->data().data(), gb, gi[1]->data().data() + bi * k * n, m, k, n);
                  }
                });
}

Var Tape::conv1d(Var input, Var kernel, std::size_t groups,
                 std::shared_ptr<const ConvInputSpectra> input_spectra) {
  const auto ix = check(input), ik = check(kernel);
  Tensor out = conv1d_forward(nodes_[ix].value, nodes_[ik].value, groups, ConvAlgorithm::automatic,
                              input_spectra.get());
  return record(std::move(out), {ix, ik},
                [groups, spectra = std::move(input_spectra)](
                    std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                    std::span<Tensor* const> gi) {
                  if (gi[0]) accumulate(gi[0], conv1d_grad_input(*in[1], g, in[0]->shape(), groups));
                  if (gi[1]) {
                    accumulate(gi[1], conv1d_grad_kernel(*in[0], g, in[1]->shape(), groups,
                                                         ConvAlgorithm::automatic, spectra.get()));
                  }
                });
}

Var Tape::concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  std::vector<std::size_t> idx;
  for (Var p : parts) idx.push_back(check(p));
  const Shape& first = nodes_[idx[0]].value.shape();
  std::vector<std::size_t> extents;
  Shape out_shape = first;
  out_shape.at(axis) = 0;
  for (auto i : idx) {
    const Shape& s = nodes_[i].value.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw ShapeError("concat: shapes " + shape_string(first) + " and " + shape_string(s) +
                         " differ off the concatenation axis");
      }
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const AxisSplit sp = split_axis(out_shape, axis);
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < idx.size(); ++p) {
    const Tensor& v = nodes_[idx[p]].value;
    const std::size_t chunk = extents[p] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(v.data().data() + o * chunk, chunk,
                  out.data().data() + o * sp.extent * sp.inner + offset * sp.inner);
    }
    offset += extents[p];
  }
  return record(std::move(out), idx,
                [sp, extents](auto, const Tensor&, const Tensor& g, std::span<Tensor* const> gi) {
                  std::size_t offset = 0;
                  for (std::size_t p = 0; p < extents.size(); ++p) {
                    const std::size_t chunk = extents[p] * sp.inner;
                    if (gi[p]) {
                      for (std::size_t o = 0; o < sp.outer; ++o) {
                        const double* src = g.data().data() + o * sp.extent * sp.inner + offset * sp.inner;
                        double* dst = gi[p]->data().data() + o * chunk;
                        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                      }
                    }
                    offset += extents[p];
                  }
                });
}

Var Tape::log(Var a) {
  const auto ia = check(a);
  Tensor out = nodes_[ia].value;
  for (auto& v : out.data()) v = std::log(v);
  return record(std::move(out), {ia},
                [](std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                   std::span<Tensor* const> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] / (*in[0])[i];
                });
}

Var Tape::exp(Var a) {
  const auto ia = check(a);
  Tensor out = nodes_[ia].value;
  for (auto& v : out.data()) v = std::exp(v);
  return record(std::move(out), {ia},
                [](auto, const Tensor& out, const Tensor& g, std::span<Tensor* const> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * out[i];
                });
}

Var Tape::relu(Var a) {
  const auto ia = check(a);
  Tensor out = nodes_[ia].value;
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  return record(std::move(out), {ia},
                [](auto, const Tensor& out, const Tensor& g, std::span<Tensor* const> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (out[i] > 0.0) (*gi[0])[i] += g[i];
                  }
                });
}

Var Tape::sum(Var a) {
  const auto ia = check(a);
  double s = 0.0;
  for (double v : nodes_[ia].value.data()) s += v;
  return record(Tensor::scalar(s), {ia},
                [](auto, const Tensor&, const Tensor& g, std::span<Tensor* const> gi) {
                  for (auto& v : gi[0]->data()) v += g[0];
                });
}

Var Tape::mean(Var a) {
  const auto ia = check(a);
  const Tensor& v = nodes_[ia].value;
  if (v.empty()) throw ShapeError("mean of empty tensor");
  double s = 0.0;
  for (double x : v.data()) s += x;
  const double inv = 1.0 / static_cast<double>(v.size());
  return record(Tensor::scalar(s * inv), {ia},
                [inv](auto, const Tensor&, const Tensor& g, std::span<Tensor* const> gi) {
                  for (auto& x : gi[0]->data()) x += g[0] * inv;
                });
}

Var Tape::trace(Var a) {
  const auto ia = check(a);
  const double t = deepcsp::trace(nodes_[ia].value);
  return record(Tensor::scalar(t), {ia},
                [](auto, const Tensor&, const Tensor& g, std::span<Tensor* const> gi) {
                  const std::size_t n = gi[0]->rows();
                  for (std::size_t i = 0; i < n; ++i) (*gi[0])(i, i) += g[0];
                });
}

Var Tape::diag(Var a) {
  const auto ia = check(a);
  const Tensor& m = nodes_[ia].value;
  if (m.rows() != m.cols()) throw ShapeError("diag of non-square matrix");
  std::vector<double> d(m.rows());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = m(i, i);
  return record(Tensor::vector(std::move(d)), {ia},
                [](auto, const Tensor&, const Tensor& g, std::span<Tensor* const> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])(i, i) += g[i];
                });
}

Var Tape::kron(Var a, Var b) {
  const auto ia = check(a), ib = check(b);
  const Tensor& x = nodes_[ia].value;
  const Tensor& y = nodes_[ib].value;
  const std::size_t p = x.rows(), q = x.cols(), r = y.rows(), s = y.cols();
  Tensor out(Shape{p * r, q * s});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < q; ++j)
      for (std::size_t k = 0; k < r; ++k)
        for (std::size_t l = 0; l < s; ++l) out(i * r + k, j * s + l) = x(i, j) * y(k, l);
  return record(std::move(out), {ia, ib},
                [p, q, r, s](std::span<const Tensor* const> in, const Tensor&, const Tensor& g,
                             std::span<Tensor* const> gi) {
                  for (std::size_t i = 0; i < p; ++i)
                    for (std::size_t j = 0; j < q; ++j)
                      for (std::size_t k = 0; k < r; ++k)
                        for (std::size_t l = 0; l < s; ++l) {
                          const double gv = g(i * r + k, j * s + l);
                          if (gi[0]) (*gi[0])(i, j) += gv * (*in[1])(k, l);
                          if (gi[1]) (*gi[1])(k, l) += gv * (*in[0])(i, j);
                        }
                });
}

Var Tape::softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const auto il = check(logits);
  const Tensor& z = nodes_[il].value;
  const std::size_t b = z.rows(), c = z.cols();
  if (labels.size() != b) throw ShapeError("softmax_cross_entropy: one label per row required");
  Tensor probs(Shape{b, c});
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw InvalidArgument("softmax_cross_entropy: label out of range");
    }
    double mx = z(i, 0);
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, z(i, j));
    double denom = 0.0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(z(i, j) - mx);
    for (std::size_t j = 0; j < c; ++j) probs(i, j) = std::exp(z(i, j) - mx) / denom;
    loss -= z(i, static_cast<std::size_t>(labels[i])) - mx - std::log(denom);
  }
  const double inv_b = 1.0 / static_cast<double>(b);
  std::vector<int> lab(labels.begin(), labels.end());
  return record(Tensor::scalar(loss * inv_b), {il},
                [probs = std::move(probs), lab = std::move(lab), inv_b](
                    auto, const Tensor&, const Tensor& g, std::span<Tensor* const> gi) {
                  const std::size_t rows = probs.rows(), cols = probs.cols();
                  for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j) {
                      const double target = static_cast<std::size_t>(lab[i]) == j ? 1.0 : 0.0;
                      (*gi[0])(i, j) += g[0] * inv_b * (probs(i, j) - target);
                    }
                });
}

Gradients Tape::backward(Var loss) const {
  const auto il = check(loss);
  if (nodes_[il].value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " +
                     shape_string(nodes_[il].value.shape()));
  }
  Seed seed{loss, Tensor(nodes_[il].value.shape(), 1.0)};
  return backward(std::span<const Seed>(&seed, 1));
}

Gradients Tape::backward(std::span<const Seed> seeds) const {
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  std::size_t top = 0;
  for (const auto& s : seeds) {
    const auto i = check(s.node);
    require_same_shape(nodes_[i].value, s.grad, "backward seed");
    if (!grads[i]) {
      grads[i] = s.grad;
    } else {
      accumulate(&*grads[i], s.grad);
    }
    top = std::max(top, i + 1);
  }

  std::vector<Tensor*> grad_in;
  std::vector<const Tensor*> in_values;
  for (std::size_t idx = top; idx-- > 0;) {
    const Node& node = nodes_[idx];
    if (!grads[idx] || !node.requires_grad || node.inputs.empty()) continue;
    grad_in.assign(node.inputs.size(), nullptr);
    in_values.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const std::size_t src = node.inputs[k];
      if (src >= idx) throw Error("backward: cycle detected on tape");
      in_values[k] = &nodes_[src].value;
      if (!nodes_[src].requires_grad) continue;
      if (!grads[src]) grads[src] = Tensor(nodes_[src].value.shape());
      grad_in[k] = &*grads[src];
    }
    node.backward(in_values, node.value, *grads[idx], grad_in);
    grads[idx].reset();  // interior gradients are not reported
  }
  // Only leaves keep their gradients.
  for (std::size_t idx = 0; idx < nodes_.size(); ++idx) {
    if (!nodes_[idx].inputs.empty() || !nodes_[idx].requires_grad) grads[idx].reset();
  }
  return Gradients(id_, std::move(grads));
}

}  // namespace deepcsp
