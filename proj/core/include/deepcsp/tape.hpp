#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "deepcsp/conv.hpp"
#include "deepcsp/tensor.hpp"

namespace deepcsp {

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint64_t tape_id = 0;
  std::size_t index = 0;
};

/// Output gradient for one recorded value, used to start a backward pass
/// from values whose gradient is computed elsewhere.
struct Seed {
  Var node;
  Tensor grad;
};

/// Gradients of every leaf that requires them.
class Gradients {
 public:
  Gradients() = default;
  Gradients(std::uint64_t tape_id, std::vector<std::optional<Tensor>> grads)
      : tape_id_(tape_id), grads_(std::move(grads)) {}

  /// Gradient for `v`; nullptr when nothing reachable from the seeds depends on it.
  const Tensor* find(Var v) const;
  /// Gradient for `v`, zeros of `like`'s shape when unreachable.
  Tensor get(Var v, const Tensor& like) const;

 private:
  std::uint64_t tape_id_ = 0;
  std::vector<std::optional<Tensor>> grads_;
};

/// Append-only record of primitive operations for reverse-mode
/// differentiation. Every node is recorded after its inputs, so the record is
/// topologically ordered by construction.
class Tape {
 public:
  Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) noexcept = default;
  Tape& operator=(Tape&&) noexcept = default;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, double s);
  /// Adds a 1-D `bias` along `axis` of `x`.
  Var add_bias(Var x, Var bias, std::size_t axis);
  /// (M, K)·(K, N) -> (M, N), or (M, K)·(B, K, N) -> (B, M, N).
  Var matmul(Var a, Var b);
  /// Same-length time convolution; see conv.hpp. `input_spectra` may hold
  /// precomputed spectra of the input's value.
  Var conv1d(Var input, Var kernel, std::size_t groups = 1,
             std::shared_ptr<const ConvInputSpectra> input_spectra = nullptr);
  Var concat(std::span<const Var> parts, std::size_t axis);
  Var log(Var a);
  Var exp(Var a);
  Var relu(Var a);
  Var sum(Var a);
  Var mean(Var a);
  Var trace(Var a);
  Var diag(Var a);
  Var kron(Var a, Var b);
  /// Mean over rows of -log softmax(logits)[label]; logits are (B, C).
  Var softmax_cross_entropy(Var logits, std::span<const int> labels);

  /// Backward pass from a scalar.
  Gradients backward(Var loss) const;
  /// Backward pass from externally supplied output gradients (summed).
  Gradients backward(std::span<const Seed> seeds) const;

 private:
  // Inputs' values, this node's value, its output gradient; accumulates into
  // grad_in entries that are non-null.
  using BackwardFn =
      std::function<void(std::span<const Tensor* const> in, const Tensor& out,
                         const Tensor& grad_out, std::span<Tensor* const> grad_in)>;
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::size_t check(Var v) const;
  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);

  std::uint64_t id_;
  std::vector<Node> nodes_;
};

}  // namespace deepcsp
