#pragma once

// Minimal reverse-mode differentiation over 2-D tensors. A Tape records nodes
// in creation order; backward() walks them in reverse. Every op below has a
// hand-written adjoint.

#include <cstddef>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "colongpt/tensor.hpp"

namespace colongpt::ag {

class Tape;

/// Handle to a tape node. A default-constructed Var means "absent".
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  explicit operator bool() const noexcept { return tape != nullptr; }
  const Tensor& value() const;
  const Tensor& grad() const;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);
  /// Leaf that reads `value` in place; `value` must outlive the tape.
  Var external(const Tensor& value, bool requires_grad);
  Var make(Tensor value, std::span<const Var> inputs, Backward backward);

  /// Seeds d(root)/d(root) = 1; root must hold a single element.
  void backward(Var root);

  const Tensor& value(Var v) const { return value(v.id); }
  const Tensor& grad(Var v) const { return nodes_[v.id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient buffer of `v`, zero-initialised on first use.
  Tensor& grad_buffer(std::size_t id);
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const Tensor& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

using ParamMap = std::map<std::string, Tensor>;

/// Binds named parameters onto a tape as leaves; only names in the trainable
/// set receive gradients. A null trainable set means everything is trainable.
class ParamBinder {
 public:
  ParamBinder(Tape& tape, const ParamMap& params, const std::set<std::string>* trainable = nullptr)
      : tape_(tape), params_(params), trainable_(trainable) {}

  Var operator()(const std::string& name);
  bool has(const std::string& name) const { return params_.count(name) != 0; }
  const Tensor& raw(const std::string& name) const;

  /// Gradients of every bound trainable parameter (after tape.backward()).
  ParamMap gradients() const;
  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  const ParamMap& params_;
  const std::set<std::string>* trainable_;
  std::map<std::string, Var> bound_;
};

// ---- ops -------------------------------------------------------------------

Var add(Var a, Var b);
Var scale(Var a, double s);
/// x[n x in] * W[out x in]^T + b[out]; `b` may be absent.
Var linear(Var x, Var w, Var b = {});
Var gelu(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// Causal multi-head attention over row-token matrices q, k, v [n x D].
Var causal_attention(Var q, Var k, Var v, std::size_t heads);
Var gather_rows(Var table, std::span<const std::size_t> rows);
Var concat_rows(std::span<const Var> parts);
/// Adaptive average pooling of an (h*w) x C grid to (s*s) x C.
Var adaptive_avg_pool(Var grid, std::size_t h, std::size_t w, std::size_t s);
/// 3x3 stride-1 zero-padded convolution; weight (out, in, 3, 3), bias (out).
Var conv3x3(Var grid, std::size_t h, std::size_t w, Var weight, Var bias);
/// W + scale * B * A with W [out x in], A [r x in], B [out x r].
Var lora_weight(Var w, Var a, Var b, double scale);
Var sum_squares(Var x);
/// Mean token cross-entropy of logits [m x V] against `targets`.
Var cross_entropy(Var logits, std::span<const std::size_t> targets);

// Scalar helpers used outside the graph.
double gelu_value(double x);
double gelu_derivative(double x);

}  // namespace colongpt::ag
