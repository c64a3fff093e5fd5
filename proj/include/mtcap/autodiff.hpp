// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

// Reverse-mode automatic differentiation over dense matrices.
//
// A Tape owns every intermediate value of one forward pass. Ops append a node
// holding the output value and a backward rule; Tape::backward walks the nodes
// in strict reverse order once. Parameters live outside the tape and receive
// accumulated gradients when the pass finishes. Tapes share no mutable state,
// so distinct tapes may run on distinct threads.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtcap/error.hpp"
#include "mtcap/rng.hpp"
#include "mtcap/tensor.hpp"

namespace mtcap {

// Additive mask value standing in for -inf before a softmax.
inline constexpr double kMaskValue = -1e9;

inline bool is_masked(double v) { return v <= kMaskValue * 0.5; }

template <typename T>
class Tape;

template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::uint32_t id() const noexcept { return id_; }
  const Tensor<T>& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool frozen = false;

  void zero_grad() { grad = Tensor<T>(value.rows(), value.cols()); }
};

// Ordered, named parameter collection. Insertion order is the checkpoint and
// optimizer order.
template <typename T>
class ParameterStore {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value) {
    require(!by_name_.contains(name), ErrorCode::kInternal, "duplicate parameter " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = std::move(name);
    p->grad = Tensor<T>(value.rows(), value.cols());
    p->value = std::move(value);
    Parameter<T>* raw = p.get();
    by_name_.emplace(raw->name, raw);
    params_.push_back(std::move(p));
    return *raw;
  }

  Parameter<T>* find(std::string_view name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  std::vector<Parameter<T>*> all() const {
    std::vector<Parameter<T>*> out;
    out.reserve(params_.size());
    for (const auto& p : params_) {
      out.push_back(p.get());
    }
    return out;
  }

  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) {
      n += p->value.size();
    }
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) {
      p->zero_grad();
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, Parameter<T>*, std::less<>> by_name_;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t)>;

  explicit Tape(std::uint64_t seed = 0) : rng_(seed) { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // When disabled, ops record values only; used for inference.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }

  // Controls dropout.
  void set_training(bool training) { training_ = training; }
  bool training() const { return training_; }

  Rng& rng() { return rng_; }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  Var<T> variable(Tensor<T> value) { return push(std::move(value), grad_enabled_, nullptr); }

  // Registers a parameter leaf once per tape; repeated calls return the same node.
  Var<T> parameter(Parameter<T>& p) {
    auto it = param_ids_.find(&p);
    if (it != param_ids_.end()) {
      return Var<T>(this, it->second);
    }
    Var<T> v = push(p.value, grad_enabled_ && !p.frozen, nullptr);
    nodes_[v.id()].parameter = &p;
    param_ids_.emplace(&p, v.id());
    return v;
  }

  Var<T> push(Tensor<T> value, bool requires_grad, BackwardFn backward) {
    require(!backward_done_, ErrorCode::kInternal, "tape already consumed by backward()");
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad && grad_enabled_;
    if (node.requires_grad) {
      node.backward = std::move(backward);
    }
    nodes_.push_back(std::move(node));
    return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
  }

  const Tensor<T>& value(std::uint32_t id) const { return nodes_[id].value; }
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(const Var<T>& v) const { return nodes_[v.id()].requires_grad; }

  // Gradient flowing into node `id`; valid inside a backward rule.
  const Tensor<T>& grad(std::uint32_t id) const { return nodes_[id].grad; }

  // Gradient accumulator for an operand, zero-initialized on first use.
  Tensor<T>& grad_buffer(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.rows(), n.value.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  // Gradient of a node after backward(); zeros when it was off the loss path.
  Tensor<T> gradient(const Var<T>& v) const {
    const Node& n = nodes_[v.id()];
    return n.has_grad ? n.grad : Tensor<T>(n.value.rows(), n.value.cols());
  }

  void backward(const Var<T>& loss) {
    require(loss.valid() && &loss.tape() == this, ErrorCode::kInvalidArgument,
            "loss does not belong to this tape");
    const Tensor<T>& lv = nodes_[loss.id()].value;
    require(lv.rows() == 1 && lv.cols() == 1, ErrorCode::kDimension,
            "backward() needs a scalar loss, got " + shape_string(lv));
    require(!backward_done_, ErrorCode::kInternal, "backward() already ran on this tape");
    backward_done_ = true;
    if (!nodes_[loss.id()].requires_grad) {
      return;
    }
    grad_buffer(loss.id())(0, 0) = T(1);
    for (std::uint32_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.has_grad && n.backward) {
        n.backward(*this, id);
      }
    }
    for (Node& n : nodes_) {
      if (n.parameter != nullptr && n.has_grad && n.requires_grad) {
        add_into(n.parameter->grad, n.grad);
      }
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
    Parameter<T>* parameter = nullptr;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, std::uint32_t> param_ids_;
  Rng rng_;
  bool grad_enabled_ = true;
  bool training_ = false;
  bool backward_done_ = false;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

// ---------------------------------------------------------------------------
// Primitive ops. Each records an exact backward rule.

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

// x + row, with `row` (1 x c) broadcast over every row of x.
template <typename T>
Var<T> add_row(const Var<T>& x, const Var<T>& row);

template <typename T>
Var<T> scale(const Var<T>& x, double s);

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> sigmoid(const Var<T>& x);

template <typename T>
Var<T> tanh(const Var<T>& x);

// Inverted dropout: identity when the tape is not training or rate == 0.
template <typename T>
Var<T> dropout(const Var<T>& x, double rate);

template <typename T>
Var<T> transpose(const Var<T>& x);

template <typename T>
Var<T> concat_columns(std::span<const Var<T>> parts);

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts);

template <typename T>
Var<T> slice_rows(const Var<T>& x, std::size_t start, std::size_t count);

template <typename T>
Var<T> slice_columns(const Var<T>& x, std::size_t start, std::size_t count);

// out.row(i) = x.row(index[i]); backward scatters with accumulation.
template <typename T>
Var<T> gather_rows(const Var<T>& x, std::span<const std::size_t> index);

// Table row lookup. Rows equal to `pinned_id` read as zeros and never receive
// gradient (pass a negative id to disable).
template <typename T>
Var<T> embedding_lookup(const Var<T>& table, std::span<const std::int32_t> ids,
                        std::int64_t pinned_id = -1);

// Column-wise mean over rows: p x q -> 1 x q.
template <typename T>
Var<T> mean_rows(const Var<T>& x);

// Sum of all entries -> 1 x 1.
template <typename T>
Var<T> sum(const Var<T>& x);

// Sum of weights (.) x -> 1 x 1, with constant weights.
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& weights);

// Row softmax with optional additive mask (entries 0 or kMaskValue).
// A row whose every entry is masked raises "degenerate attention row".
template <typename T>
Var<T> softmax_rows(const Var<T>& x, const Tensor<T>* mask = nullptr);

template <typename T>
Var<T> log_softmax_rows(const Var<T>& x);

// out(i, 0) = x(i, columns[i]).
template <typename T>
Var<T> pick(const Var<T>& x, std::span<const std::int32_t> columns);

// Per-row standardization (population variance) followed by gain/bias.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias, double eps);

// x * W + b, bias optional.
template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>* bias);

// ---------------------------------------------------------------------------
// One-layer LSTM cell with coupled input/forget/cell/output gates.

template <typename T>
struct LstmParams {
  Parameter<T>* input_weight = nullptr;   // e x 4h, gate blocks [i f g o]
  Parameter<T>* hidden_weight = nullptr;  // h x 4h
  Parameter<T>* bias = nullptr;           // 1 x 4h
  std::size_t hidden() const { return hidden_weight->value.rows(); }
};

template <typename T>
struct LstmState {
  Var<T> h;
  Var<T> c;
};

template <typename T>
LstmState<T> lstm_cell(const Var<T>& x, const LstmState<T>& prev, const LstmParams<T>& params);

}  // namespace mtcap
