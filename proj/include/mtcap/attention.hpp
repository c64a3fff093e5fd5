// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

// Attention building blocks: scaled dot-product attention, multi-head
// attention, the position-wise feed-forward network and residual add-norm.

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mtcap/autodiff.hpp"

namespace mtcap {

enum class AttentionRole { kEncoderSelf, kDecoderSelf, kDecoderGuided, kMultiViewGuided };

std::string_view role_name(AttentionRole role);
std::optional<AttentionRole> parse_role(std::string_view name);

struct AttentionRecord {
  AttentionRole role = AttentionRole::kEncoderSelf;
  int block = 0;  // 1-based
  int head = 0;   // 0-based
  Tensor<double> weights;  // queries x keys
};

// Collects attention maps for one batch element. Recording copies the
// weights and never changes computed values.
struct AttentionRecorder {
  std::size_t example = 0;
  std::vector<AttentionRecord> records;
};

// One JSON object per record:
// {"role","block","head","shape":[q,k],"weights":[row-major, 6 decimals]}
std::string attention_record_json(const AttentionRecord& record);

// How a fused attention call maps stacked rows onto batch elements and heads.
// Queries are (batch * queries) x (heads * d_h), keys/values
// (batch * keys) x (heads * d_h).
template <typename T>
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t queries = 0;
  std::size_t keys = 0;
  std::size_t heads = 1;
  double scale = 1.0;
  bool causal = false;                                 // key j visible to query i iff j <= i
  const std::vector<std::uint8_t>* key_valid = nullptr;  // batch * keys, 0 = padding
  const Tensor<T>* additive_mask = nullptr;           // queries x keys, shared by the batch
  double dropout = 0.0;                                // on attention weights, train mode only
  AttentionRecorder* recorder = nullptr;
  AttentionRole role = AttentionRole::kEncoderSelf;
  int block = 0;
};

// softmax(Q K^T * scale + mask) V for every (batch element, head) pair, with an
// exact backward rule. Reductions over keys are summed in an order fixed by
// key content, so permuting key/value rows leaves the output bit-identical.
template <typename T>
Var<T> attention_core(const Var<T>& q, const Var<T>& k, const Var<T>& v, const AttentionLayout<T>& layout);

template <typename T>
struct SdpaResult {
  Var<T> output;
  Tensor<double> weights;
};

// Single-head scaled dot-product attention with divisor sqrt(d).
template <typename T>
SdpaResult<T> sdpa(const Var<T>& q, const Var<T>& k, const Var<T>& v, const Tensor<T>* mask = nullptr);

template <typename T>
struct MhaParams {
  // Head i owns columns [i*d_h, (i+1)*d_h) of the query/key/value projections,
  // i.e. each W is the column concatenation of the per-head d x d_h matrices.
  Parameter<T>* query = nullptr;
  Parameter<T>* key = nullptr;
  Parameter<T>* value = nullptr;
  Parameter<T>* output = nullptr;  // (h * d_h) x d
  Parameter<T>* query_bias = nullptr;
  Parameter<T>* key_bias = nullptr;
  Parameter<T>* value_bias = nullptr;
  Parameter<T>* output_bias = nullptr;
  std::size_t heads = 1;

  std::size_t model_dim() const { return query->value.rows(); }
  std::size_t head_dim() const { return query->value.cols() / heads; }
};

template <typename T>
MhaParams<T> make_mha(ParameterStore<T>& store, const std::string& prefix, std::size_t model_dim,
                      std::size_t heads, bool use_bias, Rng& rng);

template <typename T>
struct FfnParams {
  Parameter<T>* inner = nullptr;  // d x d_ff
  Parameter<T>* inner_bias = nullptr;
  Parameter<T>* outer = nullptr;  // d_ff x d
  Parameter<T>* outer_bias = nullptr;
  double dropout = 0.1;
};

template <typename T>
FfnParams<T> make_ffn(ParameterStore<T>& store, const std::string& prefix, std::size_t model_dim,
                      std::size_t inner_dim, double dropout, bool use_bias, Rng& rng);

template <typename T>
struct LayerNormParams {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;
};

template <typename T>
LayerNormParams<T> make_layer_norm(ParameterStore<T>& store, const std::string& prefix, std::size_t dim);

// Flags shared by every attention block of a model.
struct AttentionOptions {
  bool scale_by_model_dim = false;  // divide by sqrt(d) instead of sqrt(d_h)
  double attention_dropout = 0.0;
  double residual_dropout = 0.0;
  double layer_norm_eps = 1e-5;
};

struct MhaCall {
  std::size_t batch = 1;
  std::size_t queries = 0;
  std::size_t keys = 0;
  bool causal = false;
  const std::vector<std::uint8_t>* key_valid = nullptr;
  AttentionRecorder* recorder = nullptr;
  AttentionRole role = AttentionRole::kEncoderSelf;
  int block = 0;
};

// Concat(head_1..head_h) W^O with head_i = A(Q W_i^Q, K W_i^K, V W_i^V).
template <typename T>
Var<T> multi_head(const Var<T>& queries, const Var<T>& keys_values, const MhaParams<T>& params,
                  const MhaCall& call, const AttentionOptions& options);

// Same, with distinct key and value inputs.
template <typename T>
Var<T> multi_head(const Var<T>& queries, const Var<T>& keys, const Var<T>& values,
                  const MhaParams<T>& params, const MhaCall& call, const AttentionOptions& options);

// FC(Dropout(ReLU(FC(x)))).
template <typename T>
Var<T> ffn(const Var<T>& x, const FfnParams<T>& params);

// LayerNorm(x + sublayer_out).
template <typename T>
Var<T> add_norm(const Var<T>& x, const Var<T>& sublayer_out, const LayerNormParams<T>& ln,
                const AttentionOptions& options);

}  // namespace mtcap
