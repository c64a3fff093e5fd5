// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

// Image encoders: single-view (SV), aligned multi-view (AMV) and unaligned
// multi-view (UMV). All three map per-image object features to an m x d
// matrix of attended features, m being the primary view's object count.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mtcap/attention.hpp"
#include "mtcap/model_config.hpp"

namespace mtcap {

// Object features of one image: view i is an m_i x d_i matrix.
struct FeatureViews {
  std::vector<Tensor<float>> views;
  bool aligned = false;

  std::size_t num_views() const { return views.size(); }
  // M >= 1, every view non-empty, and equal object counts when aligned.
  void validate() const;
};

// Column concatenation of aligned views: m x (d_1 + ... + d_M).
Tensor<float> amv_concat(const FeatureViews& views);

// One view across a batch, object rows padded to the batch maximum.
template <typename T>
struct ViewBatch {
  Tensor<T> features;              // (batch * objects) x d_i
  std::size_t objects = 0;         // padded per-image object count
  std::vector<std::uint8_t> valid;  // batch * objects, 1 = real object
};

template <typename T>
struct FeatureBatch {
  std::size_t batch = 0;
  std::vector<ViewBatch<T>> views;

  static FeatureBatch from_images(std::span<const FeatureViews* const> images);
  static FeatureBatch from_image(const FeatureViews& image);
};

template <typename T>
struct EncodedImages {
  Var<T> features;  // (batch * objects) x d
  std::size_t batch = 0;
  std::size_t objects = 0;
  std::vector<std::uint8_t> valid;

  // Rows of batch element `index[i]` become batch element i.
  EncodedImages select(std::span<const std::size_t> index) const;
};

template <typename T>
struct EncoderBlockParams {
  MhaParams<T> attention;
  LayerNormParams<T> attention_norm;
  FfnParams<T> ffn;
  LayerNormParams<T> ffn_norm;
};

template <typename T>
struct UmvBlockParams {
  std::vector<MhaParams<T>> guided;  // one per non-primary view
  LayerNormParams<T> fusion_norm;
  FfnParams<T> ffn;
  LayerNormParams<T> ffn_norm;
};

struct BlockCall {
  std::size_t batch = 1;
  std::size_t objects = 0;
  const std::vector<std::uint8_t>* valid = nullptr;
  AttentionRecorder* recorder = nullptr;
  int block = 0;
};

// X^l = AddNorm(AddNorm(X^{l-1}, MHA(X, X, X)), FFN).
template <typename T>
Var<T> encoder_block(const Var<T>& x, const EncoderBlockParams<T>& params, const BlockCall& call,
                     const AttentionOptions& options);

// A secondary view's keys/values for a UMV block.
template <typename T>
struct SecondaryView {
  Var<T> features;  // (batch * objects) x d
  std::size_t objects = 0;
  const std::vector<std::uint8_t>* valid = nullptr;
};

// F~1 = F1 + sum_i MHA_i(F1, F_i, F_i); LayerNorm; then FFN with its own
// add-norm. Output keeps the primary view's rows.
template <typename T>
Var<T> umv_block(const Var<T>& primary, std::span<const SecondaryView<T>> others, const UmvBlockParams<T>& params,
                 const BlockCall& call, const AttentionOptions& options);

template <typename T>
class ImageEncoder {
 public:
  ImageEncoder(const ModelConfig& config, ParameterStore<T>& store, Rng& rng);

  EncodedImages<T> encode(Tape<T>& tape, const FeatureBatch<T>& batch, AttentionRecorder* recorder = nullptr) const;

  // X W + b for the projection feeding view `index` (SV/AMV have exactly one).
  Var<T> input_projection(Tape<T>& tape, const Var<T>& x, std::size_t index) const;

  // L stacked self-attention blocks.
  Var<T> sv_encode(const Var<T>& x0, const BlockCall& call, const AttentionOptions& options) const;

  const std::vector<EncoderBlockParams<T>>& blocks() const { return blocks_; }
  const std::vector<UmvBlockParams<T>>& umv_blocks() const { return umv_blocks_; }

 private:
  struct Projection {
    Parameter<T>* weight = nullptr;
    Parameter<T>* bias = nullptr;
  };

  void check_batch(const FeatureBatch<T>& batch) const;

  ModelConfig config_;
  std::vector<Projection> projections_;
  std::vector<EncoderBlockParams<T>> blocks_;
  std::vector<UmvBlockParams<T>> umv_blocks_;
};

}  // namespace mtcap
