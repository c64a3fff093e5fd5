// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>

#include "mtcap/decoder.hpp"

namespace mtcap {

// Encoder, decoder and their parameters. Parameter creation order (and hence
// checkpoint order) is fixed by the config alone.
template <typename T>
class CaptionModel {
 public:
  CaptionModel(const ModelConfig& config, std::uint64_t seed);
  CaptionModel(const CaptionModel&) = delete;
  CaptionModel& operator=(const CaptionModel&) = delete;

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& parameters() { return store_; }
  const ParameterStore<T>& parameters() const { return store_; }
  const ImageEncoder<T>& encoder() const { return *encoder_; }
  const CaptionDecoder<T>& decoder() const { return *decoder_; }

  EncodedImages<T> encode(Tape<T>& tape, const FeatureBatch<T>& features,
                          AttentionRecorder* recorder = nullptr) const;

  // (batch * n) x d_v logits given encoded images.
  Var<T> logits(Tape<T>& tape, const EncodedImages<T>& images, const TokenMatrix& inputs,
                AttentionRecorder* recorder = nullptr) const;

  // Encoder forward once, then all n positions in parallel.
  Var<T> decode_train(Tape<T>& tape, const FeatureBatch<T>& features, const TokenMatrix& inputs,
                      AttentionRecorder* recorder = nullptr) const;

  // Next-token logits (rows x d_v) after each prefix of length t = prefixes.cols,
  // computed in eval mode without gradients. Only the t prefix positions are
  // evaluated; by causality this equals position t-1 of decode_train on the
  // zero-padded prefix.
  Tensor<T> decode_step(const EncodedImages<T>& images, const TokenMatrix& prefixes) const;

 private:
  ModelConfig config_;
  ParameterStore<T> store_;
  std::unique_ptr<ImageEncoder<T>> encoder_;
  std::unique_ptr<CaptionDecoder<T>> decoder_;
};

// Copies every parameter by name, converting precision. Shapes must agree.
template <typename Src, typename Dst>
void copy_parameters(const ParameterStore<Src>& from, ParameterStore<Dst>& to);

}  // namespace mtcap
