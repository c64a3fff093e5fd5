// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/model.hpp"

namespace mtcap {

template <typename T>
CaptionModel<T>::CaptionModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(derive_seed(seed, 0x1417));
  encoder_ = std::make_unique<ImageEncoder<T>>(config_, store_, rng);
  decoder_ = std::make_unique<CaptionDecoder<T>>(config_, store_, rng);
}

template <typename T>
EncodedImages<T> CaptionModel<T>::encode(Tape<T>& tape, const FeatureBatch<T>& features,
                                         AttentionRecorder* recorder) const {
  return encoder_->encode(tape, features, recorder);
}

template <typename T>
Var<T> CaptionModel<T>::logits(Tape<T>& tape, const EncodedImages<T>& images, const TokenMatrix& inputs,
                               AttentionRecorder* recorder) const {
  return decoder_->forward(tape, inputs, images, recorder);
}

template <typename T>
Var<T> CaptionModel<T>::decode_train(Tape<T>& tape, const FeatureBatch<T>& features, const TokenMatrix& inputs,
                                     AttentionRecorder* recorder) const {
  EncodedImages<T> images = encode(tape, features, recorder);
  return logits(tape, images, inputs, recorder);
}

template <typename T>
Tensor<T> CaptionModel<T>::decode_step(const EncodedImages<T>& images, const TokenMatrix& prefixes) const {
  require(prefixes.cols >= 1 && prefixes.cols <= config_.max_len, ErrorCode::kRange,
          "decode_step: prefix length " + std::to_string(prefixes.cols) + " outside [1, " +
              std::to_string(config_.max_len) + "]");
  require(prefixes.rows == images.batch, ErrorCode::kDimension, "decode_step: prefix rows differ from image batch");
  Tape<T>& tape = images.features.tape();
  require(!tape.grad_enabled() && !tape.training(), ErrorCode::kInternal,
          "decode_step needs an inference tape (no grad, eval mode)");
  Var<T> all = logits(tape, images, prefixes);
  const std::size_t t = prefixes.cols;
  Tensor<T> out(prefixes.rows, all.cols());
  for (std::size_t r = 0; r < prefixes.rows; ++r) {
    const auto src = all.value().row(r * t + t - 1);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

template <typename Src, typename Dst>
void copy_parameters(const ParameterStore<Src>& from, ParameterStore<Dst>& to) {
  require(from.size() == to.size(), ErrorCode::kDimension, "copy_parameters: parameter counts differ");
  for (Parameter<Src>* p : from.all()) {
    Parameter<Dst>* q = to.find(p->name);
    require(q != nullptr, ErrorCode::kDimension, "copy_parameters: missing parameter " + p->name);
    require(q->value.shape() == p->value.shape(), ErrorCode::kDimension,
            "copy_parameters: shape mismatch for " + p->name);
    q->value = p->value.template cast<Dst>();
  }
}

template class CaptionModel<float>;
template class CaptionModel<double>;
template void copy_parameters(const ParameterStore<float>&, ParameterStore<double>&);
template void copy_parameters(const ParameterStore<double>&, ParameterStore<float>&);
template void copy_parameters(const ParameterStore<float>&, ParameterStore<float>&);
template void copy_parameters(const ParameterStore<double>&, ParameterStore<double>&);

}  // namespace mtcap
