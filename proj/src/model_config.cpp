// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/model_config.hpp"

#include <numeric>

namespace mtcap {

std::string_view encoder_name(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::kSingleView:
      return "sv";
    case EncoderKind::kAlignedMultiView:
      return "amv";
    case EncoderKind::kUnalignedMultiView:
      return "umv";
  }
  return "sv";
}

std::string_view temporal_name(TemporalKind kind) {
  return kind == TemporalKind::kLstm ? "lstm" : "pe";
}

EncoderKind parse_encoder(std::string_view name) {
  if (name == "sv") return EncoderKind::kSingleView;
  if (name == "amv") return EncoderKind::kAlignedMultiView;
  if (name == "umv") return EncoderKind::kUnalignedMultiView;
  fail(ErrorCode::kConfig, "unknown encoder variant '" + std::string(name) + "' (expected sv, amv or umv)");
}

TemporalKind parse_temporal(std::string_view name) {
  if (name == "lstm") return TemporalKind::kLstm;
  if (name == "pe") return TemporalKind::kPositional;
  fail(ErrorCode::kConfig, "unknown temporal embedder '" + std::string(name) + "' (expected lstm or pe)");
}

AttentionOptions ModelConfig::attention_options() const {
  AttentionOptions o;
  o.scale_by_model_dim = scale_by_model_dim;
  o.attention_dropout = attention_dropout;
  o.residual_dropout = residual_dropout;
  o.layer_norm_eps = layer_norm_eps;
  return o;
}

void ModelConfig::validate() const {
  std::string problems;
  auto complain = [&](const std::string& msg) {
    problems += problems.empty() ? "" : "; ";
    problems += msg;
  };
  if (layers < 1) complain("layers must be >= 1");
  if (model_dim < 2) complain("model_dim must be >= 2");
  if (heads < 1 || (heads > 0 && model_dim % heads != 0)) {
    complain("heads (" + std::to_string(heads) + ") must divide model_dim (" + std::to_string(model_dim) + ")");
  }
  if (ffn_dim < model_dim) complain("ffn_dim must be >= model_dim");
  if (view_dims.empty()) complain("view_dims must list at least one view");
  for (std::size_t w : view_dims) {
    if (w == 0) complain("view widths must be positive");
  }
  if (primary_view >= view_dims.size()) complain("primary_view outside view_dims");
  if (embed_dim < 1) complain("embed_dim must be >= 1");
  if (vocab_size < 5) complain("vocab_size must be >= 5 (four reserved tokens plus content)");
  if (max_len < 1) complain("max_len must be >= 1");
  for (double r : {dropout, attention_dropout, residual_dropout}) {
    if (!(r >= 0.0 && r < 1.0)) complain("dropout rates must lie in [0, 1)");
  }
  if (!(layer_norm_eps > 0.0)) complain("layer_norm_eps must be positive");
  if (!problems.empty()) {
    fail(ErrorCode::kConfig, "invalid model config: " + problems);
  }
}

}  // namespace mtcap
