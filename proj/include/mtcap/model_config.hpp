// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "mtcap/attention.hpp"

namespace mtcap {

enum class EncoderKind { kSingleView, kAlignedMultiView, kUnalignedMultiView };
enum class TemporalKind { kLstm, kPositional };

std::string_view encoder_name(EncoderKind kind);   // sv | amv | umv
std::string_view temporal_name(TemporalKind kind);  // lstm | pe
EncoderKind parse_encoder(std::string_view name);
TemporalKind parse_temporal(std::string_view name);

struct ModelConfig {
  EncoderKind encoder = EncoderKind::kSingleView;
  TemporalKind temporal = TemporalKind::kLstm;
  std::size_t layers = 6;        // L, shared by encoder and decoder
  std::size_t model_dim = 512;   // d (also d_y)
  std::size_t heads = 8;         // h
  std::size_t ffn_dim = 2048;    // 4d
  // Widths d_i of the views the model consumes, in dataset view order.
  // SV reads only view `primary_view`; AMV concatenates all of them; UMV
  // projects each separately and uses `primary_view` as the query view.
  std::vector<std::size_t> view_dims{2048};
  std::size_t primary_view = 0;
  std::size_t embed_dim = 300;   // e
  std::size_t vocab_size = 0;    // d_v
  std::size_t max_len = 16;      // n
  double dropout = 0.1;          // FFN dropout site
  double attention_dropout = 0.0;
  double residual_dropout = 0.0;
  bool use_bias = true;
  bool scale_by_model_dim = false;
  double layer_norm_eps = 1e-5;

  std::size_t head_dim() const { return heads == 0 ? 0 : model_dim / heads; }
  AttentionOptions attention_options() const;
  // Throws kConfig naming every offending field.
  void validate() const;
};

}  // namespace mtcap
