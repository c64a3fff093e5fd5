// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

// Caption side of the model: vocabulary, padded caption batches, the temporal
// word embedder (LSTM or positional encoding), masked/guided decoder blocks
// and the vocabulary projection.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtcap/encoders.hpp"

namespace mtcap {

class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;
  static constexpr std::int32_t kEos = 2;
  static constexpr std::int32_t kUnk = 3;
  static constexpr std::size_t kReserved = 4;

  // Reserved tokens only.
  Vocab();
  // First four entries must be the reserved tokens in id order.
  explicit Vocab(std::vector<std::string> tokens);

  // Tokens with count >= min_count, ordered by (count desc, token asc).
  static Vocab build(std::span<const std::vector<std::string>> captions, std::size_t min_count = 5);

  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  std::int32_t id(std::string_view token) const;  // kUnk when absent
  bool contains(std::string_view token) const;
  const std::string& token(std::int32_t id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<std::int32_t> encode(std::span<const std::string> words) const;
  // Stops at </s>; skips <pad> and <s>.
  std::vector<std::string> decode(std::span<const std::int32_t> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kBosToken = "<s>";
inline constexpr std::string_view kEosToken = "</s>";
inline constexpr std::string_view kUnkToken = "<unk>";

// Row-major id matrix.
struct TokenMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> ids;

  TokenMatrix() = default;
  TokenMatrix(std::size_t r, std::size_t c, std::int32_t fill = Vocab::kPad) : rows(r), cols(c), ids(r * c, fill) {}
  std::int32_t& operator()(std::size_t r, std::size_t c) { return ids[r * cols + c]; }
  std::int32_t operator()(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
  std::span<const std::int32_t> row(std::size_t r) const { return {ids.data() + r * cols, cols}; }
};

// Teacher-forcing view of a batch of captions truncated to max_len - 1
// content tokens. inputs = <s> w_1 .. w_k <pad>..., targets = w_1 .. w_k </s>
// <pad>..., length = k + 1.
struct CaptionBatch {
  std::size_t batch = 0;
  std::size_t max_len = 0;
  TokenMatrix inputs;
  TokenMatrix targets;
  std::vector<std::size_t> lengths;

  static CaptionBatch from_content(std::span<const std::vector<std::int32_t>> captions, std::size_t max_len);
  // 1 where targets hold a real token (including </s>).
  std::vector<std::uint8_t> target_mask() const;
};

// n x n additive mask: 0 where j <= i, kMaskValue above the diagonal.
template <typename T>
Tensor<T> causal_mask(std::size_t n);

// Sinusoid table: even columns sin(pos / 10000^(2i/d)), odd columns cos.
template <typename T>
Tensor<T> positional_table(std::size_t n, std::size_t d);

template <typename T>
struct DecoderBlockParams {
  MhaParams<T> self_attention;
  LayerNormParams<T> self_norm;
  MhaParams<T> guided_attention;
  LayerNormParams<T> guided_norm;
  FfnParams<T> ffn;
  LayerNormParams<T> ffn_norm;
};

struct DecoderCall {
  std::size_t batch = 1;
  std::size_t length = 0;   // n
  std::size_t objects = 0;  // m
  const std::vector<std::uint8_t>* object_valid = nullptr;
  AttentionRecorder* recorder = nullptr;
  int block = 0;
};

// AddNorm(Y, MHA(Y, Y, Y, causal)) -> AddNorm(., MHA(., X, X, objects)) -> AddNorm(., FFN).
template <typename T>
Var<T> decoder_block(const Var<T>& y, const Var<T>& x, const DecoderBlockParams<T>& params, const DecoderCall& call,
                     const AttentionOptions& options);

template <typename T>
class CaptionDecoder {
 public:
  CaptionDecoder(const ModelConfig& config, ParameterStore<T>& store, Rng& rng);

  // (rows * cols) x e in row-major order of `ids`; <pad> reads as zeros.
  Var<T> embed_tokens(Tape<T>& tape, const TokenMatrix& ids) const;

  // (batch * n) x d word features from the token matrix.
  Var<T> temporal_embed(Tape<T>& tape, const TokenMatrix& ids) const;

  // (batch * n) x d_v logits for every position in one pass.
  Var<T> forward(Tape<T>& tape, const TokenMatrix& inputs, const EncodedImages<T>& images,
                 AttentionRecorder* recorder = nullptr) const;

  // Y^L W + b.
  Var<T> project_to_vocab(Tape<T>& tape, const Var<T>& y) const;

  Parameter<T>& embedding() const { return *embedding_; }
  const std::vector<DecoderBlockParams<T>>& blocks() const { return blocks_; }

 private:
  ModelConfig config_;
  Parameter<T>* embedding_ = nullptr;
  LstmParams<T> lstm_;
  Parameter<T>* pe_weight_ = nullptr;
  Parameter<T>* pe_bias_ = nullptr;
  std::vector<DecoderBlockParams<T>> blocks_;
  Parameter<T>* out_weight_ = nullptr;
  Parameter<T>* out_bias_ = nullptr;
};

}  // namespace mtcap
