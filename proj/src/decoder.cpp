// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "mtcap/init.hpp"

namespace mtcap {

namespace {

std::vector<std::string> reserved_tokens() {
  return {std::string(kPadToken), std::string(kBosToken), std::string(kEosToken), std::string(kUnkToken)};
}

}  // namespace

Vocab::Vocab() : Vocab(reserved_tokens()) {}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const auto reserved = reserved_tokens();
  require(tokens_.size() >= kReserved, ErrorCode::kFormat, "vocabulary lacks the four reserved tokens");
  for (std::size_t i = 0; i < kReserved; ++i) {
    require(tokens_[i] == reserved[i], ErrorCode::kFormat,
            "vocabulary id " + std::to_string(i) + " must be " + reserved[i] + ", found '" + tokens_[i] + "'");
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    require(!tokens_[i].empty(), ErrorCode::kFormat, "empty vocabulary token at id " + std::to_string(i));
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<std::int32_t>(i));
    require(inserted, ErrorCode::kFormat, "duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

Vocab Vocab::build(std::span<const std::vector<std::string>> captions, std::size_t min_count) {
  require(!captions.empty(), ErrorCode::kInvalidArgument, "build_vocab: empty caption stream");
  std::map<std::string, std::size_t> counts;
  const auto reserved = reserved_tokens();
  for (const auto& caption : captions) {
    for (const auto& word : caption) {
      if (std::find(reserved.begin(), reserved.end(), word) == reserved.end()) {
        ++counts[word];
      }
    }
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [word, count] : counts) {
    if (count >= min_count) {
      kept.emplace_back(word, count);
    }
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = reserved;
  for (auto& [word, count] : kept) {
    tokens.push_back(word);
  }
  return Vocab(std::move(tokens));
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open vocabulary file " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    tokens.push_back(line);
  }
  while (!tokens.empty() && tokens.back().empty()) {
    tokens.pop_back();
  }
  try {
    return Vocab(std::move(tokens));
  } catch (const Error& e) {
    fail(ErrorCode::kFormat, path.string() + ": " + e.what());
  }
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::kIo, "cannot write vocabulary file " + path.string());
  for (const auto& t : tokens_) {
    out << t << '\n';
  }
  require(out.good(), ErrorCode::kIo, "write failed for " + path.string());
}

std::int32_t Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const { return index_.contains(std::string(token)); }

const std::string& Vocab::token(std::int32_t id) const {
  require(id >= 0 && static_cast<std::size_t>(id) < tokens_.size(), ErrorCode::kRange,
          "token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(tokens_.size()));
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<std::int32_t> Vocab::encode(std::span<const std::string> words) const {
  std::vector<std::int32_t> out;
  out.reserve(words.size());
  for (const auto& w : words) {
    out.push_back(id(w));
  }
  return out;
}

std::vector<std::string> Vocab::decode(std::span<const std::int32_t> ids) const {
  std::vector<std::string> out;
  for (std::int32_t id : ids) {
    if (id == kEos) {
      break;
    }
    if (id == kPad || id == kBos) {
      continue;
    }
    out.push_back(token(id));
  }
  return out;
}

CaptionBatch CaptionBatch::from_content(std::span<const std::vector<std::int32_t>> captions, std::size_t max_len) {
  require(max_len >= 1, ErrorCode::kInvalidArgument, "caption batch: max_len must be >= 1");
  CaptionBatch out;
  out.batch = captions.size();
  out.max_len = max_len;
  out.inputs = TokenMatrix(out.batch, max_len);
  out.targets = TokenMatrix(out.batch, max_len);
  out.lengths.resize(out.batch);
  for (std::size_t b = 0; b < out.batch; ++b) {
    const std::size_t k = std::min(captions[b].size(), max_len - 1);
    out.inputs(b, 0) = Vocab::kBos;
    for (std::size_t t = 0; t < k; ++t) {
      out.inputs(b, t + 1) = captions[b][t];
      out.targets(b, t) = captions[b][t];
    }
    out.targets(b, k) = Vocab::kEos;
    out.lengths[b] = k + 1;
  }
  return out;
}

std::vector<std::uint8_t> CaptionBatch::target_mask() const {
  std::vector<std::uint8_t> mask(batch * max_len, 0);
  for (std::size_t b = 0; b < batch; ++b) {
    std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(b * max_len), lengths[b], std::uint8_t{1});
  }
  return mask;
}

template <typename T>
Tensor<T> causal_mask(std::size_t n) {
  Tensor<T> m(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      m(i, j) = static_cast<T>(kMaskValue);
    }
  }
  return m;
}

template <typename T>
Tensor<T> positional_table(std::size_t n, std::size_t d) {
  Tensor<T> pe(n, d);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t c = 0; c < d; ++c) {
      const double expo = static_cast<double>(c - c % 2) / static_cast<double>(d);
      const double angle = static_cast<double>(pos) / std::pow(10000.0, expo);
      pe(pos, c) = static_cast<T>(c % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return pe;
}

template <typename T>
Var<T> decoder_block(const Var<T>& y, const Var<T>& x, const DecoderBlockParams<T>& params, const DecoderCall& call,
                     const AttentionOptions& options) {
  MhaCall self;
  self.batch = call.batch;
  self.queries = call.length;
  self.keys = call.length;
  self.causal = true;
  self.recorder = call.recorder;
  self.role = AttentionRole::kDecoderSelf;
  self.block = call.block;
  Var<T> h = add_norm(y, multi_head(y, y, params.self_attention, self, options), params.self_norm, options);

  MhaCall guided;
  guided.batch = call.batch;
  guided.queries = call.length;
  guided.keys = call.objects;
  guided.key_valid = call.object_valid;
  guided.recorder = call.recorder;
  guided.role = AttentionRole::kDecoderGuided;
  guided.block = call.block;
  h = add_norm(h, multi_head(h, x, params.guided_attention, guided, options), params.guided_norm, options);
  return add_norm(h, ffn(h, params.ffn), params.ffn_norm, options);
}

namespace {

// Column concatenation of per-gate xavier blocks: rows x (gates * cols).
template <typename T>
Tensor<T> gate_blocks(std::size_t rows, std::size_t cols, std::size_t gates, Rng& rng) {
  Tensor<T> w(rows, gates * cols);
  for (std::size_t g = 0; g < gates; ++g) {
    Tensor<T> block = xavier_uniform<T>(rows, cols, rng);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        w(r, g * cols + c) = block(r, c);
      }
    }
  }
  return w;
}

}  // namespace

template <typename T>
CaptionDecoder<T>::CaptionDecoder(const ModelConfig& config, ParameterStore<T>& store, Rng& rng) : config_(config) {
  const std::size_t d = config.model_dim;
  const std::size_t e = config.embed_dim;
  Tensor<T> table = normal_init<T>(config.vocab_size, e, 0.02, rng);
  std::fill(table.row(Vocab::kPad).begin(), table.row(Vocab::kPad).end(), T(0));
  embedding_ = &store.add("dec.embed", std::move(table));
  if (config.temporal == TemporalKind::kLstm) {
    lstm_.input_weight = &store.add("dec.lstm.wx", gate_blocks<T>(e, d, 4, rng));
    lstm_.hidden_weight = &store.add("dec.lstm.wh", gate_blocks<T>(d, d, 4, rng));
    Tensor<T> bias(1, 4 * d);
    for (std::size_t c = d; c < 2 * d; ++c) {
      bias(0, c) = T(1);  // forget gate
    }
    lstm_.bias = &store.add("dec.lstm.b", std::move(bias));
  } else {
    pe_weight_ = &store.add("dec.pe.w", xavier_uniform<T>(e, d, rng));
    if (config.use_bias) {
      pe_bias_ = &store.add("dec.pe.b", Tensor<T>(1, d));
    }
  }
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string prefix = "dec.block" + std::to_string(l + 1);
    DecoderBlockParams<T> p;
    p.self_attention = make_mha(store, prefix + ".self", d, config.heads, config.use_bias, rng);
    p.self_norm = make_layer_norm(store, prefix + ".self_norm", d);
    p.guided_attention = make_mha(store, prefix + ".guided", d, config.heads, config.use_bias, rng);
    p.guided_norm = make_layer_norm(store, prefix + ".guided_norm", d);
    p.ffn = make_ffn(store, prefix + ".ffn", d, config.ffn_dim, config.dropout, config.use_bias, rng);
    p.ffn_norm = make_layer_norm(store, prefix + ".ffn_norm", d);
    blocks_.push_back(std::move(p));
  }
  out_weight_ = &store.add("dec.out.w", xavier_uniform<T>(d, config.vocab_size, rng));
  if (config.use_bias) {
    out_bias_ = &store.add("dec.out.b", Tensor<T>(1, config.vocab_size));
  }
}

template <typename T>
Var<T> CaptionDecoder<T>::embed_tokens(Tape<T>& tape, const TokenMatrix& ids) const {
  const auto limit = static_cast<std::int32_t>(config_.vocab_size);
  for (std::int32_t id : ids.ids) {
    require(id >= 0 && id < limit, ErrorCode::kRange,
            "token id " + std::to_string(id) + " outside vocabulary of size " + std::to_string(limit));
  }
  return embedding_lookup(tape.parameter(*embedding_), std::span<const std::int32_t>(ids.ids), Vocab::kPad);
}

template <typename T>
Var<T> CaptionDecoder<T>::temporal_embed(Tape<T>& tape, const TokenMatrix& ids) const {
  const std::size_t b = ids.rows;
  const std::size_t n = ids.cols;
  const std::size_t d = config_.model_dim;
  if (config_.temporal == TemporalKind::kPositional) {
    Var<T> w = tape.parameter(*pe_weight_);
    Var<T> x = embed_tokens(tape, ids);
    Var<T> projected = pe_bias_ == nullptr ? matmul(x, w) : [&] {
      Var<T> bias = tape.parameter(*pe_bias_);
      return linear(x, w, &bias);
    }();
    const Tensor<T> table = positional_table<T>(n, d);
    Tensor<T> tiled(b * n, d);
    for (std::size_t r = 0; r < b; ++r) {
      for (std::size_t t = 0; t < n; ++t) {
        std::copy(table.row(t).begin(), table.row(t).end(), tiled.row(r * n + t).begin());
      }
    }
    return add(projected, tape.constant(std::move(tiled)));
  }
  // Time-major lookup so each step is a contiguous slice.
  TokenMatrix time_major(n, b);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t t = 0; t < n; ++t) {
      time_major(t, r) = ids(r, t);
    }
  }
  Var<T> x = embed_tokens(tape, time_major);
  LstmState<T> state{tape.constant(Tensor<T>(b, d)), tape.constant(Tensor<T>(b, d))};
  std::vector<Var<T>> hidden;
  hidden.reserve(n);
  for (std::size_t t = 0; t < n; ++t) {
    state = lstm_cell(slice_rows(x, t * b, b), state, lstm_);
    hidden.push_back(state.h);
  }
  Var<T> stacked = n == 1 ? hidden[0] : concat_rows(std::span<const Var<T>>(hidden));
  if (b == 1) {
    return stacked;
  }
  std::vector<std::size_t> order(b * n);
  for (std::size_t r = 0; r < b; ++r) {
    for (std::size_t t = 0; t < n; ++t) {
      order[r * n + t] = t * b + r;
    }
  }
  return gather_rows(stacked, std::span<const std::size_t>(order));
}

template <typename T>
Var<T> CaptionDecoder<T>::project_to_vocab(Tape<T>& tape, const Var<T>& y) const {
  Var<T> w = tape.parameter(*out_weight_);
  if (out_bias_ == nullptr) {
    return matmul(y, w);
  }
  Var<T> b = tape.parameter(*out_bias_);
  return linear(y, w, &b);
}

template <typename T>
Var<T> CaptionDecoder<T>::forward(Tape<T>& tape, const TokenMatrix& inputs, const EncodedImages<T>& images,
                                  AttentionRecorder* recorder) const {
  require(inputs.rows == images.batch, ErrorCode::kDimension,
          "decoder: " + std::to_string(inputs.rows) + " captions for " + std::to_string(images.batch) + " images");
  require(inputs.cols >= 1 && inputs.cols <= config_.max_len, ErrorCode::kRange,
          "decoder: caption length " + std::to_string(inputs.cols) + " outside [1, " +
              std::to_string(config_.max_len) + "]");
  const AttentionOptions options = config_.attention_options();
  Var<T> y = temporal_embed(tape, inputs);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    DecoderCall call{inputs.rows, inputs.cols, images.objects, &images.valid, recorder, static_cast<int>(l + 1)};
    y = decoder_block(y, images.features, blocks_[l], call, options);
  }
  return project_to_vocab(tape, y);
}

#define MTCAP_INSTANTIATE_DECODER(T)                                                                     \
  template Tensor<T> causal_mask<T>(std::size_t);                                                        \
  template Tensor<T> positional_table<T>(std::size_t, std::size_t);                                      \
  template Var<T> decoder_block(const Var<T>&, const Var<T>&, const DecoderBlockParams<T>&,              \
                                const DecoderCall&, const AttentionOptions&);                            \
  template class CaptionDecoder<T>;

MTCAP_INSTANTIATE_DECODER(float)
MTCAP_INSTANTIATE_DECODER(double)

#undef MTCAP_INSTANTIATE_DECODER

}  // namespace mtcap
