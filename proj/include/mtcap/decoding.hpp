// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

// Caption generation: greedy, multinomial sampling and beam search over any
// next-token distribution source.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mtcap/model.hpp"

namespace mtcap {

enum class DecodeMode { kGreedy, kSample, kBeam };

std::string_view decode_mode_name(DecodeMode mode);
DecodeMode parse_decode_mode(std::string_view name);

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kGreedy;
  std::size_t max_len = 0;  // 0: the model's n
  std::size_t beam = 3;
  double alpha = 0.0;  // length-normalization exponent
  std::uint64_t seed = 0;

  void validate() const;
};

struct Hypothesis {
  std::vector<std::int32_t> tokens;  // generated ids, ending in </s> when finished
  std::vector<double> step_logprobs;
  double logprob = 0.0;
  bool finished = false;  // false: stopped by the length limit
};

// logprob / len^alpha; len counts every generated token including </s>.
double ranking_score(const Hypothesis& h, double alpha);

// true when a ranks strictly before b: higher score, then lexicographically
// smaller ids.
bool ranks_before(const Hypothesis& a, const Hypothesis& b, double alpha);

// Next-token log-probabilities for prefixes that start with <s>.
class StepModel {
 public:
  virtual ~StepModel() = default;
  virtual std::size_t num_images() const = 0;
  virtual std::size_t vocab_size() const = 0;
  virtual std::size_t max_len() const = 0;
  // Row r of the result belongs to image images[r] with prefix prefixes.row(r).
  virtual std::vector<std::vector<double>> log_probs(std::span<const std::size_t> images,
                                                     const TokenMatrix& prefixes) = 0;
};

// Row-wise log-softmax in double precision.
std::vector<double> log_softmax(std::span<const double> logits);

// Adapts a model and a batch of images. Images are encoded once; every step
// evaluates the decoder on a fresh inference tape.
template <typename T>
class ModelStepper final : public StepModel {
 public:
  ModelStepper(const CaptionModel<T>& model, const FeatureBatch<T>& features);

  std::size_t num_images() const override { return batch_; }
  std::size_t vocab_size() const override { return model_.config().vocab_size; }
  std::size_t max_len() const override { return model_.config().max_len; }
  std::vector<std::vector<double>> log_probs(std::span<const std::size_t> images,
                                             const TokenMatrix& prefixes) override;

 private:
  const CaptionModel<T>& model_;
  Tensor<T> encoded_;
  std::vector<std::uint8_t> valid_;
  std::size_t batch_ = 0;
  std::size_t objects_ = 0;
};

// Argmax each step, lowest id on ties; one hypothesis per image.
std::vector<Hypothesis> greedy_decode(StepModel& model, std::size_t max_len);

// Multinomial draws at temperature 1; images draw in index order each step.
std::vector<Hypothesis> sample_decode(StepModel& model, std::size_t max_len, Rng& rng);

struct BeamResult {
  Hypothesis best;
  std::vector<Hypothesis> beams;  // finished pool, truncated survivors and the greedy path, ranked
};

BeamResult beam_search(StepModel& model, std::size_t image, std::size_t max_len, std::size_t beam, double alpha);

// Dispatches on cfg.mode for every image; sampling seeds derive from cfg.seed.
std::vector<Hypothesis> decode_all(StepModel& model, const DecodeConfig& cfg);

}  // namespace mtcap
