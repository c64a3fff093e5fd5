// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

// Two-stage optimization: teacher-forced cross-entropy, then self-critical
// policy-gradient training with a greedy baseline.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mtcap/data.hpp"
#include "mtcap/decoding.hpp"
#include "mtcap/io.hpp"
#include "mtcap/metrics.hpp"
#include "mtcap/model.hpp"

namespace mtcap {

enum class Stage { kXe, kScst };
std::string_view stage_name(Stage s);  // xe | scst

enum class RewardMetric { kCiderD, kCider, kBleu4 };
std::string_view reward_name(RewardMetric m);
RewardMetric parse_reward(std::string_view name);

struct TrainConfig {
  std::size_t batch_size = 10;
  std::size_t xe_epochs = 15;
  std::size_t scst_epochs = 10;
  // lr(t) = min(t * lr_slope, lr_cap), halved every decay_every epochs after decay_after.
  double lr_slope = 1e-4;
  double lr_cap = 3e-4;
  std::size_t decay_after = 6;
  std::size_t decay_every = 3;
  double decay_factor = 0.5;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-9;
  double clip_norm = 5.0;  // 0 disables
  std::uint64_t seed = 1;
  RewardMetric reward = RewardMetric::kCiderD;
  bool freeze_embeddings_xe = false;
  bool freeze_embeddings_scst = false;
  bool log_wallclock = false;  // off keeps the metric log byte-reproducible

  void validate() const;
};

double lr_at_epoch(std::size_t epoch, const TrainConfig& cfg);

// Mean negative log-likelihood of the targets over positions with mask 1.
template <typename T>
Var<T> xe_loss(const Var<T>& logits, const TokenMatrix& targets, std::span<const std::uint8_t> mask);

// -(1/K) sum_k advantage_k * sum_t log p(tokens[k, t]) over positions with
// mask 1. Rows of `logits` follow the row-major order of `tokens`.
template <typename T>
Var<T> policy_gradient_loss(const Var<T>& logits, const TokenMatrix& tokens, std::span<const std::uint8_t> mask,
                            std::span<const double> advantages);

template <typename T>
class Adam {
 public:
  Adam(double beta1, double beta2, double eps, double clip_norm);
  explicit Adam(const TrainConfig& cfg) : Adam(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip_norm) {}

  // Clips the global gradient norm over trainable parameters, then applies a
  // bias-corrected update. Returns the pre-clip norm. NaN or infinite
  // gradients abort naming the parameter.
  double step(ParameterStore<T>& params, double lr);

  std::uint64_t steps() const { return step_; }
  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& tensors, const ParameterStore<T>& params);

 private:
  double beta1_, beta2_, eps_, clip_;
  std::uint64_t step_ = 0;
  std::map<std::string, std::pair<Tensor<T>, Tensor<T>>> moments_;
};

// Reward of each candidate against its references.
class RewardFunction {
 public:
  RewardFunction(RewardMetric metric, const std::vector<std::vector<Tokens>>& document_references);
  double operator()(const Tokens& candidate, const std::vector<Tokens>& references) const;

 private:
  RewardMetric metric_;
  std::optional<CiderScorer> cider_;
};

struct ScstStats {
  double loss = 0.0;
  double mean_sample_reward = 0.0;
  double mean_greedy_reward = 0.0;
};

// One self-critical update on a batch: sample and greedy rollouts run in eval
// mode without gradients; the sampled sequences are then re-scored with
// gradients (eval mode, so the scored distribution is the sampled one).
ScstStats scst_step(CaptionModel<float>& model, Adam<float>& adam, const FeatureBatch<float>& features,
                    std::span<const std::vector<Tokens>* const> references, const Vocab& vocab,
                    const RewardFunction& reward, double lr, Rng& rng);

struct EpochLog {
  std::size_t epoch = 0;
  Stage stage = Stage::kXe;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_bleu1 = 0.0;
  double val_bleu4 = 0.0;
  double val_rouge_l = 0.0;
  double val_cider = 0.0;
  double wallclock_s = 0.0;
};

std::string metric_csv_header();
std::string metric_csv_row(const EpochLog& log);

// Hypotheses for every image of a split, in dataset order, decoded in chunks.
std::vector<Hypothesis> decode_split(const CaptionModel<float>& model, const Dataset& data, const DecodeConfig& decode,
                                     std::size_t chunk = 256);

// Caption words of decode_split.
std::vector<Tokens> caption_split(const CaptionModel<float>& model, const Dataset& data, const Vocab& vocab,
                                  const DecodeConfig& decode, std::size_t chunk = 256);

ScoreReport evaluate_split(const CaptionModel<float>& model, const Dataset& data, const Vocab& vocab,
                           const DecodeConfig& decode);

struct TrainOptions {
  std::filesystem::path out_dir;  // checkpoints and metrics.csv; empty keeps everything in memory
  std::optional<std::filesystem::path> resume;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochLog> log;
  std::filesystem::path last_checkpoint;
};

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t epoch);

void save_training_checkpoint(const std::filesystem::path& path, const CaptionModel<float>& model,
                              const Adam<float>& adam, std::size_t epoch);

// Restores parameters and, when present, optimizer state. Returns the epoch
// stored in the checkpoint (0 for a parameter-only file).
std::size_t load_training_checkpoint(const std::filesystem::path& path, CaptionModel<float>& model,
                                     Adam<float>* adam);

TrainResult train(CaptionModel<float>& model, const Dataset& train_data, const Dataset& val_data, const Vocab& vocab,
                  const TrainConfig& cfg, const TrainOptions& options);

}  // namespace mtcap
