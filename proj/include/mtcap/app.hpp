// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration and the command layer shared by the C API and the CLI.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mtcap/data.hpp"
#include "mtcap/decoding.hpp"
#include "mtcap/training.hpp"

namespace mtcap {

struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = 1;  // model init, training and sampling; the dataset has its own
  std::filesystem::path data_dir = "data";
  std::filesystem::path out_dir = "run";
  std::filesystem::path vocab;  // empty: <data_dir>/vocab.txt
  std::size_t vocab_min_count = 5;
  std::size_t num_views = 0;  // 0: primary_view + 1 for sv, every dataset view otherwise
  bool strict_ablation = false;
  GenConfig data;
  ModelConfig model;  // view_dims and vocab_size are filled in by train
  TrainConfig train;
  DecodeConfig decode;

  std::filesystem::path vocab_path() const { return vocab.empty() ? data_dir / "vocab.txt" : vocab; }
};

// Block counts accepted with strict_ablation.
inline constexpr std::size_t kAblationLayers[] = {1, 2, 4, 6, 8};

RunConfig profile_config(std::string_view name);  // paper | desk

// Fields absent from `json_text` keep their values from `base`; a "profile"
// field restarts from that profile. Unknown fields are rejected.
RunConfig parse_run_config(const std::string& json_text, const RunConfig& base);
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base);
std::string run_config_json(const RunConfig& cfg);

// Sets a dotted field ("train.xe_epochs") from a JSON literal; bare words
// are taken as strings.
void apply_override(RunConfig& cfg, std::string_view key, std::string_view value);

// Throws kConfig listing every problem that can be detected without data.
void validate_run_config(const RunConfig& cfg);

// Dataset checks against the model: alignment for amv and the view count.
std::size_t resolve_views(const RunConfig& cfg, const Dataset& data);

struct GenDataResult {
  std::vector<SplitSummary> splits;
};
GenDataResult cmd_gen_data(const RunConfig& cfg);

struct VocabResult {
  std::size_t size = 0;
  std::size_t captions = 0;
  std::filesystem::path path;
};
VocabResult cmd_build_vocab(const RunConfig& cfg);

struct TrainCommandOptions {
  std::optional<std::filesystem::path> resume;
  std::function<void(const EpochLog&)> on_epoch;
};
TrainResult cmd_train(const RunConfig& cfg, const TrainCommandOptions& options);

// A trained model with its vocabulary, restored from a resolved config.
struct LoadedModel {
  RunConfig config;
  Vocab vocab;
  std::unique_ptr<CaptionModel<float>> model;
};
LoadedModel load_model(const RunConfig& cfg, const std::filesystem::path& checkpoint);

// Reads every <id>.fvs of a directory in id order and checks it against the
// model's views.
Dataset read_feature_dir(const std::filesystem::path& dir, const ModelConfig& model);

struct CaptionLine {
  std::string id;
  std::string caption;
  double score = 0.0;  // ranking score under the decode config
  std::vector<std::int32_t> tokens;
  DecodeMode mode = DecodeMode::kGreedy;
};
std::vector<CaptionLine> cmd_caption(const LoadedModel& model, const std::filesystem::path& features_dir,
                                     const DecodeConfig& decode, const std::filesystem::path& out_jsonl);
std::string captions_jsonl(const std::vector<CaptionLine>& lines);

// Score report JSON; writes it when `out` is non-empty.
std::string cmd_eval(const std::filesystem::path& candidates, const std::filesystem::path& references,
                     bool per_image, const std::filesystem::path& out);

struct InspectSelection {
  std::vector<int> blocks;  // 1-based; empty selects all
  std::vector<int> heads;   // 0-based; empty selects all
  std::vector<AttentionRole> roles;  // empty selects all
};

struct InspectResult {
  std::string id;
  std::string caption;
  std::vector<AttentionRecord> records;
};

// Greedy caption of one image, then one teacher-forced pass over it with
// attention recording.
InspectResult cmd_inspect_attn(const LoadedModel& model, const std::filesystem::path& features,
                               const InspectSelection& selection);
// First line {"id","caption"}, then one attention record per line.
std::string inspect_jsonl(const InspectResult& result);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace mtcap
