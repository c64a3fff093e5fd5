// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

// Synthetic scene -> multi-view object features -> caption corpus, plus the
// on-disk dataset layout and batch assembly.

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "mtcap/decoder.hpp"
#include "mtcap/metrics.hpp"

namespace mtcap {

inline constexpr std::array<std::string_view, 4> kShapes{"circle", "square", "triangle", "star"};
inline constexpr std::array<std::string_view, 4> kColors{"red", "green", "blue", "yellow"};
inline constexpr std::array<std::string_view, 2> kSizes{"small", "large"};

enum class Relation { kLeftOf, kAbove, kNextTo };
std::string_view relation_token(Relation r);  // left-of | above | next-to

struct SceneObject {
  std::size_t shape = 0;
  std::size_t color = 0;
  std::size_t size = 0;
  double x = 0.0;  // [0, 1], grows to the right
  double y = 0.0;  // [0, 1], grows upwards
};

struct Scene {
  std::uint64_t seed = 0;
  std::vector<SceneObject> objects;  // 2..6
  std::size_t subject = 0;
  std::size_t object = 1;
  Relation relation = Relation::kNextTo;
};

// Pairs closer than this are next-to; otherwise the dominant axis decides.
inline constexpr double kNextToDistance = 0.25;

// Relation implied by two positions: next-to when close, else left-of when
// |dx| >= |dy|, else above. Returns the (subject, object) order alongside.
Relation relation_between(const SceneObject& a, const SceneObject& b, bool* a_is_subject);

Scene gen_scene(std::uint64_t seed);

// Latent channels per object: 4 shape + 4 color + 2 size one-hots, x, y and a
// salience flag on the two described objects.
inline constexpr std::size_t kLatentDims = 13;
Tensor<float> latent_features(const Scene& scene);

struct ViewSpec {
  std::size_t width = 16;
  std::uint64_t projection_seed = 1;
  bool identity = false;  // zero-padded identity instead of a random projection
  double noise = 0.1;
  double object_dropout = 0.0;  // unaligned datasets only
  bool shuffle = false;         // unaligned datasets only

  void validate() const;
};

// Fixed kLatentDims x width projection of a view.
Tensor<float> view_projection(const ViewSpec& spec);

struct RenderStats {
  std::size_t primary_regenerated = 0;
};

// aligned: every view keeps all objects in scene order.
FeatureViews render_views(const Scene& scene, const std::vector<ViewSpec>& specs, bool aligned, std::uint64_t seed,
                          RenderStats* stats = nullptr);

// "a <size> <color> <shape> <relation> a <size> <color> <shape>" with size and
// color words independently dropped with probability `elision`.
Tokens gen_caption(const Scene& scene, double elision, std::uint64_t seed);

// Reference 0 is always the full caption.
std::vector<Tokens> gen_references(const Scene& scene, std::size_t count, double elision, std::uint64_t seed);

struct GenConfig {
  std::string preset = "default";
  std::uint64_t seed = 7;
  std::size_t train = 2000;
  std::size_t val = 200;
  std::size_t test = 200;
  std::size_t references = 3;
  double elision = 0.25;
  bool aligned = true;
  std::vector<ViewSpec> views;

  void validate() const;
  static GenConfig preset_config(std::string_view name);  // default | noisy | tiny
};

std::string gen_config_json(const GenConfig& cfg);
GenConfig parse_gen_config(const std::string& json_text, const GenConfig& base);

inline constexpr std::array<std::string_view, 3> kSplits{"train", "val", "test"};

struct SplitSummary {
  std::string split;
  std::size_t images = 0;
  std::size_t objects = 0;
  std::size_t captions = 0;
  std::size_t regenerated = 0;
};

// Writes <dir>/gen_config.json, <dir>/<split>/<id>.fvs, <dir>/<split>_refs.jsonl
// and <dir>/<split>_manifest.json for each split.
std::vector<SplitSummary> generate_dataset(const GenConfig& cfg, const std::filesystem::path& dir);

struct Dataset {
  std::string split;
  bool aligned = false;
  std::vector<std::size_t> view_dims;
  std::vector<std::string> ids;
  std::vector<FeatureViews> features;
  std::vector<std::vector<Tokens>> references;

  std::size_t size() const { return ids.size(); }
};

// Loads <dir>/<split>_manifest.json and everything it references.
Dataset load_split(const std::filesystem::path& dir, std::string_view split);

// Keeps the first `count` views of every image.
Dataset select_views(Dataset data, std::size_t count);

// Every reference of a dataset, for vocabulary construction.
std::vector<Tokens> all_references(const Dataset& data);

struct BatchPlan {
  std::vector<std::size_t> images;
  CaptionBatch captions;
};

// Seeded shuffle per epoch and one reference drawn per image per epoch.
std::vector<BatchPlan> make_batches(const Dataset& data, const Vocab& vocab, std::size_t batch_size,
                                    std::size_t max_len, std::uint64_t seed, std::size_t epoch);

template <typename T>
FeatureBatch<T> gather_features(const Dataset& data, std::span<const std::size_t> images);

}  // namespace mtcap
