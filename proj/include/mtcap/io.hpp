// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

// Binary file formats, all little-endian:
//   checkpoint  "MTCK" u32 version u32 count { u32 name_len, name, u32 rank, u32 dims[rank], f32 data }
//   features    "MTFV" u32 version=1 u32 M { u32 m, u32 d, f32 data[m*d] }
//   embeddings  "MTEMB" u32 d_v u32 e f32 data[d_v*e]

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mtcap/autodiff.hpp"
#include "mtcap/encoders.hpp"

namespace mtcap {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kFeatureVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

template <typename T>
std::vector<NamedTensor> parameter_tensors(const ParameterStore<T>& store);

// Every parameter must appear with its exact shape; entries not naming a
// parameter are ignored.
template <typename T>
void assign_parameters(const std::vector<NamedTensor>& tensors, ParameterStore<T>& store);

void write_features(const std::filesystem::path& path, const FeatureViews& views);
// The aligned flag is not stored in the file; callers take it from the manifest.
FeatureViews read_features(const std::filesystem::path& path);

void write_embeddings(const std::filesystem::path& path, const Tensor<float>& table);
Tensor<float> read_embeddings(const std::filesystem::path& path);

}  // namespace mtcap
