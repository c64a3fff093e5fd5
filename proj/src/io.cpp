// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

namespace mtcap {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace {

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    require(out_.good(), ErrorCode::kIo, "cannot write " + path.string());
  }
  void bytes(const void* data, std::size_t n) { out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void floats(std::span<const float> v) { bytes(v.data(), v.size() * sizeof(float)); }
  void finish() {
    out_.flush();
    require(out_.good(), ErrorCode::kIo, "write failed for " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    require(in_.good(), ErrorCode::kIo, "cannot open " + path.string());
  }
  void bytes(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    require(static_cast<std::size_t>(in_.gcount()) == n, ErrorCode::kFormat, path_.string() + ": truncated file");
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    bytes(&v, sizeof v);
    return v;
  }
  void magic(std::string_view expected) {
    std::string got(expected.size(), '\0');
    bytes(got.data(), got.size());
    require(got == expected, ErrorCode::kFormat,
            path_.string() + ": bad magic, expected " + std::string(expected));
  }
  Tensor<float> matrix(std::size_t rows, std::size_t cols) {
    require(rows * cols <= (std::size_t{1} << 32), ErrorCode::kFormat, path_.string() + ": implausible tensor size");
    Tensor<float> t(rows, cols);
    bytes(t.data(), t.size() * sizeof(float));
    return t;
  }
  void expect_end() {
    char c = 0;
    in_.read(&c, 1);
    require(in_.gcount() == 0, ErrorCode::kFormat, path_.string() + ": trailing bytes");
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  Writer w(path);
  w.bytes("MTCK", 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name.data(), t.name.size());
    w.u32(2);
    w.u32(static_cast<std::uint32_t>(t.value.rows()));
    w.u32(static_cast<std::uint32_t>(t.value.cols()));
    w.floats(t.value.values());
  }
  w.finish();
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  r.magic("MTCK");
  const std::uint32_t version = r.u32();
  require(version == kCheckpointVersion, ErrorCode::kFormat,
          path.string() + ": unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    require(len > 0 && len < 4096, ErrorCode::kFormat, path.string() + ": bad tensor name length");
    std::string name(len, '\0');
    r.bytes(name.data(), len);
    require(names.insert(name).second, ErrorCode::kFormat, path.string() + ": duplicate tensor " + name);
    const std::uint32_t rank = r.u32();
    require(rank >= 1 && rank <= 2, ErrorCode::kFormat,
            path.string() + ": tensor " + name + " has unsupported rank " + std::to_string(rank));
    const std::size_t d0 = r.u32();
    const std::size_t d1 = rank == 2 ? r.u32() : d0;
    out.push_back({name, rank == 2 ? r.matrix(d0, d1) : r.matrix(1, d0)});
  }
  r.expect_end();
  return out;
}

template <typename T>
std::vector<NamedTensor> parameter_tensors(const ParameterStore<T>& store) {
  std::vector<NamedTensor> out;
  for (const Parameter<T>* p : store.all()) {
    out.push_back({p->name, p->value.template cast<float>()});
  }
  return out;
}

template <typename T>
void assign_parameters(const std::vector<NamedTensor>& tensors, ParameterStore<T>& store) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& t : tensors) {
    by_name[t.name] = &t.value;
  }
  for (Parameter<T>* p : store.all()) {
    auto it = by_name.find(p->name);
    require(it != by_name.end(), ErrorCode::kFormat, "checkpoint lacks parameter " + p->name);
    require(it->second->shape() == p->value.shape(), ErrorCode::kDimension,
            "checkpoint parameter " + p->name + " is " + shape_string(*it->second) + ", model expects " +
                shape_string(p->value));
    p->value = it->second->template cast<T>();
  }
}

void write_features(const std::filesystem::path& path, const FeatureViews& views) {
  Writer w(path);
  w.bytes("MTFV", 4);
  w.u32(kFeatureVersion);
  w.u32(static_cast<std::uint32_t>(views.num_views()));
  for (const auto& v : views.views) {
    w.u32(static_cast<std::uint32_t>(v.rows()));
    w.u32(static_cast<std::uint32_t>(v.cols()));
    w.floats(v.values());
  }
  w.finish();
}

FeatureViews read_features(const std::filesystem::path& path) {
  Reader r(path);
  r.magic("MTFV");
  const std::uint32_t version = r.u32();
  require(version == kFeatureVersion, ErrorCode::kFormat,
          path.string() + ": unsupported feature file version " + std::to_string(version));
  const std::uint32_t m = r.u32();
  require(m >= 1 && m <= 64, ErrorCode::kFormat, path.string() + ": implausible view count " + std::to_string(m));
  FeatureViews out;
  for (std::uint32_t i = 0; i < m; ++i) {
    const std::size_t rows = r.u32();
    const std::size_t cols = r.u32();
    out.views.push_back(r.matrix(rows, cols));
  }
  r.expect_end();
  return out;
}

void write_embeddings(const std::filesystem::path& path, const Tensor<float>& table) {
  Writer w(path);
  w.bytes("MTEMB", 5);
  w.u32(static_cast<std::uint32_t>(table.rows()));
  w.u32(static_cast<std::uint32_t>(table.cols()));
  w.floats(table.values());
  w.finish();
}

Tensor<float> read_embeddings(const std::filesystem::path& path) {
  Reader r(path);
  r.magic("MTEMB");
  const std::size_t rows = r.u32();
  const std::size_t cols = r.u32();
  Tensor<float> t = r.matrix(rows, cols);
  r.expect_end();
  return t;
}

template std::vector<NamedTensor> parameter_tensors(const ParameterStore<float>&);
template std::vector<NamedTensor> parameter_tensors(const ParameterStore<double>&);
template void assign_parameters(const std::vector<NamedTensor>&, ParameterStore<float>&);
template void assign_parameters(const std::vector<NamedTensor>&, ParameterStore<double>&);

}  // namespace mtcap
