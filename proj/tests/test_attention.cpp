// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "mtcap/attention.hpp"
#include "test_support.hpp"

namespace mtcap {
namespace {

using testing::random_tensor;

Tensor<double> identity(std::size_t n) {
  Tensor<double> t(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

// softmax(q K^T / sqrt(d)) V for one query row, computed with plain loops.
std::vector<double> sdpa_row(std::span<const double> q, const Tensor<double>& k, const Tensor<double>& v,
                             const double* mask_row = nullptr) {
  const double d = static_cast<double>(q.size());
  std::vector<double> s(k.rows());
  double mx = -1e300;
  for (std::size_t j = 0; j < k.rows(); ++j) {
    double acc = 0.0;
    for (std::size_t c = 0; c < q.size(); ++c) acc += q[c] * k(j, c);
    s[j] = acc / std::sqrt(d) + (mask_row != nullptr ? mask_row[j] : 0.0);
    mx = std::max(mx, s[j]);
  }
  double z = 0.0;
  for (double& x : s) z += (x = std::exp(x - mx));
  std::vector<double> out(v.cols(), 0.0);
  for (std::size_t j = 0; j < k.rows(); ++j)
    for (std::size_t c = 0; c < v.cols(); ++c) out[c] += s[j] / z * v(j, c);
  return out;
}

TEST(Sdpa, TwoKeyExample) {
  Tape<double> tape;
  auto q = tape.constant(Tensor<double>::from_rows({{1, 0}}));
  auto k = tape.constant(Tensor<double>::from_rows({{1, 0}, {0, 1}}));
  auto v = tape.constant(Tensor<double>::from_rows({{10, 0}, {0, 10}}));
  const auto r = sdpa(q, k, v);
  const auto oracle = sdpa_row(q.value().row(0), k.value(), v.value());
  EXPECT_NEAR(r.output.value()(0, 0), oracle[0], 1e-12);
  EXPECT_NEAR(r.output.value()(0, 0), 6.6976, 1e-3);
  EXPECT_NEAR(r.output.value()(0, 1), 3.3024, 1e-3);
}

TEST(Sdpa, ZeroQueryGivesColumnMean) {
  Rng rng(1);
  Tape<double> tape;
  const auto v = random_tensor(5, 3, rng);
  const auto r = sdpa(tape.constant(Tensor<double>(2, 3)), tape.constant(random_tensor(5, 3, rng)), tape.constant(v));
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 5; ++j) mean += v(j, c) / 5.0;
    EXPECT_NEAR(r.output.value()(0, c), mean, 1e-12);
    EXPECT_NEAR(r.output.value()(1, c), mean, 1e-12);
  }
}

TEST(Sdpa, CausalRowZeroCopiesFirstValue) {
  Rng rng(2);
  Tape<double> tape;
  const auto x = random_tensor(4, 4, rng);
  const auto v = random_tensor(4, 4, rng);
  Tensor<double> mask(4, 4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = i + 1; j < 4; ++j) mask(i, j) = kMaskValue;
  const auto r = sdpa(tape.constant(x), tape.constant(x), tape.constant(v), &mask);
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(r.output.value()(0, c), v(0, c));
  }
  EXPECT_EQ(r.weights(0, 0), 1.0);
}

TEST(Sdpa, DimensionMismatch) {
  Tape<double> tape;
  EXPECT_THROW(sdpa(tape.constant(Tensor<double>(2, 3)), tape.constant(Tensor<double>(4, 2)),
                    tape.constant(Tensor<double>(4, 3))),
               Error);
}

TEST(Sdpa, PermutationProperties) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto q = random_tensor(3, 4, rng, -2, 2);
    const auto k = random_tensor(5, 4, rng, -2, 2);
    const auto v = random_tensor(5, 4, rng, -2, 2);
    std::vector<std::size_t> perm{0, 1, 2, 3, 4};
    rng.shuffle(std::span<std::size_t>(perm));
    Tensor<double> kp(5, 4), vp(5, 4);
    for (std::size_t i = 0; i < 5; ++i) {
      std::copy(k.row(perm[i]).begin(), k.row(perm[i]).end(), kp.row(i).begin());
      std::copy(v.row(perm[i]).begin(), v.row(perm[i]).end(), vp.row(i).begin());
    }
    Tape<double> tape;
    const auto base = sdpa(tape.constant(q), tape.constant(k), tape.constant(v)).output.value();
    const auto permuted = sdpa(tape.constant(q), tape.constant(kp), tape.constant(vp)).output.value();
    EXPECT_EQ(base, permuted);
    Tensor<double> qp(3, 4);
    const std::size_t qperm[3] = {2, 0, 1};
    for (std::size_t i = 0; i < 3; ++i) std::copy(q.row(qperm[i]).begin(), q.row(qperm[i]).end(), qp.row(i).begin());
    const auto qout = sdpa(tape.constant(qp), tape.constant(k), tape.constant(v)).output.value();
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(qout(i, c), base(qperm[i], c));
    }
  }
}

TEST(MultiHead, SingleIdentityHeadIsSdpa) {
  Rng rng(4);
  ParameterStore<double> store;
  auto p = make_mha(store, "m", 4, 1, false, rng);
  p.query->value = identity(4);
  p.key->value = identity(4);
  p.value->value = identity(4);
  p.output->value = identity(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = random_tensor(3, 4, rng);
    const auto kv = random_tensor(5, 4, rng);
    Tape<double> tape;
    MhaCall call;
    call.queries = 3;
    call.keys = 5;
    const auto mh = multi_head(tape.constant(q), tape.constant(kv), p, call, AttentionOptions{}).value();
    const auto sd = sdpa(tape.constant(q), tape.constant(kv), tape.constant(kv)).output.value();
    EXPECT_EQ(mh, sd);
  }
}

TEST(MultiHead, TwoHeadsMatchPerHeadOracle) {
  Rng rng(5);
  ParameterStore<double> store;
  const auto p = make_mha(store, "m", 4, 2, true, rng);
  for (auto* b : {p.query_bias, p.key_bias, p.value_bias, p.output_bias}) b->value = random_tensor(1, 4, rng);
  const auto q = random_tensor(3, 4, rng);
  const auto kv = random_tensor(2, 4, rng);
  Tape<double> tape;
  MhaCall call;
  call.queries = 3;
  call.keys = 2;
  const auto out = multi_head(tape.constant(q), tape.constant(kv), p, call, AttentionOptions{}).value();
  auto project = [](const Tensor<double>& x, const Parameter<double>* w, const Parameter<double>* b, std::size_t c0,
                    std::size_t width) {
    Tensor<double> y(x.rows(), width);
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t j = 0; j < width; ++j) {
        double acc = b->value(0, c0 + j);
        for (std::size_t k = 0; k < x.cols(); ++k) acc += x(i, k) * w->value(k, c0 + j);
        y(i, j) = acc;
      }
    return y;
  };
  Tensor<double> concat(3, 4);
  for (std::size_t h = 0; h < 2; ++h) {
    const auto qh = project(q, p.query, p.query_bias, 2 * h, 2);
    const auto kh = project(kv, p.key, p.key_bias, 2 * h, 2);
    const auto vh = project(kv, p.value, p.value_bias, 2 * h, 2);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto row = sdpa_row(qh.row(i), kh, vh);
      concat(i, 2 * h) = row[0];
      concat(i, 2 * h + 1) = row[1];
    }
  }
  const auto oracle = project(concat, p.output, p.output_bias, 0, 4);
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_NEAR(out[i], oracle[i], 1e-12);
}

TEST(MultiHead, ZeroValueProjectionGivesOutputBias) {
  Rng rng(6);
  ParameterStore<double> store;
  auto p = make_mha(store, "m", 4, 2, true, rng);
  p.value->value.fill(0.0);
  p.value_bias->value.fill(0.0);
  p.output_bias->value = Tensor<double>::from_rows({{0.5, -1, 2, 0.25}});
  Tape<double> tape;
  MhaCall call;
  call.queries = 3;
  call.keys = 4;
  const auto out = multi_head(tape.constant(random_tensor(3, 4, rng)), tape.constant(random_tensor(4, 4, rng)), p,
                              call, AttentionOptions{})
                       .value();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(out(i, c), p.output_bias->value(0, c));
}

TEST(MultiHead, RecordingNeverPerturbsAndRowsSumToOne) {
  Rng rng(7);
  ParameterStore<double> store;
  const auto p = make_mha(store, "m", 8, 4, true, rng);
  const auto x = random_tensor(2 * 5, 8, rng);
  std::vector<std::uint8_t> valid(10, 1);
  valid[4] = 0;
  valid[8] = 0;
  MhaCall call;
  call.batch = 2;
  call.queries = 5;
  call.keys = 5;
  call.key_valid = &valid;
  Tape<double> tape;
  const auto plain = multi_head(tape.constant(x), tape.constant(x), p, call, AttentionOptions{}).value();
  for (std::size_t example = 0; example < 2; ++example) {
    AttentionRecorder rec;
    rec.example = example;
    call.recorder = &rec;
    const auto recorded = multi_head(tape.constant(x), tape.constant(x), p, call, AttentionOptions{}).value();
    EXPECT_EQ(plain, recorded);
    ASSERT_EQ(rec.records.size(), 4u);
    for (const auto& r : rec.records) {
      for (std::size_t i = 0; i < r.weights.rows(); ++i) {
        double total = 0.0;
        for (double w : r.weights.row(i)) total += w;
        EXPECT_NEAR(total, 1.0, 1e-5);
        EXPECT_EQ(r.weights(i, example == 0 ? 4 : 3), 0.0);
      }
    }
  }
}

TEST(Ffn, IdentityAndReluClip) {
  Rng rng(8);
  ParameterStore<double> store;
  auto p = make_ffn(store, "f", 3, 3, 0.1, true, rng);
  p.inner->value = identity(3);
  p.outer->value = identity(3);
  p.inner_bias->value.fill(0.0);
  p.outer_bias->value.fill(0.0);
  Tape<double> tape;
  const auto pos = random_tensor(4, 3, rng, 0, 1);
  EXPECT_EQ(ffn(tape.constant(pos), p).value(), pos);
  const auto mixed = Tensor<double>::from_rows({{-1, 2, -3}});
  EXPECT_EQ(ffn(tape.constant(mixed), p).value(), Tensor<double>::from_rows({{0, 2, 0}}));
}

TEST(Ffn, RandomParamsMatchScalarOracle) {
  Rng rng(9);
  ParameterStore<double> store;
  auto p = make_ffn(store, "f", 3, 5, 0.1, true, rng);
  p.inner_bias->value = random_tensor(1, 5, rng);
  p.outer_bias->value = random_tensor(1, 3, rng);
  const auto x = random_tensor(2, 3, rng);
  Tape<double> tape;
  const auto y = ffn(tape.constant(x), p).value();
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> hidden(5);
    for (std::size_t j = 0; j < 5; ++j) {
      double acc = p.inner_bias->value(0, j);
      for (std::size_t k = 0; k < 3; ++k) acc += x(i, k) * p.inner->value(k, j);
      hidden[j] = std::max(0.0, acc);
    }
    for (std::size_t c = 0; c < 3; ++c) {
      double acc = p.outer_bias->value(0, c);
      for (std::size_t j = 0; j < 5; ++j) acc += hidden[j] * p.outer->value(j, c);
      EXPECT_NEAR(y(i, c), acc, 1e-6);
    }
  }
}

TEST(AddNorm, ReducesToLayerNorm) {
  Rng rng(10);
  ParameterStore<double> store;
  auto ln = make_layer_norm(store, "ln", 4);
  ln.gain->value = random_tensor(1, 4, rng);
  ln.bias->value = random_tensor(1, 4, rng);
  const auto x = random_tensor(3, 4, rng);
  const auto s = random_tensor(3, 4, rng);
  Tape<double> tape;
  auto g = tape.parameter(*ln.gain);
  auto b = tape.parameter(*ln.bias);
  AttentionOptions opts;
  EXPECT_EQ(add_norm(tape.constant(x), tape.constant(Tensor<double>(3, 4)), ln, opts).value(),
            layer_norm(tape.constant(x), g, b, opts.layer_norm_eps).value());
  EXPECT_EQ(add_norm(tape.constant(Tensor<double>(3, 4)), tape.constant(s), ln, opts).value(),
            layer_norm(tape.constant(s), g, b, opts.layer_norm_eps).value());
  // Composed oracle.
  const auto y = add_norm(tape.constant(x), tape.constant(s), ln, opts).value();
  for (std::size_t i = 0; i < 3; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 4; ++c) mean += (x(i, c) + s(i, c)) / 4.0;
    for (std::size_t c = 0; c < 4; ++c) var += std::pow(x(i, c) + s(i, c) - mean, 2) / 4.0;
    for (std::size_t c = 0; c < 4; ++c) {
      const double expect =
          (x(i, c) + s(i, c) - mean) / std::sqrt(var + opts.layer_norm_eps) * ln.gain->value(0, c) + ln.bias->value(0, c);
      EXPECT_NEAR(y(i, c), expect, 1e-12);
    }
  }
}

TEST(Block, FullBlockGradcheck) {
  Rng rng(11);
  ParameterStore<double> store;
  const auto mha = make_mha(store, "m", 4, 2, true, rng);
  const auto ln1 = make_layer_norm(store, "ln1", 4);
  const auto f = make_ffn(store, "f", 4, 8, 0.0, true, rng);
  const auto ln2 = make_layer_norm(store, "ln2", 4);
  for (auto* b : {mha.query_bias, mha.key_bias, mha.value_bias, mha.output_bias, f.outer_bias, ln1.bias})
    b->value = random_tensor(1, 4, rng, -0.2, 0.2);
  f.inner_bias->value = random_tensor(1, 8, rng, -0.2, 0.2);
  const auto x = random_tensor(2 * 3, 4, rng);
  const auto w = random_tensor(6, 4, rng);
  std::vector<std::uint8_t> valid{1, 1, 0, 1, 1, 1};
  auto loss = [&](Tape<double>& tape) {
    MhaCall call;
    call.batch = 2;
    call.queries = 3;
    call.keys = 3;
    call.causal = true;
    call.key_valid = &valid;
    AttentionOptions opts;
    auto xin = tape.constant(x);
    auto a = add_norm(xin, multi_head(xin, xin, mha, call, opts), ln1, opts);
    auto out = add_norm(a, ffn(a, f), ln2, opts);
    return weighted_sum(out, w);
  };
  EXPECT_LT(testing::gradcheck_parameters(store, loss), 1e-3);
}

TEST(Records, JsonShape) {
  AttentionRecord r;
  r.role = AttentionRole::kDecoderGuided;
  r.block = 2;
  r.head = 1;
  r.weights = Tensor<double>::from_rows({{0.1234567, 0.8765433}});
  EXPECT_EQ(attention_record_json(r),
            R"({"role":"dec-GA","block":2,"head":1,"shape":[1,2],"weights":[0.123457,0.876543]})");
  EXPECT_EQ(parse_role("umv-GA"), AttentionRole::kMultiViewGuided);
  EXPECT_FALSE(parse_role("nope").has_value());
}

}  // namespace
}  // namespace mtcap
