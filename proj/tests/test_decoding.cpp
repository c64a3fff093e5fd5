// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>
#include <map>

#include "mtcap/decoding.hpp"

namespace mtcap {
namespace {

constexpr std::int32_t kA = 3;
constexpr std::int32_t kB = 4;

// Next-token distribution as a function of the generated tokens (without <s>).
using Table = std::function<std::vector<double>(std::size_t image, const std::vector<std::int32_t>& generated)>;

class TableModel final : public StepModel {
 public:
  TableModel(Table probs, std::size_t vocab, std::size_t max_len, std::size_t images = 1)
      : probs_(std::move(probs)), vocab_(vocab), max_len_(max_len), images_(images) {}
  std::size_t num_images() const override { return images_; }
  std::size_t vocab_size() const override { return vocab_; }
  std::size_t max_len() const override { return max_len_; }
  std::vector<std::vector<double>> log_probs(std::span<const std::size_t> images,
                                             const TokenMatrix& prefixes) override {
    std::vector<std::vector<double>> out;
    for (std::size_t r = 0; r < prefixes.rows; ++r) {
      EXPECT_EQ(prefixes(r, 0), Vocab::kBos);
      out.push_back(log_of(generated(prefixes, r), images[r]));
    }
    return out;
  }
  std::vector<double> log_of(const std::vector<std::int32_t>& generated, std::size_t image) const {
    auto p = probs_(image, generated);
    for (double& v : p) v = std::log(v);
    return p;
  }

 private:
  static std::vector<std::int32_t> generated(const TokenMatrix& m, std::size_t r) {
    return {m.row(r).begin() + 1, m.row(r).end()};
  }
  Table probs_;
  std::size_t vocab_, max_len_, images_;
};

// Random distributions keyed by (seed, prefix).
Table random_table(std::uint64_t seed, std::size_t vocab) {
  return [seed, vocab](std::size_t image, const std::vector<std::int32_t>& g) {
    std::uint64_t key = derive_seed(seed, image);
    for (auto t : g) key = derive_seed(key, static_cast<std::uint64_t>(t));
    Rng rng(key);
    std::vector<double> p(vocab);
    double z = 0.0;
    for (double& v : p) {
      v = std::exp(3.0 * rng.uniform(-1, 1));
      z += v;
    }
    for (double& v : p) v /= z;
    return p;
  };
}

// Every sequence the decoders can return: </s>-terminated ones up to n
// tokens and every n-token sequence without </s>.
std::vector<std::vector<std::int32_t>> all_sequences(std::size_t vocab, std::size_t n) {
  std::vector<std::vector<std::int32_t>> out, frontier = {{}};
  for (std::size_t len = 1; len <= n; ++len) {
    std::vector<std::vector<std::int32_t>> next;
    for (const auto& s : frontier)
      for (std::size_t v = 0; v < vocab; ++v) {
        auto t = s;
        t.push_back(static_cast<std::int32_t>(v));
        if (v == static_cast<std::size_t>(Vocab::kEos) || len == n) {
          out.push_back(t);
        } else {
          next.push_back(t);
        }
      }
    frontier = std::move(next);
  }
  return out;
}

Hypothesis score_sequence(const TableModel& m, const std::vector<std::int32_t>& seq) {
  Hypothesis h;
  std::vector<std::int32_t> prefix;
  for (auto t : seq) {
    const double lp = m.log_of(prefix, 0)[static_cast<std::size_t>(t)];
    h.tokens.push_back(t);
    h.step_logprobs.push_back(lp);
    h.logprob += lp;
    prefix.push_back(t);
  }
  h.finished = !seq.empty() && seq.back() == Vocab::kEos;
  return h;
}

TEST(Greedy, AlwaysEndGivesEmptyCaptionAndIsDeterministic) {
  TableModel m([](std::size_t, const auto&) { return std::vector<double>{0.1, 0.1, 0.5, 0.3}; }, 4, 5);
  const auto h = greedy_decode(m, 0);
  ASSERT_EQ(h.size(), 1u);
  EXPECT_EQ(h[0].tokens, (std::vector<std::int32_t>{Vocab::kEos}));
  EXPECT_TRUE(h[0].finished);
  TableModel r(random_table(3, 6), 6, 5);
  EXPECT_EQ(greedy_decode(r, 0)[0].tokens, greedy_decode(r, 0)[0].tokens);
}

TEST(Greedy, TiesGoToLowestId) {
  TableModel m([](std::size_t, const auto&) { return std::vector<double>{0.0, 0.0, 0.2, 0.4, 0.4}; }, 5, 2);
  EXPECT_EQ(greedy_decode(m, 0)[0].tokens, (std::vector<std::int32_t>{kA, kA}));
  EXPECT_FALSE(greedy_decode(m, 0)[0].finished);
}

Table counterexample() {
  return [](std::size_t, const std::vector<std::int32_t>& g) -> std::vector<double> {
    if (g.empty()) return {0.0, 0.0, 0.05, 0.5, 0.45};
    if (g[0] == kA) return {0.0, 0.0, 0.2, 0.4, 0.4};
    if (g[0] == kB) return {0.0, 0.0, 0.0, 14.0 / 15.0, 1.0 / 15.0};
    return {0.0, 0.0, 1.0, 0.0, 0.0};
  };
}

TEST(Beam, TwoStepCounterexampleMatchesExhaustiveSearch) {
  TableModel m(counterexample(), 5, 2);
  const auto greedy = greedy_decode(m, 0)[0];
  EXPECT_EQ(greedy.tokens, (std::vector<std::int32_t>{kA, kA}));
  EXPECT_LE(std::exp(greedy.logprob), 0.40 + 1e-12);
  Hypothesis best;
  best.logprob = -std::numeric_limits<double>::infinity();
  for (const auto& s : all_sequences(5, 2)) {
    const auto h = score_sequence(m, s);
    if (ranks_before(h, best, 0.0) || best.tokens.empty()) best = h;
  }
  EXPECT_EQ(best.tokens, (std::vector<std::int32_t>{kB, kA}));
  const auto beam = beam_search(m, 0, 0, 2, 0.0);
  EXPECT_EQ(beam.best.tokens, best.tokens);
  EXPECT_NEAR(std::exp(beam.best.logprob), 0.42, 1e-12);
}

TEST(Beam, WidthOneEqualsGreedyOnRandomModels) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    TableModel m(random_table(seed, 5), 5, 4);
    const auto g = greedy_decode(m, 0)[0];
    const auto b = beam_search(m, 0, 0, 1, 0.0).best;
    EXPECT_EQ(b.tokens, g.tokens) << seed;
    EXPECT_EQ(b.logprob, g.logprob) << seed;
    EXPECT_EQ(b.finished, g.finished) << seed;
  }
}

TEST(Beam, WideBeamFindsGlobalArgmax) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (double alpha : {0.0, 0.7}) {
      TableModel m(random_table(100 + seed, 4), 4, 3);
      Hypothesis best;
      for (const auto& s : all_sequences(4, 3)) {
        const auto h = score_sequence(m, s);
        if (best.tokens.empty() || ranks_before(h, best, alpha)) best = h;
      }
      const auto beam = beam_search(m, 0, 0, 64, alpha);
      EXPECT_EQ(beam.best.tokens, best.tokens) << seed << " " << alpha;
    }
  }
}

TEST(Beam, ScoreNeverBelowGreedy) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    for (std::size_t width : {2, 3, 5}) {
      for (double alpha : {0.0, 0.5, 1.0}) {
        TableModel m(random_table(1000 + seed, 6), 6, 5);
        const auto g = greedy_decode(m, 0)[0];
        const auto b = beam_search(m, 0, 0, width, alpha).best;
        EXPECT_GE(ranking_score(b, alpha), ranking_score(g, alpha) - 1e-12) << seed << " " << width << " " << alpha;
      }
    }
  }
}

TEST(Beam, ReturnedBeamsAreConsistent) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    TableModel m(random_table(500 + seed, 6), 6, 4);
    const auto result = beam_search(m, 0, 0, 3, 0.5);
    ASSERT_FALSE(result.beams.empty());
    EXPECT_EQ(result.beams.front().tokens, result.best.tokens);
    for (std::size_t i = 0; i + 1 < result.beams.size(); ++i)
      EXPECT_FALSE(ranks_before(result.beams[i + 1], result.beams[i], 0.5));
    for (const auto& h : result.beams) {
      ASSERT_LE(h.tokens.size(), 4u);
      const auto again = score_sequence(m, h.tokens);
      EXPECT_NEAR(h.logprob, again.logprob, 1e-6);
      double running = 0.0, total = 0.0;
      for (std::size_t t = 0; t < h.tokens.size(); ++t) {
        EXPECT_NEAR(h.step_logprobs[t], again.step_logprobs[t], 1e-12);
        EXPECT_LE(running + h.step_logprobs[t], running);
        running += h.step_logprobs[t];
        total += h.step_logprobs[t];
      }
      EXPECT_NEAR(h.logprob, total, 1e-6);
      if (h.finished) {
        EXPECT_EQ(h.tokens.back(), Vocab::kEos);
      } else {
        EXPECT_EQ(h.tokens.size(), 4u);
      }
    }
  }
}

TEST(Sampling, OneHotEqualsGreedyAndSeedsReproduce) {
  TableModel onehot([](std::size_t, const std::vector<std::int32_t>& g) -> std::vector<double> {
    if (g.size() < 2) return {0.0, 0.0, 0.0, 1.0, 0.0};
    return {0.0, 0.0, 1.0, 0.0, 0.0};
  }, 5, 6);
  Rng rng(1);
  EXPECT_EQ(sample_decode(onehot, 0, rng)[0].tokens, greedy_decode(onehot, 0)[0].tokens);
  TableModel r(random_table(7, 6), 6, 6, 4);
  Rng r1(42), r2(42);
  const auto a = sample_decode(r, 0, r1);
  const auto b = sample_decode(r, 0, r2);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a[i].tokens, b[i].tokens);
    const auto again = r.log_of({}, i);
    EXPECT_EQ(a[i].step_logprobs[0], again[static_cast<std::size_t>(a[i].tokens[0])]);
  }
}

TEST(Sampling, FrequenciesMatchWithinThreeSigma) {
  const std::vector<double> p = {0.0, 0.0, 0.2, 0.3, 0.5};
  constexpr std::size_t kDraws = 10000;
  TableModel m([&](std::size_t, const auto&) { return p; }, 5, 1, kDraws);
  Rng rng(2026);
  std::map<std::int32_t, double> counts;
  for (const auto& h : sample_decode(m, 0, rng)) counts[h.tokens.at(0)] += 1.0;
  for (std::size_t v = 2; v < 5; ++v) {
    const double sigma = std::sqrt(kDraws * p[v] * (1 - p[v]));
    EXPECT_LE(std::abs(counts[static_cast<std::int32_t>(v)] - kDraws * p[v]), 3 * sigma) << v;
  }
  EXPECT_EQ(counts.count(0) + counts.count(1), 0u);
}

TEST(DecodeConfig, Validation) {
  DecodeConfig c;
  c.beam = 0;
  EXPECT_THROW(c.validate(), Error);
  c.beam = 2;
  c.alpha = 1.5;
  EXPECT_THROW(c.validate(), Error);
  c.alpha = 1.0;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(parse_decode_mode("beam"), DecodeMode::kBeam);
  EXPECT_THROW(parse_decode_mode("nucleus"), Error);
}

TEST(ModelStepper, RealModelBeamOneMatchesGreedy) {
  ModelConfig c;
  c.layers = 1;
  c.model_dim = 8;
  c.heads = 2;
  c.ffn_dim = 16;
  c.view_dims = {4};
  c.embed_dim = 6;
  c.vocab_size = 9;
  c.max_len = 6;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const CaptionModel<double> model(c, seed);
    Rng rng(seed);
    std::vector<FeatureViews> images;
    for (int i = 0; i < 3; ++i) {
      Tensor<float> t(2 + rng.uniform_index(3), 4);
      for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-2, 2));
      images.push_back({{t}, false});
    }
    std::vector<const FeatureViews*> ptrs;
    for (const auto& f : images) ptrs.push_back(&f);
    ModelStepper<double> stepper(model, FeatureBatch<double>::from_images(ptrs));
    const auto greedy = greedy_decode(stepper, 0);
    for (std::size_t i = 0; i < 3; ++i) {
      const auto beam = beam_search(stepper, i, 0, 1, 0.0).best;
      EXPECT_EQ(beam.tokens, greedy[i].tokens);
      EXPECT_NEAR(beam.logprob, greedy[i].logprob, 1e-12);
      EXPECT_LE(greedy[i].tokens.size(), 6u);
    }
  }
}

}  // namespace
}  // namespace mtcap
