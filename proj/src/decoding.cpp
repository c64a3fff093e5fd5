// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace mtcap {

std::string_view decode_mode_name(DecodeMode mode) {
  switch (mode) {
    case DecodeMode::kGreedy:
      return "greedy";
    case DecodeMode::kSample:
      return "sample";
    case DecodeMode::kBeam:
      return "beam";
  }
  return "greedy";
}

DecodeMode parse_decode_mode(std::string_view name) {
  if (name == "greedy") return DecodeMode::kGreedy;
  if (name == "sample") return DecodeMode::kSample;
  if (name == "beam") return DecodeMode::kBeam;
  fail(ErrorCode::kConfig, "unknown decode mode '" + std::string(name) + "' (expected greedy, sample or beam)");
}

void DecodeConfig::validate() const {
  require(beam >= 1, ErrorCode::kConfig, "decode: beam width must be >= 1");
  require(alpha >= 0.0 && alpha <= 1.0, ErrorCode::kConfig, "decode: alpha must lie in [0, 1]");
}

double ranking_score(const Hypothesis& h, double alpha) {
  if (alpha == 0.0 || h.tokens.empty()) {
    return h.logprob;
  }
  return h.logprob / std::pow(static_cast<double>(h.tokens.size()), alpha);
}

bool ranks_before(const Hypothesis& a, const Hypothesis& b, double alpha) {
  const double sa = ranking_score(a, alpha);
  const double sb = ranking_score(b, alpha);
  if (sa != sb) {
    return sa > sb;
  }
  return a.tokens < b.tokens;
}

std::vector<double> log_softmax(std::span<const double> logits) {
  require(!logits.empty(), ErrorCode::kInvalidArgument, "log_softmax of an empty row");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double v : logits) {
    total += std::exp(v - mx);
  }
  const double lse = mx + std::log(total);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] - lse;
  }
  return out;
}

template <typename T>
ModelStepper<T>::ModelStepper(const CaptionModel<T>& model, const FeatureBatch<T>& features) : model_(model) {
  Tape<T> tape;
  tape.set_grad_enabled(false);
  EncodedImages<T> enc = model.encode(tape, features);
  encoded_ = enc.features.value();
  valid_ = enc.valid;
  batch_ = enc.batch;
  objects_ = enc.objects;
}

template <typename T>
std::vector<std::vector<double>> ModelStepper<T>::log_probs(std::span<const std::size_t> images,
                                                            const TokenMatrix& prefixes) {
  require(images.size() == prefixes.rows, ErrorCode::kInternal, "stepper: image/prefix row mismatch");
  const std::size_t d = encoded_.cols();
  Tensor<T> rows(images.size() * objects_, d);
  EncodedImages<T> sel;
  sel.batch = images.size();
  sel.objects = objects_;
  sel.valid.reserve(images.size() * objects_);
  for (std::size_t i = 0; i < images.size(); ++i) {
    require(images[i] < batch_, ErrorCode::kRange, "stepper: image index out of range");
    for (std::size_t r = 0; r < objects_; ++r) {
      const auto src = encoded_.row(images[i] * objects_ + r);
      std::copy(src.begin(), src.end(), rows.row(i * objects_ + r).begin());
      sel.valid.push_back(valid_[images[i] * objects_ + r]);
    }
  }
  Tape<T> tape;
  tape.set_grad_enabled(false);
  sel.features = tape.constant(std::move(rows));
  const Tensor<T> logits = model_.decode_step(sel, prefixes);
  std::vector<std::vector<double>> out(images.size());
  std::vector<double> row(logits.cols());
  for (std::size_t i = 0; i < images.size(); ++i) {
    for (std::size_t c = 0; c < logits.cols(); ++c) {
      row[c] = static_cast<double>(logits(i, c));
    }
    out[i] = log_softmax(row);
  }
  return out;
}

namespace {

std::size_t resolve_len(const StepModel& model, std::size_t max_len) {
  const std::size_t n = max_len == 0 ? model.max_len() : max_len;
  require(n >= 1 && n <= model.max_len(), ErrorCode::kRange,
          "decode: max_len " + std::to_string(n) + " outside [1, " + std::to_string(model.max_len()) + "]");
  return n;
}

TokenMatrix prefix_matrix(const std::vector<const std::vector<std::int32_t>*>& generated, std::size_t t) {
  TokenMatrix m(generated.size(), t);
  for (std::size_t r = 0; r < generated.size(); ++r) {
    m(r, 0) = Vocab::kBos;
    for (std::size_t j = 1; j < t; ++j) {
      m(r, j) = (*generated[r])[j - 1];
    }
  }
  return m;
}

// Shared driver for greedy and sampling: `choose` picks a token from a row.
// Row r of the result belongs to images[r].
template <typename Choose>
std::vector<Hypothesis> rollout(StepModel& model, std::span<const std::size_t> images, std::size_t max_len,
                                Choose&& choose) {
  const std::size_t n = resolve_len(model, max_len);
  std::vector<Hypothesis> hyps(images.size());
  std::vector<std::size_t> active(images.size());
  for (std::size_t i = 0; i < active.size(); ++i) {
    active[i] = i;
  }
  for (std::size_t t = 1; t <= n && !active.empty(); ++t) {
    std::vector<const std::vector<std::int32_t>*> generated;
    for (std::size_t i : active) {
      generated.push_back(&hyps[i].tokens);
    }
    std::vector<std::size_t> rows;
    for (std::size_t i : active) {
      rows.push_back(images[i]);
    }
    const auto lp = model.log_probs(rows, prefix_matrix(generated, t));
    std::vector<std::size_t> still;
    for (std::size_t r = 0; r < active.size(); ++r) {
      Hypothesis& h = hyps[active[r]];
      const auto tok = static_cast<std::int32_t>(choose(lp[r]));
      h.tokens.push_back(tok);
      h.step_logprobs.push_back(lp[r][static_cast<std::size_t>(tok)]);
      h.logprob += lp[r][static_cast<std::size_t>(tok)];
      if (tok == Vocab::kEos) {
        h.finished = true;
      } else {
        still.push_back(active[r]);
      }
    }
    active = std::move(still);
  }
  return hyps;
}

std::size_t argmax_lowest(const std::vector<double>& row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) {
      best = i;
    }
  }
  return best;
}

std::vector<std::size_t> every_image(const StepModel& model) {
  std::vector<std::size_t> images(model.num_images());
  for (std::size_t i = 0; i < images.size(); ++i) {
    images[i] = i;
  }
  return images;
}

}  // namespace

std::vector<Hypothesis> greedy_decode(StepModel& model, std::size_t max_len) {
  return rollout(model, every_image(model), max_len, argmax_lowest);
}

std::vector<Hypothesis> sample_decode(StepModel& model, std::size_t max_len, Rng& rng) {
  return rollout(model, every_image(model), max_len, [&](const std::vector<double>& row) {
    const double u = rng.uniform();
    double acc = 0.0;
    std::size_t last = 0;
    for (std::size_t i = 0; i < row.size(); ++i) {
      const double p = std::exp(row[i]);
      if (p > 0.0) {
        last = i;
      }
      acc += p;
      if (u < acc) {
        return i;
      }
    }
    return last;
  });
}

BeamResult beam_search(StepModel& model, std::size_t image, std::size_t max_len, std::size_t beam, double alpha) {
  require(beam >= 1, ErrorCode::kConfig, "beam width must be >= 1");
  const std::size_t n = resolve_len(model, max_len);
  std::vector<Hypothesis> live(1);
  std::vector<Hypothesis> finished;
  // Expansion keeps the top candidates by cumulative log-probability.
  auto by_logprob = [](const Hypothesis& a, const Hypothesis& b) { return ranks_before(a, b, 0.0); };
  for (std::size_t t = 1; t <= n && !live.empty() && finished.size() < beam; ++t) {
    std::vector<const std::vector<std::int32_t>*> generated;
    for (const auto& h : live) {
      generated.push_back(&h.tokens);
    }
    const std::vector<std::size_t> images(live.size(), image);
    const auto lp = model.log_probs(images, prefix_matrix(generated, t));
    std::vector<Hypothesis> candidates;
    candidates.reserve(live.size() * model.vocab_size());
    for (std::size_t b = 0; b < live.size(); ++b) {
      for (std::size_t v = 0; v < lp[b].size(); ++v) {
        Hypothesis h = live[b];
        h.tokens.push_back(static_cast<std::int32_t>(v));
        h.step_logprobs.push_back(lp[b][v]);
        h.logprob += lp[b][v];
        h.finished = v == static_cast<std::size_t>(Vocab::kEos);
        candidates.push_back(std::move(h));
      }
    }
    const std::size_t keep = std::min(beam - finished.size(), candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      by_logprob);
    live.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      if (candidates[i].finished) {
        finished.push_back(std::move(candidates[i]));
      } else {
        live.push_back(std::move(candidates[i]));
      }
    }
  }
  BeamResult result;
  result.beams = std::move(finished);
  for (auto& h : live) {
    result.beams.push_back(std::move(h));
  }
  // The greedy path competes in the final ranking so the result never scores
  // below greedy decoding.
  const std::size_t one[] = {image};
  Hypothesis greedy = std::move(rollout(model, one, n, argmax_lowest).front());
  if (std::none_of(result.beams.begin(), result.beams.end(),
                   [&](const Hypothesis& h) { return h.tokens == greedy.tokens; })) {
    result.beams.push_back(std::move(greedy));
  }
  std::sort(result.beams.begin(), result.beams.end(),
            [alpha](const Hypothesis& a, const Hypothesis& b) { return ranks_before(a, b, alpha); });
  result.best = result.beams.front();
  return result;
}

std::vector<Hypothesis> decode_all(StepModel& model, const DecodeConfig& cfg) {
  cfg.validate();
  switch (cfg.mode) {
    case DecodeMode::kGreedy:
      return greedy_decode(model, cfg.max_len);
    case DecodeMode::kSample: {
      Rng rng(cfg.seed);
      return sample_decode(model, cfg.max_len, rng);
    }
    case DecodeMode::kBeam: {
      std::vector<Hypothesis> out;
      for (std::size_t i = 0; i < model.num_images(); ++i) {
        out.push_back(beam_search(model, i, cfg.max_len, cfg.beam, cfg.alpha).best);
      }
      return out;
    }
  }
  return {};
}

template class ModelStepper<float>;
template class ModelStepper<double>;

}  // namespace mtcap
