// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "json.hpp"
#include "mtcap/error.hpp"

namespace mtcap {

namespace {

constexpr std::size_t kMaxOrder = 4;

using NgramCounts = std::map<std::string, std::size_t>;

std::string ngram_key(const Tokens& tokens, std::size_t start, std::size_t n) {
  std::string key = tokens[start];
  for (std::size_t i = 1; i < n; ++i) {
    key += ' ';
    key += tokens[start + i];
  }
  return key;
}

NgramCounts count_ngrams(const Tokens& tokens, std::size_t n) {
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[ngram_key(tokens, i, n)];
  }
  return counts;
}

// Items sorted by id so every corpus reduction runs in one fixed order.
std::vector<const EvalItem*> ordered(const EvalCorpus& corpus) {
  std::vector<const EvalItem*> items;
  items.reserve(corpus.size());
  for (const auto& item : corpus) {
    items.push_back(&item);
  }
  std::stable_sort(items.begin(), items.end(), [](const EvalItem* a, const EvalItem* b) { return a->id < b->id; });
  return items;
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0);
  std::vector<std::size_t> cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

}  // namespace

Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string current;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) {
        out.push_back(std::move(current));
        current.clear();
      }
    } else {
      current += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    }
  }
  if (!current.empty()) {
    out.push_back(std::move(current));
  }
  return out;
}

std::string join_tokens(const Tokens& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0) {
      out += ' ';
    }
    out += tokens[i];
  }
  return out;
}

void validate_corpus(const EvalCorpus& corpus) {
  require(!corpus.empty(), ErrorCode::kInvalidArgument, "evaluation corpus is empty");
  for (const auto& item : corpus) {
    require(!item.references.empty(), ErrorCode::kInvalidArgument, "image '" + item.id + "' has no reference");
  }
}

std::array<double, 4> bleu(const EvalCorpus& corpus) {
  validate_corpus(corpus);
  std::array<double, kMaxOrder> correct{};
  std::array<double, kMaxOrder> guessed{};
  double cand_len = 0.0;
  double ref_len = 0.0;
  for (const EvalItem* item : ordered(corpus)) {
    const Tokens& cand = item->candidate;
    const std::size_t c = cand.size();
    std::size_t best = item->references[0].size();
    for (const auto& ref : item->references) {
      const auto diff = [&](std::size_t r) { return r > c ? r - c : c - r; };
      if (diff(ref.size()) < diff(best) || (diff(ref.size()) == diff(best) && ref.size() < best)) {
        best = ref.size();
      }
    }
    cand_len += static_cast<double>(c);
    ref_len += static_cast<double>(best);
    for (std::size_t n = 1; n <= kMaxOrder; ++n) {
      NgramCounts max_ref;
      for (const auto& ref : item->references) {
        for (const auto& [g, cnt] : count_ngrams(ref, n)) {
          max_ref[g] = std::max(max_ref[g], cnt);
        }
      }
      for (const auto& [g, cnt] : count_ngrams(cand, n)) {
        auto it = max_ref.find(g);
        correct[n - 1] += static_cast<double>(std::min(cnt, it == max_ref.end() ? 0 : it->second));
      }
      guessed[n - 1] += static_cast<double>(c >= n ? c - n + 1 : 0);
    }
  }
  std::array<double, 4> out{};
  if (cand_len == 0.0) {
    return out;
  }
  const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
  double log_sum = 0.0;
  for (std::size_t n = 0; n < kMaxOrder; ++n) {
    if (correct[n] == 0.0 || guessed[n] == 0.0) {
      break;
    }
    log_sum += std::log(correct[n] / guessed[n]);
    out[n] = bp * std::exp(log_sum / static_cast<double>(n + 1));
  }
  return out;
}

double rouge_l_sentence(const Tokens& candidate, const std::vector<Tokens>& references) {
  constexpr double kBeta = 1.2;
  if (candidate.empty()) {
    return 0.0;
  }
  double best_p = 0.0;
  double best_r = 0.0;
  for (const auto& ref : references) {
    if (ref.empty()) {
      continue;
    }
    const auto lcs = static_cast<double>(lcs_length(candidate, ref));
    best_p = std::max(best_p, lcs / static_cast<double>(candidate.size()));
    best_r = std::max(best_r, lcs / static_cast<double>(ref.size()));
  }
  if (best_p == 0.0 || best_r == 0.0) {
    return 0.0;
  }
  return (1.0 + kBeta * kBeta) * best_p * best_r / (best_r + kBeta * kBeta * best_p);
}

double rouge_l(const EvalCorpus& corpus) {
  validate_corpus(corpus);
  double total = 0.0;
  for (const EvalItem* item : ordered(corpus)) {
    total += rouge_l_sentence(item->candidate, item->references);
  }
  return total / static_cast<double>(corpus.size());
}

CiderScorer::CiderScorer(const std::vector<std::vector<Tokens>>& reference_sets, CiderOptions options)
    : corpus_size_(static_cast<double>(reference_sets.size())), options_(options) {
  for (const auto& refs : reference_sets) {
    std::set<std::string> seen;
    for (const auto& ref : refs) {
      for (std::size_t n = 1; n <= kMaxOrder; ++n) {
        for (const auto& entry : count_ngrams(ref, n)) {
          seen.insert(entry.first);
        }
      }
    }
    for (const auto& g : seen) {
      df_[g] += 1.0;
    }
  }
  log_corpus_size_ = corpus_size_ > 0.0 ? std::log(corpus_size_) : 0.0;
}

CiderScorer::CiderScorer(DocumentFrequency df, double corpus_size, CiderOptions options)
    : df_(std::move(df)), corpus_size_(corpus_size), options_(options) {
  require(corpus_size > 0.0, ErrorCode::kInvalidArgument, "CIDEr: corpus size must be positive");
  log_corpus_size_ = std::log(corpus_size_);
}

double CiderScorer::score(const Tokens& candidate, const std::vector<Tokens>& references) const {
  require(!references.empty(), ErrorCode::kInvalidArgument, "CIDEr: empty reference set");
  struct Vec {
    std::array<std::map<std::string, double>, kMaxOrder> weights;
    std::array<double, kMaxOrder> norm{};
    double length = 0.0;
  };
  auto vectorize = [&](const Tokens& tokens) {
    Vec v;
    v.length = static_cast<double>(tokens.size());
    for (std::size_t n = 1; n <= kMaxOrder; ++n) {
      for (const auto& [g, cnt] : count_ngrams(tokens, n)) {
        auto it = df_.find(g);
        const double df = std::max(1.0, it == df_.end() ? 0.0 : it->second);
        const double w = static_cast<double>(cnt) * (log_corpus_size_ - std::log(df));
        v.weights[n - 1][g] = w;
        v.norm[n - 1] += w * w;
      }
      v.norm[n - 1] = std::sqrt(v.norm[n - 1]);
    }
    return v;
  };
  const Vec cand = vectorize(candidate);
  std::array<double, kMaxOrder> sums{};
  for (const auto& ref_tokens : references) {
    const Vec ref = vectorize(ref_tokens);
    for (std::size_t n = 0; n < kMaxOrder; ++n) {
      double val = 0.0;
      for (const auto& [g, w] : cand.weights[n]) {
        auto it = ref.weights[n].find(g);
        if (it == ref.weights[n].end()) {
          continue;
        }
        val += (options_.clipped ? std::min(w, it->second) : w) * it->second;
      }
      if (cand.norm[n] != 0.0 && ref.norm[n] != 0.0) {
        val /= cand.norm[n] * ref.norm[n];
      }
      if (options_.clipped) {
        const double delta = cand.length - ref.length;
        val *= std::exp(-(delta * delta) / (2.0 * options_.sigma * options_.sigma));
      }
      sums[n] += val;
    }
  }
  double mean = 0.0;
  for (double s : sums) {
    mean += s;
  }
  mean /= static_cast<double>(kMaxOrder);
  return mean / static_cast<double>(references.size()) * 10.0;
}

double cider(const EvalCorpus& corpus, const CiderOptions& options, std::vector<double>* per_image) {
  validate_corpus(corpus);
  const auto items = ordered(corpus);
  std::vector<std::vector<Tokens>> refs;
  refs.reserve(items.size());
  for (const EvalItem* item : items) {
    refs.push_back(item->references);
  }
  const CiderScorer scorer(refs, options);
  double total = 0.0;
  if (per_image != nullptr) {
    per_image->clear();
  }
  for (const EvalItem* item : items) {
    const double s = scorer.score(item->candidate, item->references);
    total += s;
    if (per_image != nullptr) {
      per_image->push_back(s);
    }
  }
  return total / static_cast<double>(items.size());
}

double meteor_lite_sentence(const Tokens& candidate, const std::vector<Tokens>& references) {
  double best = 0.0;
  for (const auto& ref : references) {
    if (candidate.empty() || ref.empty()) {
      continue;
    }
    // Greedy left-to-right alignment that prefers extending the current chunk.
    std::vector<bool> used(ref.size(), false);
    std::vector<std::ptrdiff_t> align(candidate.size(), -1);
    for (std::size_t i = 0; i < candidate.size(); ++i) {
      const std::ptrdiff_t prev = i > 0 ? align[i - 1] : -1;
      if (prev >= 0 && static_cast<std::size_t>(prev + 1) < ref.size() && !used[prev + 1] &&
          ref[prev + 1] == candidate[i]) {
        align[i] = prev + 1;
      } else {
        for (std::size_t j = 0; j < ref.size(); ++j) {
          if (!used[j] && ref[j] == candidate[i]) {
            align[i] = static_cast<std::ptrdiff_t>(j);
            break;
          }
        }
      }
      if (align[i] >= 0) {
        used[align[i]] = true;
      }
    }
    double matches = 0.0;
    double chunks = 0.0;
    for (std::size_t i = 0; i < candidate.size(); ++i) {
      if (align[i] < 0) {
        continue;
      }
      matches += 1.0;
      if (i == 0 || align[i - 1] < 0 || align[i - 1] + 1 != align[i]) {
        chunks += 1.0;
      }
    }
    if (matches == 0.0) {
      continue;
    }
    const double p = matches / static_cast<double>(candidate.size());
    const double r = matches / static_cast<double>(ref.size());
    const double fmean = 10.0 * p * r / (r + 9.0 * p);
    const double penalty = 0.5 * std::pow(chunks / matches, 3.0);
    best = std::max(best, fmean * (1.0 - penalty));
  }
  return best;
}

double meteor_lite(const EvalCorpus& corpus) {
  validate_corpus(corpus);
  double total = 0.0;
  for (const EvalItem* item : ordered(corpus)) {
    total += meteor_lite_sentence(item->candidate, item->references);
  }
  return total / static_cast<double>(corpus.size());
}

ScoreReport evaluate(const EvalCorpus& corpus, const CiderOptions& options) {
  ScoreReport report;
  report.bleu = bleu(corpus);
  report.rouge_l = rouge_l(corpus);
  report.cider = cider(corpus, options, &report.per_image_cider);
  report.meteor = meteor_lite(corpus);
  report.cider_variant = options.clipped ? "cider-d" : "cider";
  report.cider_degenerate = ordered(corpus).size() < 2;
  for (const EvalItem* item : ordered(corpus)) {
    report.ids.push_back(item->id);
  }
  return report;
}

std::string score_report_json(const ScoreReport& report, bool per_image) {
  nlohmann::ordered_json j;
  j["images"] = report.ids.size();
  j["bleu1"] = report.bleu[0];
  j["bleu2"] = report.bleu[1];
  j["bleu3"] = report.bleu[2];
  j["bleu4"] = report.bleu[3];
  j["rouge_l"] = report.rouge_l;
  j["cider"] = report.cider;
  j["cider_variant"] = report.cider_variant;
  j["meteor_lite"] = report.meteor;
  if (report.cider_degenerate) {
    j["warnings"] = nlohmann::json::array({"single-image corpus: idf weights are all zero, CIDEr is 0"});
  }
  if (per_image) {
    nlohmann::ordered_json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < report.ids.size(); ++i) {
      rows.push_back({{"id", report.ids[i]}, {"cider", report.per_image_cider[i]}});
    }
    j["per_image"] = std::move(rows);
  }
  return j.dump(2);
}

namespace {

template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      fn(j);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::kFormat, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

}  // namespace

std::map<std::string, std::string> read_candidates(const std::filesystem::path& path) {
  std::map<std::string, std::string> out;
  for_each_json_line(path, [&](const nlohmann::json& j) {
    const std::string id = j.at("id").get<std::string>();
    require(!out.contains(id), ErrorCode::kFormat, path.string() + ": duplicate candidate id " + id);
    out[id] = j.at("caption").get<std::string>();
  });
  return out;
}

std::map<std::string, std::vector<std::string>> read_references(const std::filesystem::path& path) {
  std::map<std::string, std::vector<std::string>> out;
  for_each_json_line(path, [&](const nlohmann::json& j) {
    const std::string id = j.at("id").get<std::string>();
    require(!out.contains(id), ErrorCode::kFormat, path.string() + ": duplicate reference id " + id);
    out[id] = j.at("captions").get<std::vector<std::string>>();
  });
  return out;
}

EvalCorpus make_corpus(const std::map<std::string, std::string>& candidates,
                       const std::map<std::string, std::vector<std::string>>& references) {
  std::vector<std::string> missing;
  EvalCorpus corpus;
  for (const auto& [id, caption] : candidates) {
    auto it = references.find(id);
    if (it == references.end() || it->second.empty()) {
      missing.push_back(id);
      continue;
    }
    EvalItem item;
    item.id = id;
    item.candidate = tokenize(caption);
    for (const auto& ref : it->second) {
      item.references.push_back(tokenize(ref));
    }
    corpus.push_back(std::move(item));
  }
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < missing.size(); ++i) {
      list += (i == 0 ? "" : ", ") + missing[i];
    }
    fail(ErrorCode::kInvalidArgument, "no references for candidate ids: " + list);
  }
  return corpus;
}

}  // namespace mtcap
