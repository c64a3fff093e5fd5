// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

// Corpus-level caption metrics: BLEU-1..4, ROUGE-L, CIDEr / CIDEr-D and an
// exact-match METEOR variant. Corpus scores are reduced in image-id order.

#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace mtcap {

using Tokens = std::vector<std::string>;

// ASCII lowercase, split on whitespace.
Tokens tokenize(std::string_view text);
std::string join_tokens(const Tokens& tokens);

struct EvalItem {
  std::string id;
  Tokens candidate;
  std::vector<Tokens> references;
};

using EvalCorpus = std::vector<EvalItem>;

// Throws when the corpus is empty or an item has no reference.
void validate_corpus(const EvalCorpus& corpus);

// Corpus BLEU with per-reference clipping and the closest-reference-length
// brevity penalty. A zero n-gram precision gives 0 for that order and above.
std::array<double, 4> bleu(const EvalCorpus& corpus);

// LCS F-measure (beta 1.2) against the best reference precision and recall.
double rouge_l_sentence(const Tokens& candidate, const std::vector<Tokens>& references);
double rouge_l(const EvalCorpus& corpus);

// n-gram (n <= 4) -> number of images whose reference set contains it.
using DocumentFrequency = std::map<std::string, double>;

struct CiderOptions {
  bool clipped = true;  // CIDEr-D: clipped tf-idf overlap plus Gaussian length penalty
  double sigma = 6.0;
};

class CiderScorer {
 public:
  // Document frequencies come from the reference sets; N = their count.
  explicit CiderScorer(const std::vector<std::vector<Tokens>>& reference_sets, CiderOptions options = {});
  CiderScorer(DocumentFrequency df, double corpus_size, CiderOptions options = {});

  double score(const Tokens& candidate, const std::vector<Tokens>& references) const;
  // log N == 0 makes every idf weight vanish.
  bool degenerate() const { return log_corpus_size_ <= 0.0; }
  const DocumentFrequency& document_frequency() const { return df_; }
  double corpus_size() const { return corpus_size_; }

 private:
  DocumentFrequency df_;
  double corpus_size_ = 0.0;
  double log_corpus_size_ = 0.0;
  CiderOptions options_;
};

// Mean per-image score x 10; per_image (optional) receives values in id order.
double cider(const EvalCorpus& corpus, const CiderOptions& options = {}, std::vector<double>* per_image = nullptr);

// Unigram exact-match F-mean (recall weight 9) times 1 - 0.5 (chunks / matches)^3,
// best over references.
double meteor_lite_sentence(const Tokens& candidate, const std::vector<Tokens>& references);
double meteor_lite(const EvalCorpus& corpus);

struct ScoreReport {
  std::array<double, 4> bleu{};
  double rouge_l = 0.0;
  double cider = 0.0;
  double meteor = 0.0;
  bool cider_degenerate = false;
  std::string cider_variant = "cider-d";
  std::vector<std::string> ids;
  std::vector<double> per_image_cider;
};

ScoreReport evaluate(const EvalCorpus& corpus, const CiderOptions& options = {});
std::string score_report_json(const ScoreReport& report, bool per_image);

// JSONL I/O: {"id","caption"} candidates, {"id","captions":[...]} references.
std::map<std::string, std::string> read_candidates(const std::filesystem::path& path);
std::map<std::string, std::vector<std::string>> read_references(const std::filesystem::path& path);
// Pairs candidates with references; errors list every missing reference id.
EvalCorpus make_corpus(const std::map<std::string, std::string>& candidates,
                       const std::map<std::string, std::vector<std::string>>& references);

}  // namespace mtcap
