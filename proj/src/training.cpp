// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace mtcap {

std::string_view stage_name(Stage s) { return s == Stage::kXe ? "xe" : "scst"; }

std::string_view reward_name(RewardMetric m) {
  switch (m) {
    case RewardMetric::kCiderD:
      return "cider-d";
    case RewardMetric::kCider:
      return "cider";
    case RewardMetric::kBleu4:
      return "bleu4";
  }
  return "cider-d";
}

RewardMetric parse_reward(std::string_view name) {
  if (name == "cider-d") return RewardMetric::kCiderD;
  if (name == "cider") return RewardMetric::kCider;
  if (name == "bleu4") return RewardMetric::kBleu4;
  fail(ErrorCode::kConfig, "unknown reward metric '" + std::string(name) + "' (expected cider-d, cider or bleu4)");
}

void TrainConfig::validate() const {
  std::string problems;
  auto complain = [&](const std::string& m) { problems += (problems.empty() ? "" : "; ") + m; };
  if (batch_size < 1) complain("batch_size must be >= 1");
  if (!(lr_slope > 0.0)) complain("lr_slope must be positive");
  if (!(lr_cap > 0.0)) complain("lr_cap must be positive");
  if (decay_every < 1) complain("decay_every must be >= 1");
  if (!(decay_factor > 0.0 && decay_factor <= 1.0)) complain("decay_factor must lie in (0, 1]");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) complain("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) complain("adam_eps must be positive");
  if (clip_norm < 0.0) complain("clip_norm must be >= 0 (0 disables clipping)");
  if (!problems.empty()) {
    fail(ErrorCode::kConfig, "invalid training config: " + problems);
  }
}

double lr_at_epoch(std::size_t epoch, const TrainConfig& cfg) {
  require(epoch >= 1, ErrorCode::kRange, "lr_at_epoch: epochs count from 1");
  double lr = std::min(static_cast<double>(epoch) * cfg.lr_slope, cfg.lr_cap);
  if (epoch > cfg.decay_after) {
    const std::size_t halvings = (epoch - cfg.decay_after - 1) / cfg.decay_every + 1;
    lr *= std::pow(cfg.decay_factor, static_cast<double>(halvings));
  }
  return lr;
}

template <typename T>
Var<T> xe_loss(const Var<T>& logits, const TokenMatrix& targets, std::span<const std::uint8_t> mask) {
  require(logits.rows() == targets.ids.size() && mask.size() == targets.ids.size(), ErrorCode::kDimension,
          "xe_loss: logits, targets and mask disagree in size");
  std::size_t count = 0;
  for (auto m : mask) {
    count += m != 0 ? 1 : 0;
  }
  require(count > 0, ErrorCode::kInvalidArgument, "xe_loss: every position is padding");
  Tensor<T> weights(targets.ids.size(), 1);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    weights(i, 0) = mask[i] != 0 ? static_cast<T>(-1.0 / static_cast<double>(count)) : T(0);
  }
  Var<T> picked = pick(log_softmax_rows(logits), std::span<const std::int32_t>(targets.ids));
  return weighted_sum(picked, weights);
}

template <typename T>
Var<T> policy_gradient_loss(const Var<T>& logits, const TokenMatrix& tokens, std::span<const std::uint8_t> mask,
                            std::span<const double> advantages) {
  require(logits.rows() == tokens.ids.size() && mask.size() == tokens.ids.size(), ErrorCode::kDimension,
          "policy loss: logits, tokens and mask disagree in size");
  require(advantages.size() == tokens.rows && tokens.rows > 0, ErrorCode::kDimension,
          "policy loss: one advantage per sequence required");
  const double k = static_cast<double>(tokens.rows);
  Tensor<T> weights(tokens.ids.size(), 1);
  for (std::size_t r = 0; r < tokens.rows; ++r) {
    for (std::size_t c = 0; c < tokens.cols; ++c) {
      const std::size_t i = r * tokens.cols + c;
      weights(i, 0) = mask[i] != 0 ? static_cast<T>(-advantages[r] / k) : T(0);
    }
  }
  Var<T> picked = pick(log_softmax_rows(logits), std::span<const std::int32_t>(tokens.ids));
  return weighted_sum(picked, weights);
}

template <typename T>
Adam<T>::Adam(double beta1, double beta2, double eps, double clip_norm)
    : beta1_(beta1), beta2_(beta2), eps_(eps), clip_(clip_norm) {}

template <typename T>
double Adam<T>::step(ParameterStore<T>& params, double lr) {
  std::vector<Parameter<T>*> trainable;
  double norm_sq = 0.0;
  for (Parameter<T>* p : params.all()) {
    if (p->frozen) {
      continue;
    }
    double local = 0.0;
    for (T g : p->grad.values()) {
      local += static_cast<double>(g) * static_cast<double>(g);
    }
    require(std::isfinite(local), ErrorCode::kNumeric, "non-finite gradient in parameter " + p->name);
    norm_sq += local;
    trainable.push_back(p);
  }
  const double norm = std::sqrt(norm_sq);
  const double scale = clip_ > 0.0 && norm > clip_ ? clip_ / norm : 1.0;
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (Parameter<T>* p : trainable) {
    auto it = moments_.find(p->name);
    if (it == moments_.end()) {
      it = moments_
               .emplace(p->name, std::make_pair(Tensor<T>(p->value.rows(), p->value.cols()),
                                                Tensor<T>(p->value.rows(), p->value.cols())))
               .first;
    }
    Tensor<T>& m = it->second.first;
    Tensor<T>& v = it->second.second;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = static_cast<double>(p->grad[i]) * scale;
      const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * g;
      const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * g * g;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
      p->value[i] = static_cast<T>(static_cast<double>(p->value[i]) - update);
    }
  }
  return norm;
}

template <typename T>
std::vector<NamedTensor> Adam<T>::state() const {
  std::vector<NamedTensor> out;
  out.push_back({"adam.step", Tensor<float>(1, 1, static_cast<float>(step_))});
  for (const auto& [name, mv] : moments_) {
    out.push_back({"adam.m/" + name, mv.first.template cast<float>()});
    out.push_back({"adam.v/" + name, mv.second.template cast<float>()});
  }
  return out;
}

template <typename T>
void Adam<T>::load_state(const std::vector<NamedTensor>& tensors, const ParameterStore<T>& params) {
  moments_.clear();
  step_ = 0;
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& t : tensors) {
    by_name[t.name] = &t.value;
  }
  auto it = by_name.find("adam.step");
  require(it != by_name.end(), ErrorCode::kFormat, "checkpoint has no optimizer state");
  step_ = static_cast<std::uint64_t>(std::llround((*it->second)[0]));
  for (const Parameter<T>* p : params.all()) {
    auto m = by_name.find("adam.m/" + p->name);
    auto v = by_name.find("adam.v/" + p->name);
    if (m == by_name.end() && v == by_name.end()) {
      continue;
    }
    require(m != by_name.end() && v != by_name.end(), ErrorCode::kFormat,
            "optimizer state for " + p->name + " is incomplete");
    require(m->second->shape() == p->value.shape() && v->second->shape() == p->value.shape(), ErrorCode::kFormat,
            "optimizer state for " + p->name + " has the wrong shape");
    moments_.emplace(p->name, std::make_pair(m->second->template cast<T>(), v->second->template cast<T>()));
  }
}

RewardFunction::RewardFunction(RewardMetric metric, const std::vector<std::vector<Tokens>>& document_references)
    : metric_(metric) {
  if (metric != RewardMetric::kBleu4) {
    CiderOptions opts;
    opts.clipped = metric == RewardMetric::kCiderD;
    cider_.emplace(document_references, opts);
  }
}

double RewardFunction::operator()(const Tokens& candidate, const std::vector<Tokens>& references) const {
  require(!references.empty(), ErrorCode::kInvalidArgument, "reward: empty reference set");
  if (cider_) {
    return cider_->score(candidate, references);
  }
  EvalCorpus corpus{{"x", candidate, references}};
  return bleu(corpus)[3];
}

ScstStats scst_step(CaptionModel<float>& model, Adam<float>& adam, const FeatureBatch<float>& features,
                    std::span<const std::vector<Tokens>* const> references, const Vocab& vocab,
                    const RewardFunction& reward, double lr, Rng& rng) {
  const std::size_t b = features.batch;
  require(references.size() == b, ErrorCode::kDimension, "scst: one reference set per image required");
  ModelStepper<float> stepper(model, features);
  const auto greedy = greedy_decode(stepper, 0);
  const auto sampled = sample_decode(stepper, 0, rng);
  ScstStats stats;
  std::vector<double> advantages(b);
  std::size_t width = 1;
  for (std::size_t k = 0; k < b; ++k) {
    const double rs = reward(vocab.decode(sampled[k].tokens), *references[k]);
    const double rg = reward(vocab.decode(greedy[k].tokens), *references[k]);
    advantages[k] = rs - rg;
    stats.mean_sample_reward += rs / static_cast<double>(b);
    stats.mean_greedy_reward += rg / static_cast<double>(b);
    width = std::max(width, sampled[k].tokens.size());
  }
  TokenMatrix inputs(b, width);
  TokenMatrix targets(b, width);
  std::vector<std::uint8_t> mask(b * width, 0);
  for (std::size_t k = 0; k < b; ++k) {
    const auto& toks = sampled[k].tokens;
    inputs(k, 0) = Vocab::kBos;
    for (std::size_t t = 0; t < toks.size(); ++t) {
      targets(k, t) = toks[t];
      mask[k * width + t] = 1;
      if (t + 1 < width && t + 1 < toks.size()) {
        inputs(k, t + 1) = toks[t];
      }
    }
  }
  Tape<float> tape(rng.next_u64());
  tape.set_training(false);
  Var<float> logits = model.decode_train(tape, features, inputs);
  Var<float> loss = policy_gradient_loss(logits, targets, mask, advantages);
  model.parameters().zero_grad();
  tape.backward(loss);
  adam.step(model.parameters(), lr);
  stats.loss = static_cast<double>(loss.value()(0, 0));
  return stats;
}

std::string metric_csv_header() {
  return "epoch,stage,lr,train_loss,val_bleu1,val_bleu4,val_rougeL,val_cider,wallclock_s\n";
}

std::string metric_csv_row(const EpochLog& log) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%zu,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.3f\n", log.epoch,
                std::string(stage_name(log.stage)).c_str(), log.lr, log.train_loss, log.val_bleu1, log.val_bleu4,
                log.val_rouge_l, log.val_cider, log.wallclock_s);
  return buf;
}

std::vector<Hypothesis> decode_split(const CaptionModel<float>& model, const Dataset& data, const DecodeConfig& decode,
                                     std::size_t chunk) {
  require(chunk >= 1, ErrorCode::kInvalidArgument, "decode chunk must be >= 1");
  std::vector<Hypothesis> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) {
      idx.push_back(i);
    }
    const auto features = gather_features<float>(data, idx);
    ModelStepper<float> stepper(model, features);
    DecodeConfig cfg = decode;
    cfg.seed = derive_seed(decode.seed, start);
    for (auto& h : decode_all(stepper, cfg)) {
      out.push_back(std::move(h));
    }
  }
  return out;
}

std::vector<Tokens> caption_split(const CaptionModel<float>& model, const Dataset& data, const Vocab& vocab,
                                  const DecodeConfig& decode, std::size_t chunk) {
  std::vector<Tokens> out;
  for (const auto& h : decode_split(model, data, decode, chunk)) {
    out.push_back(vocab.decode(h.tokens));
  }
  return out;
}

ScoreReport evaluate_split(const CaptionModel<float>& model, const Dataset& data, const Vocab& vocab,
                           const DecodeConfig& decode) {
  const auto captions = caption_split(model, data, vocab, decode);
  EvalCorpus corpus;
  for (std::size_t i = 0; i < data.size(); ++i) {
    corpus.push_back({data.ids[i], captions[i], data.references[i]});
  }
  return evaluate(corpus);
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "epoch-%03zu.mtck", epoch);
  return dir / buf;
}

void save_training_checkpoint(const std::filesystem::path& path, const CaptionModel<float>& model,
                              const Adam<float>& adam, std::size_t epoch) {
  auto tensors = parameter_tensors(model.parameters());
  for (auto& t : adam.state()) {
    tensors.push_back(std::move(t));
  }
  tensors.push_back({"train.epoch", Tensor<float>(1, 1, static_cast<float>(epoch))});
  write_checkpoint(path, tensors);
}

std::size_t load_training_checkpoint(const std::filesystem::path& path, CaptionModel<float>& model,
                                     Adam<float>* adam) {
  const auto tensors = read_checkpoint(path);
  assign_parameters(tensors, model.parameters());
  std::size_t epoch = 0;
  bool has_adam = false;
  for (const auto& t : tensors) {
    if (t.name == "train.epoch") {
      epoch = static_cast<std::size_t>(std::llround(t.value[0]));
    }
    has_adam = has_adam || t.name == "adam.step";
  }
  if (adam != nullptr && has_adam) {
    adam->load_state(tensors, model.parameters());
  }
  return epoch;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorCode::kIo, "write failed for " + path.string());
}

// Metric rows of an earlier run up to and including `last_epoch`.
std::string previous_rows(const std::filesystem::path& csv, std::size_t last_epoch) {
  std::ifstream in(csv);
  if (!in.good()) {
    return {};
  }
  std::string line;
  std::string kept;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      continue;
    }
    const std::size_t epoch = std::stoul(line.substr(0, comma));
    if (epoch <= last_epoch) {
      kept += line + "\n";
    }
  }
  return kept;
}

}  // namespace

TrainResult train(CaptionModel<float>& model, const Dataset& train_data, const Dataset& val_data, const Vocab& vocab,
                  const TrainConfig& cfg, const TrainOptions& options) {
  cfg.validate();
  require(train_data.size() > 0, ErrorCode::kInvalidArgument, "training split is empty");
  require(val_data.size() > 0, ErrorCode::kInvalidArgument, "validation split is empty");
  const auto t0 = std::chrono::steady_clock::now();
  Adam<float> adam(cfg);
  std::size_t start = 1;
  if (options.resume) {
    start = load_training_checkpoint(*options.resume, model, &adam) + 1;
  }
  const bool persist = !options.out_dir.empty();
  std::string csv = metric_csv_header();
  if (persist) {
    std::error_code ec;
    std::filesystem::create_directories(options.out_dir, ec);
    require(!ec, ErrorCode::kIo, "cannot create " + options.out_dir.string() + ": " + ec.message());
    if (options.resume) {
      csv += previous_rows(options.out_dir / "metrics.csv", start - 1);
    }
  }
  std::optional<RewardFunction> reward;
  const std::size_t total = cfg.xe_epochs + cfg.scst_epochs;
  Parameter<float>* embedding = model.parameters().find("dec.embed");
  TrainResult result;
  DecodeConfig greedy;
  for (std::size_t epoch = start; epoch <= total; ++epoch) {
    const Stage stage = epoch <= cfg.xe_epochs ? Stage::kXe : Stage::kScst;
    if (embedding != nullptr) {
      embedding->frozen = stage == Stage::kXe ? cfg.freeze_embeddings_xe : cfg.freeze_embeddings_scst;
    }
    if (stage == Stage::kScst && !reward) {
      reward.emplace(cfg.reward, train_data.references);
    }
    const double lr = lr_at_epoch(epoch, cfg);
    const auto plans = make_batches(train_data, vocab, cfg.batch_size, model.config().max_len, cfg.seed, epoch);
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < plans.size(); ++s) {
      const BatchPlan& plan = plans[s];
      const auto features = gather_features<float>(train_data, plan.images);
      if (stage == Stage::kXe) {
        Tape<float> tape(derive_seed(cfg.seed, epoch, s));
        tape.set_training(true);
        Var<float> logits = model.decode_train(tape, features, plan.captions.inputs);
        const auto mask = plan.captions.target_mask();
        Var<float> loss = xe_loss(logits, plan.captions.targets, mask);
        model.parameters().zero_grad();
        tape.backward(loss);
        adam.step(model.parameters(), lr);
        loss_sum += static_cast<double>(loss.value()(0, 0));
      } else {
        std::vector<const std::vector<Tokens>*> refs;
        for (std::size_t i : plan.images) {
          refs.push_back(&train_data.references[i]);
        }
        Rng rng(derive_seed(cfg.seed, epoch, s + 0x5c57));
        const ScstStats st = scst_step(model, adam, features, refs, vocab, *reward, lr, rng);
        loss_sum += st.loss;
      }
    }
    const ScoreReport report = evaluate_split(model, val_data, vocab, greedy);
    EpochLog log;
    log.epoch = epoch;
    log.stage = stage;
    log.lr = lr;
    log.train_loss = loss_sum / static_cast<double>(plans.size());
    log.val_bleu1 = report.bleu[0];
    log.val_bleu4 = report.bleu[3];
    log.val_rouge_l = report.rouge_l;
    log.val_cider = report.cider;
    if (cfg.log_wallclock) {
      log.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    result.log.push_back(log);
    if (persist) {
      csv += metric_csv_row(log);
      write_file(options.out_dir / "metrics.csv", csv);
      result.last_checkpoint = checkpoint_path(options.out_dir, epoch);
      save_training_checkpoint(result.last_checkpoint, model, adam, epoch);
    }
    if (options.on_epoch) {
      options.on_epoch(log);
    }
  }
  return result;
}

template Var<float> xe_loss(const Var<float>&, const TokenMatrix&, std::span<const std::uint8_t>);
template Var<double> xe_loss(const Var<double>&, const TokenMatrix&, std::span<const std::uint8_t>);
template Var<float> policy_gradient_loss(const Var<float>&, const TokenMatrix&, std::span<const std::uint8_t>,
                                         std::span<const double>);
template Var<double> policy_gradient_loss(const Var<double>&, const TokenMatrix&, std::span<const std::uint8_t>,
                                          std::span<const double>);
template class Adam<float>;
template class Adam<double>;

}  // namespace mtcap
