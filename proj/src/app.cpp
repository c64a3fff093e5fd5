// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/app.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mtcap/io.hpp"

namespace mtcap {

using nlohmann::json;
using nlohmann::ordered_json;

RunConfig profile_config(std::string_view name) {
  RunConfig c;
  c.profile = std::string(name);
  if (name == "paper") {
    c.data = GenConfig::preset_config("default");
    c.model.layers = 6;
    c.model.model_dim = 512;
    c.model.heads = 8;
    c.model.ffn_dim = 2048;
    c.model.embed_dim = 300;
    c.model.max_len = 16;
    c.model.view_dims.clear();
    return c;
  }
  if (name == "desk") {
    c.data = GenConfig::preset_config("tiny");
    c.model.layers = 2;
    c.model.model_dim = 64;
    c.model.heads = 4;
    c.model.ffn_dim = 256;
    c.model.embed_dim = 64;
    c.model.max_len = 12;
    c.model.view_dims.clear();
    return c;
  }
  fail(ErrorCode::kConfig, "unknown profile '" + std::string(name) + "' (expected paper or desk)");
}

namespace {

template <typename V>
void read_field(const json& j, const char* section, const char* key, V& dst) {
  if (!j.contains(key)) {
    return;
  }
  try {
    dst = j.at(key).get<V>();
  } catch (const json::exception&) {
    fail(ErrorCode::kConfig, std::string("field '") + section + key + "' has the wrong type");
  }
}

void read_path(const json& j, const char* key, std::filesystem::path& dst) {
  std::string s = dst.string();
  read_field(j, "", key, s);
  dst = s;
}

void check_keys(const json& j, const char* section, const std::set<std::string>& known) {
  require(j.is_object(), ErrorCode::kConfig, std::string("section '") + section + "' must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    require(known.contains(key), ErrorCode::kConfig, std::string("unknown config field '") + section + key + "'");
  }
}

ordered_json model_json(const ModelConfig& m) {
  ordered_json j;
  j["encoder"] = encoder_name(m.encoder);
  j["temporal"] = temporal_name(m.temporal);
  j["layers"] = m.layers;
  j["model_dim"] = m.model_dim;
  j["heads"] = m.heads;
  j["ffn_dim"] = m.ffn_dim;
  j["view_dims"] = m.view_dims;
  j["primary_view"] = m.primary_view;
  j["embed_dim"] = m.embed_dim;
  j["vocab_size"] = m.vocab_size;
  j["max_len"] = m.max_len;
  j["dropout"] = m.dropout;
  j["attention_dropout"] = m.attention_dropout;
  j["residual_dropout"] = m.residual_dropout;
  j["use_bias"] = m.use_bias;
  j["scale_by_model_dim"] = m.scale_by_model_dim;
  j["layer_norm_eps"] = m.layer_norm_eps;
  return j;
}

void parse_model(const json& j, ModelConfig& m) {
  check_keys(j, "model.",
             {"encoder", "temporal", "layers", "model_dim", "heads", "ffn_dim", "view_dims", "primary_view",
              "embed_dim", "vocab_size", "max_len", "dropout", "attention_dropout", "residual_dropout", "use_bias",
              "scale_by_model_dim", "layer_norm_eps"});
  const char* s = "model.";
  std::string name = std::string(encoder_name(m.encoder));
  read_field(j, s, "encoder", name);
  m.encoder = parse_encoder(name);
  name = std::string(temporal_name(m.temporal));
  read_field(j, s, "temporal", name);
  m.temporal = parse_temporal(name);
  read_field(j, s, "layers", m.layers);
  read_field(j, s, "model_dim", m.model_dim);
  read_field(j, s, "heads", m.heads);
  read_field(j, s, "ffn_dim", m.ffn_dim);
  read_field(j, s, "view_dims", m.view_dims);
  read_field(j, s, "primary_view", m.primary_view);
  read_field(j, s, "embed_dim", m.embed_dim);
  read_field(j, s, "vocab_size", m.vocab_size);
  read_field(j, s, "max_len", m.max_len);
  read_field(j, s, "dropout", m.dropout);
  read_field(j, s, "attention_dropout", m.attention_dropout);
  read_field(j, s, "residual_dropout", m.residual_dropout);
  read_field(j, s, "use_bias", m.use_bias);
  read_field(j, s, "scale_by_model_dim", m.scale_by_model_dim);
  read_field(j, s, "layer_norm_eps", m.layer_norm_eps);
}

ordered_json train_json(const TrainConfig& t) {
  ordered_json j;
  j["batch_size"] = t.batch_size;
  j["xe_epochs"] = t.xe_epochs;
  j["scst_epochs"] = t.scst_epochs;
  j["lr_slope"] = t.lr_slope;
  j["lr_cap"] = t.lr_cap;
  j["decay_after"] = t.decay_after;
  j["decay_every"] = t.decay_every;
  j["decay_factor"] = t.decay_factor;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["adam_eps"] = t.adam_eps;
  j["clip_norm"] = t.clip_norm;
  j["reward"] = reward_name(t.reward);
  j["freeze_embeddings_xe"] = t.freeze_embeddings_xe;
  j["freeze_embeddings_scst"] = t.freeze_embeddings_scst;
  j["log_wallclock"] = t.log_wallclock;
  return j;
}

void parse_train(const json& j, TrainConfig& t) {
  check_keys(j, "train.",
             {"batch_size", "xe_epochs", "scst_epochs", "lr_slope", "lr_cap", "decay_after", "decay_every",
              "decay_factor", "beta1", "beta2", "adam_eps", "clip_norm", "reward", "freeze_embeddings_xe",
              "freeze_embeddings_scst", "log_wallclock"});
  const char* s = "train.";
  read_field(j, s, "batch_size", t.batch_size);
  read_field(j, s, "xe_epochs", t.xe_epochs);
  read_field(j, s, "scst_epochs", t.scst_epochs);
  read_field(j, s, "lr_slope", t.lr_slope);
  read_field(j, s, "lr_cap", t.lr_cap);
  read_field(j, s, "decay_after", t.decay_after);
  read_field(j, s, "decay_every", t.decay_every);
  read_field(j, s, "decay_factor", t.decay_factor);
  read_field(j, s, "beta1", t.beta1);
  read_field(j, s, "beta2", t.beta2);
  read_field(j, s, "adam_eps", t.adam_eps);
  read_field(j, s, "clip_norm", t.clip_norm);
  std::string reward = std::string(reward_name(t.reward));
  read_field(j, s, "reward", reward);
  t.reward = parse_reward(reward);
  read_field(j, s, "freeze_embeddings_xe", t.freeze_embeddings_xe);
  read_field(j, s, "freeze_embeddings_scst", t.freeze_embeddings_scst);
  read_field(j, s, "log_wallclock", t.log_wallclock);
}

ordered_json decode_json(const DecodeConfig& d) {
  ordered_json j;
  j["mode"] = decode_mode_name(d.mode);
  j["max_len"] = d.max_len;
  j["beam"] = d.beam;
  j["alpha"] = d.alpha;
  return j;
}

void parse_decode(const json& j, DecodeConfig& d) {
  check_keys(j, "decode.", {"mode", "max_len", "beam", "alpha"});
  const char* s = "decode.";
  std::string mode = std::string(decode_mode_name(d.mode));
  read_field(j, s, "mode", mode);
  d.mode = parse_decode_mode(mode);
  read_field(j, s, "max_len", d.max_len);
  read_field(j, s, "beam", d.beam);
  read_field(j, s, "alpha", d.alpha);
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  j["profile"] = c.profile;
  j["seed"] = c.seed;
  j["data_dir"] = c.data_dir.string();
  j["out_dir"] = c.out_dir.string();
  j["vocab"] = c.vocab_path().string();
  j["vocab_min_count"] = c.vocab_min_count;
  j["num_views"] = c.num_views;
  j["strict_ablation"] = c.strict_ablation;
  j["data"] = ordered_json::parse(gen_config_json(c.data));
  j["model"] = model_json(c.model);
  j["train"] = train_json(c.train);
  j["decode"] = decode_json(c.decode);
  return j;
}

RunConfig from_json(const json& j, const RunConfig& base) {
  require(j.is_object(), ErrorCode::kConfig, "run config must be a JSON object");
  RunConfig c = base;
  if (j.contains("profile")) {
    std::string profile;
    read_field(j, "", "profile", profile);
    c = profile_config(profile);
  }
  check_keys(j, "",
             {"profile", "seed", "data_dir", "out_dir", "vocab", "vocab_min_count", "num_views", "strict_ablation",
              "data", "model", "train", "decode"});
  read_field(j, "", "seed", c.seed);
  read_path(j, "data_dir", c.data_dir);
  read_path(j, "out_dir", c.out_dir);
  read_path(j, "vocab", c.vocab);
  read_field(j, "", "vocab_min_count", c.vocab_min_count);
  read_field(j, "", "num_views", c.num_views);
  read_field(j, "", "strict_ablation", c.strict_ablation);
  if (j.contains("data")) {
    require(j["data"].is_object(), ErrorCode::kConfig, "section 'data.' must be a JSON object");
    c.data = parse_gen_config(j["data"].dump(), c.data);
  }
  if (j.contains("model")) {
    parse_model(j["model"], c.model);
  }
  if (j.contains("train")) {
    parse_train(j["train"], c.train);
  }
  if (j.contains("decode")) {
    parse_decode(j["decode"], c.decode);
  }
  c.train.seed = c.seed;
  c.decode.seed = c.seed;
  return c;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_echo_path(const std::filesystem::path& output) { return output.string() + ".config.json"; }

void ensure_dir(const std::filesystem::path& dir) {
  if (dir.empty()) {
    return;
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  require(!ec, ErrorCode::kIo, "cannot create " + dir.string() + ": " + ec.message());
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text, const RunConfig& base) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kConfig, std::string("run config is not valid JSON: ") + e.what());
  }
  return from_json(j, base);
}

RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base) {
  try {
    return parse_run_config(read_text(path), base);
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

std::string run_config_json(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.train.seed = c.seed;
  c.decode.seed = c.seed;
  return to_json(c).dump(2) + "\n";
}

void apply_override(RunConfig& cfg, std::string_view key, std::string_view value) {
  require(!key.empty(), ErrorCode::kConfig, "empty override key");
  json v;
  try {
    v = json::parse(value);
  } catch (const json::exception&) {
    v = std::string(value);
  }
  json patch = json::object();
  json* node = &patch;
  std::string_view rest = key;
  while (true) {
    const auto dot = rest.find('.');
    const std::string part(rest.substr(0, dot));
    require(!part.empty(), ErrorCode::kConfig, "malformed override key '" + std::string(key) + "'");
    if (dot == std::string_view::npos) {
      (*node)[part] = v;
      break;
    }
    node = &(*node)[part];
    rest = rest.substr(dot + 1);
  }
  // A profile override restarts from the profile; everything else patches.
  cfg = from_json(patch, cfg);
}

void validate_run_config(const RunConfig& cfg) {
  std::string problems;
  auto complain = [&](const std::string& m) { problems += (problems.empty() ? "" : "; ") + m; };
  const auto collect = [&](auto&& check) {
    try {
      check();
    } catch (const Error& e) {
      complain(e.what());
    }
  };
  if (cfg.vocab_min_count < 1) complain("vocab_min_count must be >= 1");
  if (cfg.strict_ablation &&
      std::find(std::begin(kAblationLayers), std::end(kAblationLayers), cfg.model.layers) == std::end(kAblationLayers)) {
    complain("model.layers = " + std::to_string(cfg.model.layers) + " is outside the ablation set {1, 2, 4, 6, 8}");
  }
  if (cfg.model.encoder == EncoderKind::kSingleView && cfg.num_views != 0 && cfg.num_views <= cfg.model.primary_view) {
    complain("num_views must exceed model.primary_view");
  }
  if (cfg.model.encoder != EncoderKind::kSingleView && cfg.num_views == 1) {
    complain(std::string(encoder_name(cfg.model.encoder)) + " needs at least 2 views");
  }
  collect([&] { cfg.data.validate(); });
  collect([&] { cfg.train.validate(); });
  collect([&] { cfg.decode.validate(); });
  collect([&] {
    // Data-dependent fields get placeholders so the remaining checks still run.
    ModelConfig m = cfg.model;
    if (m.view_dims.empty()) m.view_dims.assign(std::max<std::size_t>({cfg.num_views, m.primary_view + 1, 2}), 1);
    if (m.vocab_size == 0) m.vocab_size = 5;
    m.validate();
  });
  if (cfg.decode.max_len > cfg.model.max_len) {
    complain("decode.max_len exceeds model.max_len");
  }
  if (!problems.empty()) {
    fail(ErrorCode::kConfig, "invalid run config: " + problems);
  }
}

std::size_t resolve_views(const RunConfig& cfg, const Dataset& data) {
  if (cfg.model.encoder == EncoderKind::kAlignedMultiView) {
    require(data.aligned, ErrorCode::kConfig,
            "encoder amv requires an aligned dataset; split '" + data.split + "' is unaligned");
  }
  const std::size_t available = data.view_dims.size();
  std::size_t views = cfg.num_views;
  if (views == 0) {
    views = cfg.model.encoder == EncoderKind::kSingleView ? cfg.model.primary_view + 1 : available;
  }
  require(views <= available, ErrorCode::kConfig,
          "config asks for " + std::to_string(views) + " views but the dataset has " + std::to_string(available));
  require(cfg.model.primary_view < views, ErrorCode::kConfig, "model.primary_view is not among the used views");
  return views;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorCode::kIo, "write failed for " + path.string());
}

GenDataResult cmd_gen_data(const RunConfig& cfg) {
  cfg.data.validate();
  ensure_dir(cfg.data_dir);
  GenDataResult r;
  r.splits = generate_dataset(cfg.data, cfg.data_dir);
  write_text_file(cfg.data_dir / "gen-data.config.json", run_config_json(cfg));
  return r;
}

VocabResult cmd_build_vocab(const RunConfig& cfg) {
  require(cfg.vocab_min_count >= 1, ErrorCode::kConfig, "vocab_min_count must be >= 1");
  const Dataset train = load_split(cfg.data_dir, "train");
  const auto captions = all_references(train);
  VocabResult r;
  r.captions = captions.size();
  const Vocab vocab = Vocab::build(captions, cfg.vocab_min_count);
  r.size = vocab.size();
  r.path = cfg.vocab_path();
  ensure_dir(r.path.parent_path());
  vocab.save(r.path);
  write_text_file(config_echo_path(r.path), run_config_json(cfg));
  return r;
}

namespace {

Vocab load_vocab(const RunConfig& cfg) {
  const auto path = cfg.vocab_path();
  require(std::filesystem::exists(path), ErrorCode::kIo,
          "vocabulary " + path.string() + " not found (run build-vocab first)");
  return Vocab::load(path);
}

}  // namespace

TrainResult cmd_train(const RunConfig& config, const TrainCommandOptions& options) {
  RunConfig cfg = config;
  cfg.train.seed = cfg.seed;
  cfg.decode.seed = cfg.seed;
  validate_run_config(cfg);
  Dataset train = load_split(cfg.data_dir, "train");
  Dataset val = load_split(cfg.data_dir, "val");
  const std::size_t views = resolve_views(cfg, train);
  train = select_views(std::move(train), views);
  val = select_views(std::move(val), views);
  const Vocab vocab = load_vocab(cfg);
  cfg.num_views = views;
  cfg.model.view_dims = train.view_dims;
  cfg.model.vocab_size = vocab.size();
  cfg.model.validate();
  if (options.resume) {
    require(std::filesystem::exists(*options.resume), ErrorCode::kIo,
            "checkpoint " + options.resume->string() + " not found");
  }
  ensure_dir(cfg.out_dir);
  write_text_file(cfg.out_dir / "config.json", run_config_json(cfg));
  CaptionModel<float> model(cfg.model, cfg.seed);
  TrainOptions opts;
  opts.out_dir = cfg.out_dir;
  opts.resume = options.resume;
  opts.on_epoch = options.on_epoch;
  return mtcap::train(model, train, val, vocab, cfg.train, opts);
}

LoadedModel load_model(const RunConfig& cfg, const std::filesystem::path& checkpoint) {
  require(!cfg.model.view_dims.empty() && cfg.model.vocab_size > 0, ErrorCode::kConfig,
          "config lacks model.view_dims or model.vocab_size; use the config.json written by train");
  LoadedModel m;
  m.config = cfg;
  m.vocab = load_vocab(cfg);
  require(m.vocab.size() == cfg.model.vocab_size, ErrorCode::kConfig,
          "vocabulary " + cfg.vocab_path().string() + " has " + std::to_string(m.vocab.size()) +
              " tokens but the model expects " + std::to_string(cfg.model.vocab_size));
  m.model = std::make_unique<CaptionModel<float>>(cfg.model, cfg.seed);
  load_training_checkpoint(checkpoint, *m.model, nullptr);
  return m;
}

Dataset read_feature_dir(const std::filesystem::path& dir, const ModelConfig& model) {
  require(std::filesystem::is_directory(dir), ErrorCode::kIo, "feature directory " + dir.string() + " not found");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".fvs") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.stem().string() < b.stem().string(); });
  Dataset d;
  d.split = dir.filename().string();
  d.aligned = model.encoder == EncoderKind::kAlignedMultiView;
  d.view_dims = model.view_dims;
  for (const auto& file : files) {
    FeatureViews f = read_features(file);
    require(f.num_views() >= model.view_dims.size(), ErrorCode::kDimension,
            file.string() + ": has " + std::to_string(f.num_views()) + " views, the model uses " +
                std::to_string(model.view_dims.size()));
    f.views.resize(model.view_dims.size());
    for (std::size_t v = 0; v < f.views.size(); ++v) {
      require(f.views[v].cols() == model.view_dims[v], ErrorCode::kDimension,
              file.string() + ": view " + std::to_string(v) + " has width " + std::to_string(f.views[v].cols()) +
                  ", the model expects " + std::to_string(model.view_dims[v]));
    }
    f.aligned = d.aligned;
    try {
      f.validate();
    } catch (const Error& e) {
      fail(e.code(), file.string() + ": " + e.what());
    }
    d.ids.push_back(file.stem().string());
    d.features.push_back(std::move(f));
    d.references.emplace_back();
  }
  return d;
}

std::string captions_jsonl(const std::vector<CaptionLine>& lines) {
  std::string out;
  for (const auto& l : lines) {
    ordered_json j;
    j["id"] = l.id;
    j["caption"] = l.caption;
    j["score"] = l.score;
    j["tokens"] = l.tokens;
    j["mode"] = decode_mode_name(l.mode);
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<CaptionLine> cmd_caption(const LoadedModel& model, const std::filesystem::path& features_dir,
                                     const DecodeConfig& decode, const std::filesystem::path& out_jsonl) {
  decode.validate();
  const Dataset data = read_feature_dir(features_dir, model.config.model);
  std::vector<CaptionLine> lines;
  if (data.size() > 0) {
    const auto hyps = decode_split(*model.model, data, decode);
    for (std::size_t i = 0; i < data.size(); ++i) {
      lines.push_back({data.ids[i], join_tokens(model.vocab.decode(hyps[i].tokens)),
                       ranking_score(hyps[i], decode.alpha), hyps[i].tokens, decode.mode});
    }
  }
  if (!out_jsonl.empty()) {
    write_text_file(out_jsonl, captions_jsonl(lines));
    RunConfig echo = model.config;
    echo.decode = decode;
    write_text_file(config_echo_path(out_jsonl), run_config_json(echo));
  }
  return lines;
}

std::string cmd_eval(const std::filesystem::path& candidates, const std::filesystem::path& references,
                     bool per_image, const std::filesystem::path& out) {
  const auto corpus = make_corpus(read_candidates(candidates), read_references(references));
  const std::string report = score_report_json(evaluate(corpus), per_image) + "\n";
  if (!out.empty()) {
    write_text_file(out, report);
  }
  return report;
}

InspectResult cmd_inspect_attn(const LoadedModel& loaded, const std::filesystem::path& features,
                               const InspectSelection& selection) {
  const ModelConfig& mc = loaded.config.model;
  for (int b : selection.blocks) {
    require(b >= 1 && static_cast<std::size_t>(b) <= mc.layers, ErrorCode::kRange,
            "block selector " + std::to_string(b) + " outside [1, " + std::to_string(mc.layers) + "]");
  }
  for (int h : selection.heads) {
    require(h >= 0 && static_cast<std::size_t>(h) < mc.heads, ErrorCode::kRange,
            "head selector " + std::to_string(h) + " outside [0, " + std::to_string(mc.heads - 1) + "]");
  }
  FeatureViews f = read_features(features);
  require(f.num_views() >= mc.view_dims.size(), ErrorCode::kDimension,
          features.string() + ": has " + std::to_string(f.num_views()) + " views, the model uses " +
              std::to_string(mc.view_dims.size()));
  f.views.resize(mc.view_dims.size());
  for (std::size_t v = 0; v < f.views.size(); ++v) {
    require(f.views[v].cols() == mc.view_dims[v], ErrorCode::kDimension,
            features.string() + ": view " + std::to_string(v) + " has width " + std::to_string(f.views[v].cols()) +
                ", the model expects " + std::to_string(mc.view_dims[v]));
  }
  f.aligned = mc.encoder == EncoderKind::kAlignedMultiView;
  f.validate();
  const auto batch = FeatureBatch<float>::from_image(f);
  ModelStepper<float> stepper(*loaded.model, batch);
  const Hypothesis h = greedy_decode(stepper, 0).front();

  InspectResult r;
  r.id = features.stem().string();
  r.caption = join_tokens(loaded.vocab.decode(h.tokens));
  // Teacher-forced over <s> and the generated tokens, without the final one.
  const std::size_t len = std::max<std::size_t>(1, h.tokens.size());
  TokenMatrix inputs(1, len);
  inputs(0, 0) = Vocab::kBos;
  for (std::size_t t = 1; t < len; ++t) {
    inputs(0, t) = h.tokens[t - 1];
  }
  AttentionRecorder recorder;
  Tape<float> tape;
  tape.set_grad_enabled(false);
  loaded.model->decode_train(tape, batch, inputs, &recorder);
  for (auto& rec : recorder.records) {
    const bool block_ok = selection.blocks.empty() ||
                          std::find(selection.blocks.begin(), selection.blocks.end(), rec.block) != selection.blocks.end();
    const bool head_ok = selection.heads.empty() ||
                         std::find(selection.heads.begin(), selection.heads.end(), rec.head) != selection.heads.end();
    const bool role_ok = selection.roles.empty() ||
                         std::find(selection.roles.begin(), selection.roles.end(), rec.role) != selection.roles.end();
    if (block_ok && head_ok && role_ok) {
      r.records.push_back(std::move(rec));
    }
  }
  return r;
}

std::string inspect_jsonl(const InspectResult& result) {
  ordered_json head;
  head["id"] = result.id;
  head["caption"] = result.caption;
  std::string out = head.dump() + "\n";
  for (const auto& rec : result.records) {
    out += attention_record_json(rec) + "\n";
  }
  return out;
}

}  // namespace mtcap
