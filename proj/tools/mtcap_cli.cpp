// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end over the C API.

#include <cstdio>
#include <cstdlib>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "CLI11.hpp"
#include "mtcap/mtcap.h"

namespace {

struct Failure {
  mtcap_status status;
};

void check(mtcap_status s) {
  if (s != MTCAP_OK) {
    throw Failure{s};
  }
}

class Config {
 public:
  Config() = default;
  Config(const Config&) = delete;
  Config& operator=(const Config&) = delete;
  ~Config() { mtcap_config_free(cfg_); }

  // profile -> file -> MTCAP_SEED -> --set and typed flags
  void load(const std::string& profile, const std::string& file) {
    const char* p = profile.empty() ? nullptr : profile.c_str();
    check(file.empty() ? mtcap_config_new(p, &cfg_) : mtcap_config_load(file.c_str(), p, &cfg_));
    if (const char* env = std::getenv("MTCAP_SEED"); env != nullptr && *env != '\0') {
      set("seed", env);
    }
  }
  void set(const std::string& key, const std::string& value) { check(mtcap_config_set(cfg_, key.c_str(), value.c_str())); }
  void validate() const { check(mtcap_config_validate(cfg_)); }
  mtcap_config* get() const { return cfg_; }

 private:
  mtcap_config* cfg_ = nullptr;
};

class Model {
 public:
  Model(const Config& cfg, const std::string& checkpoint) {
    check(mtcap_model_load(cfg.get(), checkpoint.c_str(), &model_));
  }
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  ~Model() { mtcap_model_free(model_); }
  const mtcap_model* get() const { return model_; }

 private:
  mtcap_model* model_ = nullptr;
};

void print_owned(char* s) {
  if (s != nullptr) {
    std::fputs(s, stdout);
    mtcap_string_free(s);
  }
}

struct Common {
  std::string profile;
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = false) {
  cmd->add_option("--profile", c.profile, "Base profile (desk or paper)");
  auto* opt = cmd->add_option("--config", c.config, "JSON run config");
  if (config_required) {
    opt->required();
  }
  cmd->add_option("--set", c.sets, "Override a field, e.g. train.xe_epochs=3")->take_all();
  cmd->add_option("--seed", c.seed, "Seed for model init, training and sampling");
}

void resolve(Config& cfg, const Common& c) {
  cfg.load(c.profile, c.config);
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      throw CLI::ValidationError("--set", "expected key=value, got '" + s + "'");
    }
    cfg.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.seed) {
    cfg.set("seed", std::to_string(*c.seed));
  }
}

// Strings go through as JSON string literals so that "1" stays a string.
void set_string(Config& cfg, const char* key, const std::string& v) {
  std::string quoted = "\"";
  for (char c : v) {
    if (c == '"' || c == '\\') {
      quoted += '\\';
    }
    quoted += c;
  }
  quoted += '"';
  cfg.set(key, quoted);
}

template <typename V>
void set_if(Config& cfg, const char* key, const std::optional<V>& v) {
  if (!v) {
    return;
  }
  if constexpr (std::is_same_v<V, std::string>) {
    set_string(cfg, key, *v);
  } else {
    cfg.set(key, std::to_string(*v));
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mtcap: multi-view transformer captioning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(mtcap_version()));

  Common common;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset");
  add_common(gen, common);
  std::optional<std::string> gen_out, gen_preset;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--out", gen_out, "Dataset directory");
  gen->add_option("--preset", gen_preset, "Dataset preset (default, noisy or tiny)");
  gen->add_option("--data-seed", gen_seed, "Dataset seed");

  auto* voc = app.add_subcommand("build-vocab", "Build the vocabulary from training references");
  add_common(voc, common);
  std::optional<std::string> voc_data, voc_out;
  std::optional<std::size_t> voc_min;
  voc->add_option("--data", voc_data, "Dataset directory");
  voc->add_option("--out", voc_out, "Vocabulary file");
  voc->add_option("--min-count", voc_min, "Minimum token count");

  auto* tr = app.add_subcommand("train", "Train a captioning model");
  add_common(tr, common);
  std::optional<std::string> tr_data, tr_out, tr_vocab, tr_encoder;
  std::optional<std::size_t> tr_xe, tr_scst, tr_views;
  std::string tr_resume;
  bool tr_strict = false;
  tr->add_option("--data", tr_data, "Dataset directory");
  tr->add_option("--out", tr_out, "Run directory for checkpoints and metrics.csv");
  tr->add_option("--vocab", tr_vocab, "Vocabulary file");
  tr->add_option("--encoder", tr_encoder, "sv, amv or umv");
  tr->add_option("--views", tr_views, "Number of dataset views to use");
  tr->add_option("--xe-epochs", tr_xe, "Cross-entropy epochs");
  tr->add_option("--scst-epochs", tr_scst, "Self-critical epochs");
  tr->add_option("--resume", tr_resume, "Checkpoint to resume from");
  tr->add_flag("--strict-ablation", tr_strict, "Restrict the block count to 1, 2, 4, 6 or 8");

  auto* cap = app.add_subcommand("caption", "Caption every .fvs file of a directory");
  Common cap_common;
  add_common(cap, cap_common, true);
  std::string cap_ckpt, cap_features, cap_out;
  std::optional<std::string> cap_mode;
  std::optional<std::size_t> cap_beam, cap_len;
  std::optional<double> cap_alpha;
  cap->add_option("--checkpoint", cap_ckpt, "Model checkpoint")->required();
  cap->add_option("--features", cap_features, "Directory of .fvs files")->required();
  cap->add_option("--out", cap_out, "Captions JSONL")->required();
  cap->add_option("--mode", cap_mode, "greedy, sample or beam");
  cap->add_option("--beam", cap_beam, "Beam width");
  cap->add_option("--alpha", cap_alpha, "Length normalization exponent");
  cap->add_option("--max-len", cap_len, "Maximum caption length");

  auto* ev = app.add_subcommand("eval", "Score candidate captions");
  std::string ev_cand, ev_refs, ev_out;
  bool ev_per_image = false;
  ev->add_option("--candidates", ev_cand, "Candidates JSONL {id, caption}")->required();
  ev->add_option("--references", ev_refs, "References JSONL {id, captions}")->required();
  ev->add_option("--out", ev_out, "Report JSON");
  ev->add_flag("--per-image", ev_per_image, "Include per-image CIDEr");

  auto* ins = app.add_subcommand("inspect-attn", "Dump attention maps for one image");
  Common ins_common;
  add_common(ins, ins_common, true);
  std::string ins_ckpt, ins_features, ins_out, ins_blocks, ins_heads, ins_roles;
  ins->add_option("--checkpoint", ins_ckpt, "Model checkpoint")->required();
  ins->add_option("--features", ins_features, "One .fvs file")->required();
  ins->add_option("--out", ins_out, "Attention JSONL (stdout when omitted)");
  ins->add_option("--blocks", ins_blocks, "Comma-separated 1-based blocks");
  ins->add_option("--heads", ins_heads, "Comma-separated 0-based heads");
  ins->add_option("--roles", ins_roles, "Comma-separated roles: enc-SA, dec-SA, dec-GA, umv-GA");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed()) {
      Config cfg;
      resolve(cfg, common);
      set_if(cfg, "data_dir", gen_out);
      set_if(cfg, "data.preset", gen_preset);
      set_if(cfg, "data.seed", gen_seed);
      cfg.validate();
      char* summary = nullptr;
      check(mtcap_gen_data(cfg.get(), &summary));
      print_owned(summary);
    } else if (voc->parsed()) {
      Config cfg;
      resolve(cfg, common);
      set_if(cfg, "data_dir", voc_data);
      set_if(cfg, "vocab", voc_out);
      set_if(cfg, "vocab_min_count", voc_min);
      cfg.validate();
      char* summary = nullptr;
      check(mtcap_build_vocab(cfg.get(), &summary));
      print_owned(summary);
    } else if (tr->parsed()) {
      Config cfg;
      resolve(cfg, common);
      set_if(cfg, "data_dir", tr_data);
      set_if(cfg, "out_dir", tr_out);
      set_if(cfg, "vocab", tr_vocab);
      set_if(cfg, "model.encoder", tr_encoder);
      set_if(cfg, "num_views", tr_views);
      set_if(cfg, "train.xe_epochs", tr_xe);
      set_if(cfg, "train.scst_epochs", tr_scst);
      if (tr_strict) {
        cfg.set("strict_ablation", "true");
      }
      cfg.validate();
      auto on_epoch = [](const mtcap_epoch_info* e, void*) {
        std::printf("epoch %zu %s lr=%.6g loss=%.6f val_bleu1=%.4f val_bleu4=%.4f val_rougeL=%.4f val_cider=%.4f\n",
                    e->epoch, e->stage, e->lr, e->train_loss, e->val_bleu1, e->val_bleu4, e->val_rouge_l,
                    e->val_cider);
        std::fflush(stdout);
      };
      check(mtcap_train(cfg.get(), tr_resume.empty() ? nullptr : tr_resume.c_str(), on_epoch, nullptr));
    } else if (cap->parsed()) {
      Config cfg;
      resolve(cfg, cap_common);
      set_if(cfg, "decode.mode", cap_mode);
      set_if(cfg, "decode.beam", cap_beam);
      set_if(cfg, "decode.alpha", cap_alpha);
      set_if(cfg, "decode.max_len", cap_len);
      cfg.validate();
      Model model(cfg, cap_ckpt);
      std::size_t count = 0;
      check(mtcap_caption(model.get(), cfg.get(), cap_features.c_str(), cap_out.c_str(), &count));
      std::printf("captioned %zu images into %s\n", count, cap_out.c_str());
    } else if (ev->parsed()) {
      char* report = nullptr;
      check(mtcap_eval(ev_cand.c_str(), ev_refs.c_str(), ev_per_image ? 1 : 0,
                       ev_out.empty() ? nullptr : ev_out.c_str(), &report));
      print_owned(report);
    } else if (ins->parsed()) {
      Config cfg;
      resolve(cfg, ins_common);
      Model model(cfg, ins_ckpt);
      char* text = nullptr;
      check(mtcap_inspect_attn(model.get(), ins_features.c_str(), ins_blocks.c_str(), ins_heads.c_str(),
                               ins_roles.c_str(), ins_out.empty() ? nullptr : ins_out.c_str(),
                               ins_out.empty() ? &text : nullptr));
      print_owned(text);
    }
  } catch (const Failure& f) {
    std::fprintf(stderr, "mtcap: %s error: %s\n", mtcap_status_name(f.status), mtcap_last_error());
    return static_cast<int>(f.status);
  } catch (const CLI::Error& e) {
    return app.exit(e);
  }
  return 0;
}
