// Copyright 2026 The mtcap Authors
// SPDX-License-Identifier: Apache-2.0

#include "mtcap/mtcap.h"

#include <cstdlib>
#include <cstring>
#include <new>
#include <string>

#include "json.hpp"
#include "mtcap/app.hpp"

struct mtcap_config {
  mtcap::RunConfig value;
};

struct mtcap_model {
  mtcap::LoadedModel value;
};

namespace {

thread_local std::string g_last_error;

mtcap_status to_status(mtcap::ErrorCode code) {
  switch (code) {
    case mtcap::ErrorCode::kInvalidArgument:
      return MTCAP_ERR_INVALID_ARGUMENT;
    case mtcap::ErrorCode::kDimension:
      return MTCAP_ERR_DIMENSION;
    case mtcap::ErrorCode::kConfig:
      return MTCAP_ERR_CONFIG;
    case mtcap::ErrorCode::kIo:
      return MTCAP_ERR_IO;
    case mtcap::ErrorCode::kNumeric:
      return MTCAP_ERR_NUMERIC;
    case mtcap::ErrorCode::kRange:
      return MTCAP_ERR_RANGE;
    case mtcap::ErrorCode::kFormat:
      return MTCAP_ERR_FORMAT;
    case mtcap::ErrorCode::kInternal:
      return MTCAP_ERR_INTERNAL;
  }
  return MTCAP_ERR_INTERNAL;
}

template <typename F>
mtcap_status guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return MTCAP_OK;
  } catch (const mtcap::Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return MTCAP_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return MTCAP_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  mtcap::require(p != nullptr, mtcap::ErrorCode::kInvalidArgument, std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) {
    throw std::bad_alloc();
  }
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

std::vector<std::string> split_list(const char* text) {
  std::vector<std::string> out;
  if (text == nullptr) {
    return out;
  }
  std::string item;
  for (const char* p = text;; ++p) {
    if (*p == ',' || *p == '\0') {
      if (!item.empty()) {
        out.push_back(item);
      }
      item.clear();
      if (*p == '\0') {
        break;
      }
    } else if (*p != ' ') {
      item += *p;
    }
  }
  return out;
}

std::vector<int> parse_ints(const char* text, const char* what) {
  std::vector<int> out;
  for (const auto& s : split_list(text)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(s, &used));
      mtcap::require(used == s.size(), mtcap::ErrorCode::kConfig, "");
    } catch (const std::exception&) {
      mtcap::fail(mtcap::ErrorCode::kConfig, std::string(what) + " selector '" + s + "' is not an integer");
    }
  }
  return out;
}

}  // namespace

extern "C" {

const char* mtcap_version(void) { return "0.1.0"; }

const char* mtcap_status_name(mtcap_status status) {
  switch (status) {
    case MTCAP_OK:
      return "ok";
    case MTCAP_ERR_INVALID_ARGUMENT:
      return "invalid-argument";
    case MTCAP_ERR_DIMENSION:
      return "dimension";
    case MTCAP_ERR_CONFIG:
      return "config";
    case MTCAP_ERR_IO:
      return "io";
    case MTCAP_ERR_NUMERIC:
      return "numeric";
    case MTCAP_ERR_RANGE:
      return "range";
    case MTCAP_ERR_FORMAT:
      return "format";
    case MTCAP_ERR_INTERNAL:
      return "internal";
  }
  return "unknown";
}

const char* mtcap_last_error(void) { return g_last_error.c_str(); }

void mtcap_string_free(char* s) { std::free(s); }

mtcap_status mtcap_config_new(const char* profile, mtcap_config** out) {
  return guarded([&] {
    need(out, "out");
    *out = nullptr;
    auto cfg = std::make_unique<mtcap_config>();
    cfg->value = mtcap::profile_config(profile == nullptr ? "desk" : profile);
    *out = cfg.release();
  });
}

mtcap_status mtcap_config_load(const char* path, const char* profile, mtcap_config** out) {
  return guarded([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    auto cfg = std::make_unique<mtcap_config>();
    cfg->value = mtcap::load_run_config(path, mtcap::profile_config(profile == nullptr ? "desk" : profile));
    *out = cfg.release();
  });
}

mtcap_status mtcap_config_set(mtcap_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    need(cfg, "cfg");
    need(key, "key");
    need(value, "value");
    mtcap::apply_override(cfg->value, key, value);
  });
}

mtcap_status mtcap_config_validate(const mtcap_config* cfg) {
  return guarded([&] {
    need(cfg, "cfg");
    mtcap::validate_run_config(cfg->value);
  });
}

mtcap_status mtcap_config_to_json(const mtcap_config* cfg, char** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = dup_string(mtcap::run_config_json(cfg->value));
  });
}

void mtcap_config_free(mtcap_config* cfg) { delete cfg; }

mtcap_status mtcap_gen_data(const mtcap_config* cfg, char** summary_json) {
  return guarded([&] {
    need(cfg, "cfg");
    const auto result = mtcap::cmd_gen_data(cfg->value);
    if (summary_json != nullptr) {
      nlohmann::ordered_json j = nlohmann::ordered_json::array();
      for (const auto& s : result.splits) {
        j.push_back({{"split", s.split},
                     {"images", s.images},
                     {"objects", s.objects},
                     {"captions", s.captions},
                     {"regenerated_primary_views", s.regenerated}});
      }
      *summary_json = dup_string(j.dump(2) + "\n");
    }
  });
}

mtcap_status mtcap_build_vocab(const mtcap_config* cfg, char** summary_json) {
  return guarded([&] {
    need(cfg, "cfg");
    const auto r = mtcap::cmd_build_vocab(cfg->value);
    if (summary_json != nullptr) {
      nlohmann::ordered_json j;
      j["path"] = r.path.string();
      j["tokens"] = r.size;
      j["captions"] = r.captions;
      *summary_json = dup_string(j.dump(2) + "\n");
    }
  });
}

mtcap_status mtcap_train(const mtcap_config* cfg, const char* resume, mtcap_epoch_callback on_epoch, void* user) {
  return guarded([&] {
    need(cfg, "cfg");
    mtcap::TrainCommandOptions opts;
    if (resume != nullptr && *resume != '\0') {
      opts.resume = resume;
    }
    if (on_epoch != nullptr) {
      opts.on_epoch = [on_epoch, user](const mtcap::EpochLog& log) {
        const std::string stage(mtcap::stage_name(log.stage));
        mtcap_epoch_info info{log.epoch,      stage.c_str(), log.lr,          log.train_loss,
                              log.val_bleu1, log.val_bleu4, log.val_rouge_l, log.val_cider};
        on_epoch(&info, user);
      };
    }
    mtcap::cmd_train(cfg->value, opts);
  });
}

mtcap_status mtcap_model_load(const mtcap_config* cfg, const char* checkpoint, mtcap_model** out) {
  return guarded([&] {
    need(cfg, "cfg");
    need(checkpoint, "checkpoint");
    need(out, "out");
    *out = nullptr;
    auto m = std::make_unique<mtcap_model>();
    m->value = mtcap::load_model(cfg->value, checkpoint);
    *out = m.release();
  });
}

void mtcap_model_free(mtcap_model* model) { delete model; }

mtcap_status mtcap_caption(const mtcap_model* model, const mtcap_config* decode, const char* features_dir,
                           const char* out_path, size_t* count) {
  return guarded([&] {
    need(model, "model");
    need(features_dir, "features_dir");
    need(out_path, "out_path");
    const mtcap::DecodeConfig dc = decode != nullptr ? decode->value.decode : model->value.config.decode;
    mtcap::DecodeConfig resolved = dc;
    resolved.seed = decode != nullptr ? decode->value.seed : model->value.config.seed;
    const auto lines = mtcap::cmd_caption(model->value, features_dir, resolved, out_path);
    if (count != nullptr) {
      *count = lines.size();
    }
  });
}

mtcap_status mtcap_eval(const char* candidates, const char* references, int per_image, const char* out_path,
                        char** report_json) {
  return guarded([&] {
    need(candidates, "candidates");
    need(references, "references");
    const std::string report =
        mtcap::cmd_eval(candidates, references, per_image != 0, out_path == nullptr ? "" : out_path);
    if (report_json != nullptr) {
      *report_json = dup_string(report);
    }
  });
}

mtcap_status mtcap_inspect_attn(const mtcap_model* model, const char* features, const char* blocks,
                                const char* heads, const char* roles, const char* out_path, char** jsonl) {
  return guarded([&] {
    need(model, "model");
    need(features, "features");
    mtcap::InspectSelection sel;
    sel.blocks = parse_ints(blocks, "block");
    sel.heads = parse_ints(heads, "head");
    for (const auto& r : split_list(roles)) {
      const auto role = mtcap::parse_role(r);
      mtcap::require(role.has_value(), mtcap::ErrorCode::kConfig,
                     "unknown attention role '" + r + "' (expected enc-SA, dec-SA, dec-GA or umv-GA)");
      sel.roles.push_back(*role);
    }
    const std::string text = mtcap::inspect_jsonl(mtcap::cmd_inspect_attn(model->value, features, sel));
    if (out_path != nullptr && *out_path != '\0') {
      mtcap::write_text_file(out_path, text);
    }
    if (jsonl != nullptr) {
      *jsonl = dup_string(text);
    }
  });
}

}  // extern "C"
