/* Copyright 2026 The mtcap Authors
 * SPDX-License-Identifier: Apache-2.0 */

/* C interface to the mtcap captioning library. Every function returns an
 * mtcap_status; on failure mtcap_last_error() describes the problem until the
 * next call on the same thread. Strings returned through char** are owned by
 * the caller and released with mtcap_string_free. */

#ifndef MTCAP_MTCAP_H_
#define MTCAP_MTCAP_H_

#include <stddef.h>
#include <stdint.h>

#if defined(MTCAP_BUILDING_LIBRARY)
#define MTCAP_API __attribute__((visibility("default")))
#else
#define MTCAP_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum mtcap_status {
  MTCAP_OK = 0,
  MTCAP_ERR_INVALID_ARGUMENT = 1,
  MTCAP_ERR_DIMENSION = 2,
  MTCAP_ERR_CONFIG = 3,
  MTCAP_ERR_IO = 4,
  MTCAP_ERR_NUMERIC = 5,
  MTCAP_ERR_RANGE = 6,
  MTCAP_ERR_FORMAT = 7,
  MTCAP_ERR_INTERNAL = 8
} mtcap_status;

typedef struct mtcap_config mtcap_config;
typedef struct mtcap_model mtcap_model;

MTCAP_API const char* mtcap_version(void);
MTCAP_API const char* mtcap_status_name(mtcap_status status);
MTCAP_API const char* mtcap_last_error(void);
MTCAP_API void mtcap_string_free(char* s);

/* Configuration. `profile` is "desk" or "paper". */
MTCAP_API mtcap_status mtcap_config_new(const char* profile, mtcap_config** out);
/* Reads a JSON file over the given profile (NULL: desk). */
MTCAP_API mtcap_status mtcap_config_load(const char* path, const char* profile, mtcap_config** out);
/* Dotted key ("train.xe_epochs") and a JSON literal or bare string. */
MTCAP_API mtcap_status mtcap_config_set(mtcap_config* cfg, const char* key, const char* value);
MTCAP_API mtcap_status mtcap_config_validate(const mtcap_config* cfg);
MTCAP_API mtcap_status mtcap_config_to_json(const mtcap_config* cfg, char** out);
MTCAP_API void mtcap_config_free(mtcap_config* cfg);

/* Dataset generation into cfg.data_dir. `summary_json` (optional) receives
 * per-split statistics. */
MTCAP_API mtcap_status mtcap_gen_data(const mtcap_config* cfg, char** summary_json);

/* Vocabulary from the training references; `summary_json` is optional. */
MTCAP_API mtcap_status mtcap_build_vocab(const mtcap_config* cfg, char** summary_json);

typedef struct mtcap_epoch_info {
  size_t epoch;
  const char* stage; /* "xe" or "scst" */
  double lr;
  double train_loss;
  double val_bleu1;
  double val_bleu4;
  double val_rouge_l;
  double val_cider;
} mtcap_epoch_info;

typedef void (*mtcap_epoch_callback)(const mtcap_epoch_info* info, void* user);

/* Trains into cfg.out_dir. `resume` (optional) names a checkpoint. */
MTCAP_API mtcap_status mtcap_train(const mtcap_config* cfg, const char* resume, mtcap_epoch_callback on_epoch,
                                   void* user);

/* A trained model; `cfg` must be the resolved config written by training. */
MTCAP_API mtcap_status mtcap_model_load(const mtcap_config* cfg, const char* checkpoint, mtcap_model** out);
MTCAP_API void mtcap_model_free(mtcap_model* model);

/* Captions every <id>.fvs in `features_dir` with the decode settings of
 * `decode` (NULL: the model's config) and writes JSONL to `out_path`.
 * `count` (optional) receives the number of captions. */
MTCAP_API mtcap_status mtcap_caption(const mtcap_model* model, const mtcap_config* decode,
                                     const char* features_dir, const char* out_path, size_t* count);

/* Score report JSON for candidate and reference JSONL files. `out_path` is
 * optional; `report_json` (optional) receives the report. */
MTCAP_API mtcap_status mtcap_eval(const char* candidates, const char* references, int per_image,
                                  const char* out_path, char** report_json);

/* Attention maps of one image. Selectors are comma-separated lists; NULL or
 * "" selects everything. Blocks are 1-based, heads 0-based, roles among
 * enc-SA, dec-SA, dec-GA, umv-GA. */
MTCAP_API mtcap_status mtcap_inspect_attn(const mtcap_model* model, const char* features, const char* blocks,
                                          const char* heads, const char* roles, const char* out_path,
                                          char** jsonl);

#ifdef __cplusplus
}
#endif

#endif /* MTCAP_MTCAP_H_ */
