#ifndef CIRCUITSCOPE_H
#define CIRCUITSCOPE_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CS_API __declspec(dllexport)
#else
#define CS_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes. Non-zero values mirror the library's typed errors. */
typedef enum cs_status {
  CS_OK = 0,
  CS_ERR_INVALID_ARGUMENT = 1,
  CS_ERR_IO = 2,
  CS_ERR_PARSE = 3,
  CS_ERR_MISSING_TENSOR = 4,
  CS_ERR_SHAPE_MISMATCH = 5,
  CS_ERR_UNSUPPORTED_SCHEME = 6,
  CS_ERR_INVALID_CONFIG = 7,
  CS_ERR_TOKEN_OUT_OF_RANGE = 8,
  CS_ERR_SEQUENCE_TOO_LONG = 9,
  CS_ERR_INDEX_OUT_OF_BOUNDS = 10,
  CS_ERR_CACHE_MISSING = 11,
  CS_ERR_INVALID_SITE = 12,
  CS_ERR_LAYER_ORDER_VIOLATION = 13,
  CS_ERR_LENGTH_MISMATCH = 14,
  CS_ERR_EMPTY_DATASET = 15,
  CS_ERR_MIXED_DATASET = 16,
  CS_ERR_MISSING_CORRUPTED = 17,
  CS_ERR_EXAMPLE_MISMATCH = 18,
  CS_ERR_CONSTANT_INPUT = 19,
  CS_ERR_DIMENSION_MISMATCH = 20,
  CS_ERR_UNSUPPORTED_FORMAT = 21,
  CS_ERR_INVALID_DATASET = 22,
  CS_ERR_INTERNAL = 100
} cs_status;

typedef struct cs_model cs_model;
typedef struct cs_dataset cs_dataset;

CS_API const char* cs_version(void);
CS_API const char* cs_status_name(cs_status status);
/* Message of the last failed call on this thread; "" if none. */
CS_API const char* cs_last_error(void);

/* Strings returned through char** out-parameters are owned by the caller. */
CS_API void cs_string_free(char* s);

/* Reads model.safetensors, config.json and optional vocab.json from dir. */
CS_API cs_status cs_model_load(const char* dir, cs_model** out);
CS_API void cs_model_free(cs_model* model);
/* JSON: {"fingerprint": ..., "config": {...}}. */
CS_API cs_status cs_model_info(const cs_model* model, char** json_out);
/* Writes n_tokens * vocab_size logits, row-major. */
CS_API cs_status cs_forward_logits(const cs_model* model, const int32_t* tokens, size_t n_tokens,
                                   float* logits_out, size_t logits_capacity);

/* JSON-lines dataset, one example per line. */
CS_API cs_status cs_dataset_load(const char* path, cs_dataset** out);
CS_API void cs_dataset_free(cs_dataset* dataset);
CS_API size_t cs_dataset_size(const cs_dataset* dataset);

/*
 * Experiment commands. params_json is a JSON object (NULL means defaults).
 * On success *bundle_out receives
 *   {"report": {...}, "files": {"relative/path": "contents"},
 *    "summary": ["line", ...], "warnings": ["line", ...]}
 */
CS_API cs_status cs_eval(const cs_model* model, const cs_dataset* dataset, const char* params_json,
                         char** bundle_out);
CS_API cs_status cs_patch(const cs_model* model, const cs_dataset* dataset, const char* params_json,
                          char** bundle_out);
CS_API cs_status cs_flow(const cs_model* model, const cs_dataset* dataset, const char* params_json,
                         char** bundle_out);
CS_API cs_status cs_ablate(const cs_model* model, const cs_dataset* dataset, const char* params_json,
                           char** bundle_out);
CS_API cs_status cs_lens(const cs_model* model, const cs_dataset* dataset, const char* params_json,
                         char** bundle_out);
/* dataset may be NULL unless s-inhibition parameters are given. */
CS_API cs_status cs_heads(const cs_model* model, const cs_dataset* dataset, const char* params_json,
                          char** bundle_out);
CS_API cs_status cs_compare(const char* params_json, char** bundle_out);
CS_API cs_status cs_selftest(const char* params_json, char** bundle_out);
CS_API cs_status cs_parity(const cs_model* model, const char* params_json, char** bundle_out);
/* Writes a tiny random model directory plus dataset.jsonl into dir. */
CS_API cs_status cs_fixture(const char* dir, const char* params_json, char** bundle_out);

#ifdef __cplusplus
}
#endif

#endif
