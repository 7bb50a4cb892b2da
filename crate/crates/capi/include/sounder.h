/* C interface for the sounder retrieval library. Generated by cbindgen. */

#ifndef SOUNDER_H
#define SOUNDER_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values 2 through 6 match the exit codes
 * of the `sounder` binary; 1 and 7 are boundary-only conditions.
 */
typedef enum SounderStatus {
  SOUNDER_STATUS_OK = 0,
  /**
   * NULL pointer, non-UTF-8 string, or wrong buffer size at the boundary.
   */
  SOUNDER_STATUS_ARGUMENT = 1,
  SOUNDER_STATUS_CONFIG = 2,
  SOUNDER_STATUS_IO = 3,
  SOUNDER_STATUS_DATA = 4,
  SOUNDER_STATUS_NUMERIC = 5,
  /**
   * Index was built by a different model than the one supplied.
   */
  SOUNDER_STATUS_FINGERPRINT = 6,
  /**
   * Internal panic; indicates a bug in the library.
   */
  SOUNDER_STATUS_PANIC = 7,
} SounderStatus;

/**
 * Input kind a model was trained on.
 */
typedef enum SounderModality {
  /**
   * `sounder_embed_tokens`; `input_width` is the vocabulary size.
   */
  SOUNDER_MODALITY_TOKENS = 0,
  /**
   * `sounder_embed_frames`; `input_width` is the frame feature width.
   */
  SOUNDER_MODALITY_FRAMES = 1,
} SounderModality;

/**
 * Which tower of the bi-encoder embeds the utterance.
 */
typedef enum SounderRole {
  SOUNDER_ROLE_QUESTION = 0,
  SOUNDER_ROLE_PASSAGE = 1,
} SounderRole;

/**
 * Ranked search results; read with the `sounder_hits_*` accessors.
 */
typedef struct SounderHits SounderHits;

/**
 * An exact inner-product index over passage embeddings.
 */
typedef struct SounderIndex SounderIndex;

/**
 * A frozen retriever loaded from a checkpoint directory.
 */
typedef struct SounderModel SounderModel;

/**
 * Shape summary of an open model.
 */
typedef struct SounderModelInfo {
  enum SounderModality modality;
  /**
   * Length of every embedding the model produces.
   */
  size_t embedding_dim;
  /**
   * Vocabulary size for token models, feature width for frame models.
   */
  size_t input_width;
} SounderModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sounder_version(void);

/**
 * Message for the calling thread's most recent failure, or NULL if none.
 */
const char *sounder_last_error(void);

/**
 * Load the checkpoint under `dir` and freeze it for inference.
 */
enum SounderStatus sounder_model_open(const char *dir, struct SounderModel **out);

void sounder_model_free(struct SounderModel *model);

/**
 * Modality, embedding length and input width of an open model.
 */
enum SounderStatus sounder_model_describe(const struct SounderModel *model,
                                          struct SounderModelInfo *out);

/**
 * Hex digest over the model weights, owned by the handle.
 * Returns NULL if `model` is NULL.
 */
const char *sounder_model_fingerprint(const struct SounderModel *model);

/**
 * Embed a token utterance with one tower of a token model. `out` must hold
 * exactly `embedding_dim` doubles.
 */
enum SounderStatus sounder_embed_tokens(const struct SounderModel *model,
                                        enum SounderRole role,
                                        const uint32_t *tokens,
                                        size_t len,
                                        double *out,
                                        size_t out_len);

/**
 * Embed a frame utterance with one tower of a frame model. `frames` is
 * row-major `rows x cols`; `out` must hold exactly `embedding_dim` doubles.
 */
enum SounderStatus sounder_embed_frames(const struct SounderModel *model,
                                        enum SounderRole role,
                                        const double *frames,
                                        size_t rows,
                                        size_t cols,
                                        double *out,
                                        size_t out_len);

/**
 * Load the index stored as `<name>.vecs` + `<name>.manifest` under `dir`.
 */
enum SounderStatus sounder_index_open(const char *dir, const char *name, struct SounderIndex **out);

void sounder_index_free(struct SounderIndex *index);

/**
 * Number of passages in the index; 0 if `index` is NULL.
 */
size_t sounder_index_len(const struct SounderIndex *index);

/**
 * Embedding dimension of the index; 0 if `index` is NULL.
 */
size_t sounder_index_dim(const struct SounderIndex *index);

/**
 * Ok when the index was built by exactly this model's weights.
 */
enum SounderStatus sounder_index_check_model(const struct SounderIndex *index,
                                             const struct SounderModel *model);

/**
 * Exact top-k inner-product search. `query` must have the index dimension;
 * the result handle owns the hits until `sounder_hits_free`.
 */
enum SounderStatus sounder_index_search(const struct SounderIndex *index,
                                        const double *query,
                                        size_t query_len,
                                        size_t k,
                                        struct SounderHits **out);

/**
 * Number of hits; 0 if `hits` is NULL.
 */
size_t sounder_hits_len(const struct SounderHits *hits);

/**
 * Passage id of hit `i`, owned by the handle; NULL when out of range.
 */
const char *sounder_hits_id(const struct SounderHits *hits, size_t i);

/**
 * Score of hit `i`; NaN when out of range.
 */
double sounder_hits_score(const struct SounderHits *hits, size_t i);

void sounder_hits_free(struct SounderHits *hits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOUNDER_H */
