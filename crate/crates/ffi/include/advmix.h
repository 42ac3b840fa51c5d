/* C interface to the adversarial mixup training core.
 *
 * All fallible functions return an error code; on failure a message is
 * available from amx_last_error() until the next failing call on the
 * same thread. Handles are opaque and must be released with the
 * matching *_free function exactly once.
 */

#ifndef ADVMIX_H
#define ADVMIX_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#define AMX_OK 0
#define AMX_ERR_NULL 1
#define AMX_ERR_INVALID 2
#define AMX_ERR_RUNTIME 3

typedef struct AmxDataset AmxDataset;
typedef struct AmxModel AmxModel;

/* Library version string; static storage, do not free. */
const char *amx_version(void);

/* Message for the last failed call on this thread. */
const char *amx_last_error(void);

/* Synthetic two-interleaved-arcs dataset with n points. */
int amx_dataset_two_moons(size_t n, double noise, uint64_t seed,
                          AmxDataset **out);

/* Load an IDX image/label file pair. */
int amx_dataset_load_idx(const char *images_path, const char *labels_path,
                         AmxDataset **out);

/* Number of examples, or -1 for a null handle. */
int64_t amx_dataset_len(const AmxDataset *ds);

void amx_dataset_free(AmxDataset *ds);

/* Train a model from a complete TOML experiment config on the given
 * dataset; seed overrides the config's run seed. */
int amx_train_toml(const char *config_toml, const AmxDataset *dataset,
                   uint64_t seed, AmxModel **out);

int amx_model_save(const AmxModel *model, const char *path);
int amx_model_load(const char *path, AmxModel **out);
void amx_model_free(AmxModel *model);

/* Pristine and PGD robust accuracy on a dataset. epsilon is the
 * l-infinity bound in raw input units; steps the PGD iteration count. */
int amx_eval_pgd(AmxModel *model, const AmxDataset *dataset, double epsilon,
                 size_t steps, uint64_t seed, double *out_pristine,
                 double *out_robust);

#ifdef __cplusplus
}
#endif

#endif /* ADVMIX_H */
