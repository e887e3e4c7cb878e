#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "prism.h"

#define CHECK(cond)                                                    \
  do {                                                                 \
    if (!(cond)) {                                                     \
      const char *e = prism_last_error();                              \
      fprintf(stderr, "line %d: %s (%s)\n", __LINE__, #cond, e ? e : ""); \
      return 1;                                                        \
    }                                                                  \
  } while (0)

int main(void) {
  const char *channels[] = {"C3", "Cz", "C4", "Pz"};
  const size_t n = 800;
  double *signal = malloc(sizeof(double) * 4 * n);
  for (size_t c = 0; c < 4; c++)
    for (size_t j = 0; j < n; j++)
      signal[c * n + j] = (1.0 + c) * sin(2.0 * 3.14159265358979 * 10.0 * j / 200.0);

  PrismRecording *rec = NULL;
  CHECK(prism_recording_new("s1", channels, 4, 200.0, signal, n, -1, &rec) == PRISM_STATUS_OK);
  CHECK(prism_recording_n_samples(rec) == n);

  PrismRecording *clean = NULL;
  CHECK(prism_preprocess(rec, NULL, &clean) == PRISM_STATUS_OK);

  PrismModel *model = NULL;
  CHECK(prism_model_init("dim = 8\nencoder_layers = 2\ndecoder_layers = 1\nheads = 2\n", 1, &model) ==
        PRISM_STATUS_OK);
  size_t tokens = 0;
  CHECK(prism_model_n_tokens(model, clean, &tokens) == PRISM_STATUS_OK);
  CHECK(tokens == 16);
  size_t len = tokens * prism_model_dim(model);
  double *reps = malloc(sizeof(double) * len);
  CHECK(prism_model_encode(model, clean, reps, len - 1) == PRISM_STATUS_BUFFER_TOO_SMALL);
  CHECK(prism_last_error() != NULL);
  CHECK(prism_model_encode(model, clean, reps, len) == PRISM_STATUS_OK);
  for (size_t i = 0; i < len; i++) CHECK(isfinite(reps[i]));

  size_t preds[] = {0, 1, 1, 0};
  size_t labels[] = {0, 1, 0, 0};
  double acc = 0.0;
  CHECK(prism_balanced_accuracy(preds, labels, 4, &acc) == PRISM_STATUS_OK);
  CHECK(fabs(acc - (2.0 / 3.0 + 1.0) / 2.0) < 1e-12);

  PrismModel *missing = NULL;
  CHECK(prism_model_load("/no/such.ckpt", &missing) == PRISM_STATUS_IO);
  CHECK(missing == NULL);
  CHECK(strstr(prism_last_error(), "/no/such.ckpt") != NULL);

  prism_model_free(model);
  prism_recording_free(clean);
  prism_recording_free(rec);
  free(reps);
  free(signal);
  printf("c smoke ok %s\n", prism_version());
  return 0;
}
