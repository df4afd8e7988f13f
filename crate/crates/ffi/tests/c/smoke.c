#include <stdio.h>
#include "pgma.h"

int main(void) {
    PgmaSeries *train = NULL, *test = NULL;
    if (pgma_series_synthetic(4, 400, 20, 0.05, 1, 0.5, &train, &test) != PGMA_STATUS_OK) {
        fprintf(stderr, "synthetic: %s\n", pgma_last_error());
        return 1;
    }
    size_t period = 0;
    if (pgma_detect_period(train, &period) != PGMA_STATUS_OK || period != 20) {
        fprintf(stderr, "period %zu\n", period);
        return 2;
    }
    const char *cfg = "{\"train\": {\"window\": 12, \"max_epochs\": 1, \"patience\": 1,"
                      " \"embed_dim\": 4, \"graph_dim\": 4, \"temporal_dim\": 2,"
                      " \"mlp_hidden\": 4, \"conv_channels\": 1, \"k\": 2}}";
    PgmaDetector *det = NULL;
    if (pgma_detector_train(train, cfg, &det) != PGMA_STATUS_OK) {
        fprintf(stderr, "train: %s\n", pgma_last_error());
        return 3;
    }
    PgmaScores *scores = NULL;
    if (pgma_detector_score(det, test, 3, "best-f1", &scores) != PGMA_STATUS_OK) {
        fprintf(stderr, "score: %s\n", pgma_last_error());
        return 4;
    }
    PgmaMetrics m;
    if (pgma_scores_metrics(scores, false, &m) != PGMA_STATUS_OK) return 5;
    if (pgma_series_from_csv("/no/such/file.csv", NULL, &train) != PGMA_STATUS_DATA) return 6;
    printf("n=%zu f1=%.3f\n", pgma_scores_len(scores), m.f1);
    pgma_scores_free(scores);
    pgma_detector_free(det);
    pgma_series_free(test);
    return 0;
}
