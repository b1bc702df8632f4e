#include <stdio.h>
#include <string.h>
#include "mrp.h"

int main(void) {
    MrpCells *cells = NULL;
    MrpSurvey *survey = NULL;
    MrpFit *fit = NULL;
    MrpSeries *series = NULL;
    double mean = 0.0, lo = 0.0, hi = 0.0;

    if (strncmp(mrp_version(), "mrp ", 4) != 0) return 1;
    if (mrp_cells_load(NULL, &cells) != MRP_STATUS_NULL_ARGUMENT) return 2;
    if (strlen(mrp_last_error()) == 0) return 3;
    if (mrp_cells_synthetic(7, &cells) != MRP_STATUS_OK) return 4;
    if (mrp_survey_simulate(cells, 2000, 3, 0.0, &survey) != MRP_STATUS_OK) return 5;
    if (mrp_survey_len(survey) != 2000) return 6;
    if (mrp_fit(survey, cells, MRP_METHOD_MAP, NULL, 0.0, &fit) != MRP_STATUS_OK) {
        fprintf(stderr, "%s\n", mrp_last_error());
        return 7;
    }
    if (mrp_estimate(fit, cells, survey, &series) != MRP_STATUS_OK) return 8;
    if (mrp_series_len(series) != 510) return 9;
    if (mrp_query(fit, cells, 0, 0, 0, 0, false, &mean, &lo, &hi) != MRP_STATUS_OK) return 10;
    if (!(mean > 0.0 && mean < 1.0 && lo == mean && hi == mean)) return 11;
    if (mrp_query(fit, cells, 9, 0, 0, 0, false, &mean, NULL, NULL) != MRP_STATUS_QUERY) return 12;

    mrp_series_free(series);
    mrp_fit_free(fit);
    mrp_survey_free(survey);
    mrp_cells_free(cells);
    mrp_cells_free(NULL);
    printf("ok %.4f\n", mean);
    return 0;
}
