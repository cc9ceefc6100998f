#include <math.h>
#include <stdio.h>
#include "replica_flow.h"

int main(void) {
  RfSystem sys = {2, 16, 8, 2, 2, 0.2, 0.0};
  double exact = 0.0;
  if (rf_gaussian_log_ratio(&sys, &exact) != RF_STATUS_OK) return 1;
  RfSampler *s = NULL;
  if (rf_sampler_nemc(20, false, &s) != RF_STATUS_OK) return 2;
  enum { N = 2000 };
  static double works[N];
  if (rf_sample_works(s, &sys, 200, 2, N, 7, works) != RF_STATUS_OK) return 3;
  RfRatio r;
  if (rf_log_ratio(works, N, &r) != RF_STATUS_OK) return 4;
  rf_sampler_free(s);
  RfLattice *lat = NULL;
  RfSystem bad = {4, 16, 8, 2, 2, 0.2, 0.0};
  if (rf_lattice_new(&bad, &lat) != RF_STATUS_INVALID_INPUT || rf_last_error() == NULL) return 5;
  printf("%.6f %.6f %.6f\n", exact, r.ln_ratio, r.sigma);
  return fabs(r.ln_ratio - exact) < 4.0 * r.sigma + 1e-3 ? 0 : 6;
}
