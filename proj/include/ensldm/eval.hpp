#pragma once

#include <string>
#include <vector>

#include "ensldm/core.hpp"

namespace ensldm {

/// Per-year ensemble mean and sample spread (n-1 divisor) of annual
/// spatially averaged temperatures.
struct EnsembleStats {
  std::vector<int> years;
  std::vector<double> mean;    // degC
  std::vector<double> spread;  // degC, >= 0
};

/// One detected ENSO event; month indices inclusive, sign +1 for El Nino
/// and -1 for La Nina.
struct EnsoEvent {
  int start = 0;
  int end = 0;
  int sign = 0;

  int duration() const { return end - start + 1; }
  bool operator==(const EnsoEvent& o) const {
    return start == o.start && end == o.end && sign == o.sign;
  }
};

struct EnsoParams {
  LatLonBox box;
  double threshold = 0.4;  // degC
  int min_months = 6;
  int smooth_months = 5;   // centered running mean width
};

struct EnsembleReport {
  EnsembleStats orig;
  EnsembleStats gen;
  std::vector<int> years;             // common year axis
  double mean_rmse = 0.0;             // RMSE between the two mean series
  std::vector<double> spread_ratio;   // per-year gen/orig
  double spread_ratio_time_mean = 0.0;  // time-mean(gen spread)/time-mean(orig spread)
  double orig_spread_time_mean = 0.0;
  double orig_events_per_member = 0.0;
  double gen_events_per_member = 0.0;
  std::vector<int> volcano_years;
  std::vector<bool> volcano_dip_ok;   // gen mean has a local minimum within +-1 year
  double vae_rmse = -1.0;             // reconstruction RMSE when a VAE was supplied
  double vae_rmse_limit = -1.0;       // 0.35 * field std, for reference
};

/// Mean and spread across members of annual spatial means. Members must share
/// the time axis and contain at least two sequences.
EnsembleStats ensemble_stats(const std::vector<SimSequence>& members);

/// Area-weighted monthly box anomaly (climatology over [clim_start, clim_end])
/// smoothed with a centered running mean whose window shrinks at the ends.
std::vector<double> enso_index(const SimSequence& seq, const LatLonBox& box, int clim_start,
                               int clim_end, int smooth_months = 5);

/// Maximal runs with index > +threshold (El Nino) or < -threshold (La Nina)
/// lasting at least min_months.
std::vector<EnsoEvent> detect_events(const std::vector<double>& index, double threshold,
                                     int min_months);

/// Full comparison of an original ensemble against a generated one.
EnsembleReport compare_ensembles(const std::vector<SimSequence>& orig,
                                 const std::vector<SimSequence>& gen, const EnsoParams& enso,
                                 const std::vector<int>& volcano_years);

/// Emits <dir>/report.json and <dir>/series.csv.
void write_report(const std::string& dir, const EnsembleReport& report);

}  // namespace ensldm
