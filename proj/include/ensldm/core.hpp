#pragma once

#include <utility>
#include <vector>

#include "ensldm/common.hpp"

namespace ensldm {

/// Regular lat/lon grid, cell centers in degrees, 12 months per year.
struct GridSpec {
  int n_lat = 0;
  int n_lon = 0;
  std::vector<double> lat_centers;  // strictly increasing, in (-90, 90)
  std::vector<double> lon_centers;  // strictly increasing, equally spaced, in [0, 360)
  int months_per_year = 12;

  /// Equal-angle grid with centered cells.
  static GridSpec regular(int n_lat, int n_lon);

  void validate() const;
  bool operator==(const GridSpec& o) const;
};

/// One monthly surface-temperature field in degC, row-major [lat][lon].
struct GridField {
  GridSpec spec;
  std::vector<float> values;

  void validate() const;
};

struct YearMonth {
  int year = 0;
  int month = 1;  // 1..12

  bool operator==(const YearMonth& o) const { return year == o.year && month == o.month; }
};

/// Time-ordered monthly sequence of fields on one grid, no gaps.
struct SimSequence {
  GridSpec spec;
  YearMonth start;
  std::vector<std::vector<float>> frames;  // each of size n_lat*n_lon
  std::string member_id;

  int n_months() const { return static_cast<int>(frames.size()); }
  GridField field(int t) const { return GridField{spec, frames[static_cast<size_t>(t)]}; }
  YearMonth time_at(int t) const;
  void validate() const;
};

/// Affine field normalization, v' = (v - mean) / std.
struct Normalizer {
  double mean = 0.0;
  double std = 1.0;
};

/// Lat/lon rectangle in degrees. Longitude ranges may wrap across 0.
struct LatLonBox {
  double lat_min = 0.0;
  double lat_max = 0.0;
  double lon_min = 0.0;
  double lon_max = 0.0;

  bool contains(double lat, double lon) const {
    if (lat < lat_min || lat > lat_max) return false;
    if (lon_min <= lon_max) return lon >= lon_min && lon <= lon_max;
    return lon >= lon_min || lon <= lon_max;
  }
};

/// Area-weighted spatial mean with w(lat) = cos(lat * pi/180).
/// Accumulates in double so the reduction order is irrelevant at test
/// tolerances. Throws on non-finite values.
double spatial_mean_weighted(const GridField& field);

/// Plain arithmetic mean over cells, for comparison against the weighted one.
double spatial_mean_unweighted(const GridField& field);

/// Per calendar year, the mean of the 12 monthly weighted spatial means.
/// Years without all 12 months are dropped.
std::vector<std::pair<int, double>> annual_mean(const SimSequence& seq);

/// Subtracts the per-calendar-month mean field over [clim_start, clim_end]
/// (years, inclusive) from every month. The window must lie inside seq.
SimSequence monthly_anomaly(const SimSequence& seq, int clim_start, int clim_end);

SimSequence normalize(const SimSequence& seq, const Normalizer& norm);
SimSequence denormalize(const SimSequence& seq, const Normalizer& norm);

/// Mean/std over every cell of every frame, double accumulation.
Normalizer fit_normalizer(const std::vector<SimSequence>& seqs);

}  // namespace ensldm
