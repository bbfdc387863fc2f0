#include "ensldm/core.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace ensldm {

GridSpec GridSpec::regular(int n_lat, int n_lon) {
  GridSpec s;
  s.n_lat = n_lat;
  s.n_lon = n_lon;
  s.lat_centers.resize(static_cast<size_t>(n_lat));
  s.lon_centers.resize(static_cast<size_t>(n_lon));
  for (int i = 0; i < n_lat; ++i) {
    s.lat_centers[static_cast<size_t>(i)] = -90.0 + (i + 0.5) * 180.0 / n_lat;
  }
  for (int j = 0; j < n_lon; ++j) {
    s.lon_centers[static_cast<size_t>(j)] = (j + 0.5) * 360.0 / n_lon;
  }
  s.validate();
  return s;
}

void GridSpec::validate() const {
  if (n_lat < 4 || n_lon < 8) throw ConfigError("GridSpec: need n_lat >= 4 and n_lon >= 8");
  if (static_cast<int>(lat_centers.size()) != n_lat ||
      static_cast<int>(lon_centers.size()) != n_lon) {
    throw ConfigError("GridSpec: center array lengths do not match dims");
  }
  if (months_per_year != 12) throw ConfigError("GridSpec: months_per_year must be 12");
  for (int i = 1; i < n_lat; ++i) {
    if (!(lat_centers[static_cast<size_t>(i)] > lat_centers[static_cast<size_t>(i - 1)])) {
      throw ConfigError("GridSpec: lat_centers must be strictly increasing");
    }
  }
  double step = lon_centers.size() > 1 ? lon_centers[1] - lon_centers[0] : 0.0;
  for (int j = 1; j < n_lon; ++j) {
    double d = lon_centers[static_cast<size_t>(j)] - lon_centers[static_cast<size_t>(j - 1)];
    if (!(d > 0.0) || std::abs(d - step) > 1e-9) {
      throw ConfigError("GridSpec: lon_centers must be strictly increasing and equally spaced");
    }
  }
}

bool GridSpec::operator==(const GridSpec& o) const {
  return n_lat == o.n_lat && n_lon == o.n_lon && lat_centers == o.lat_centers &&
         lon_centers == o.lon_centers && months_per_year == o.months_per_year;
}

void GridField::validate() const {
  spec.validate();
  if (static_cast<int>(values.size()) != spec.n_lat * spec.n_lon) {
    throw ShapeError("GridField: values length != n_lat*n_lon");
  }
  if (!all_finite(values)) throw Error("GridField: non-finite values");
}

YearMonth SimSequence::time_at(int t) const {
  int m0 = (start.month - 1) + t;
  return YearMonth{start.year + m0 / 12, m0 % 12 + 1};
}

void SimSequence::validate() const {
  spec.validate();
  if (frames.empty()) throw Error("SimSequence: empty");
  size_t cells = static_cast<size_t>(spec.n_lat) * static_cast<size_t>(spec.n_lon);
  for (const auto& f : frames) {
    if (f.size() != cells) throw ShapeError("SimSequence: frame size mismatch");
  }
  if (start.month < 1 || start.month > 12) throw Error("SimSequence: start month out of range");
}

namespace {

double weighted_mean(const GridSpec& spec, const std::vector<float>& values, bool weighted) {
  double num = 0.0, den = 0.0;
  for (int i = 0; i < spec.n_lat; ++i) {
    double w = weighted ? std::cos(deg2rad(spec.lat_centers[static_cast<size_t>(i)])) : 1.0;
    for (int j = 0; j < spec.n_lon; ++j) {
      double v = values[static_cast<size_t>(i * spec.n_lon + j)];
      if (!std::isfinite(v)) throw Error("spatial mean: non-finite value in field");
      num += w * v;
      den += w;
    }
  }
  return num / den;
}

}  // namespace

double spatial_mean_weighted(const GridField& field) {
  return weighted_mean(field.spec, field.values, true);
}

double spatial_mean_unweighted(const GridField& field) {
  return weighted_mean(field.spec, field.values, false);
}

std::vector<std::pair<int, double>> annual_mean(const SimSequence& seq) {
  std::map<int, std::pair<int, double>> per_year;  // year -> (count, sum)
  for (int t = 0; t < seq.n_months(); ++t) {
    YearMonth ym = seq.time_at(t);
    double s = weighted_mean(seq.spec, seq.frames[static_cast<size_t>(t)], true);
    auto& e = per_year[ym.year];
    e.first += 1;
    e.second += s;
  }
  std::vector<std::pair<int, double>> out;
  for (const auto& [year, cs] : per_year) {
    if (cs.first == 12) out.emplace_back(year, cs.second / 12.0);
  }
  return out;
}

SimSequence monthly_anomaly(const SimSequence& seq, int clim_start, int clim_end) {
  seq.validate();
  if (clim_start > clim_end) throw RangeError("monthly_anomaly: empty climatology window");
  YearMonth first = seq.time_at(0);
  YearMonth last = seq.time_at(seq.n_months() - 1);
  // The window must contain whole years of data.
  bool contained = (clim_start > first.year || (clim_start == first.year && first.month == 1)) &&
                   (clim_end < last.year || (clim_end == last.year && last.month == 12));
  if (clim_start < first.year || clim_end > last.year || !contained) {
    throw RangeError("monthly_anomaly: climatology window not contained in sequence");
  }

  size_t cells = seq.frames[0].size();
  // Per calendar month mean field over the window, double accumulation.
  std::vector<std::vector<double>> clim(12, std::vector<double>(cells, 0.0));
  std::vector<int> counts(12, 0);
  for (int t = 0; t < seq.n_months(); ++t) {
    YearMonth ym = seq.time_at(t);
    if (ym.year < clim_start || ym.year > clim_end) continue;
    auto& acc = clim[static_cast<size_t>(ym.month - 1)];
    const auto& f = seq.frames[static_cast<size_t>(t)];
    for (size_t i = 0; i < cells; ++i) acc[i] += f[i];
    counts[static_cast<size_t>(ym.month - 1)] += 1;
  }
  for (int m = 0; m < 12; ++m) {
    if (counts[static_cast<size_t>(m)] == 0) {
      throw RangeError("monthly_anomaly: climatology window misses a calendar month");
    }
    for (auto& x : clim[static_cast<size_t>(m)]) x /= counts[static_cast<size_t>(m)];
  }

  SimSequence out = seq;
  for (int t = 0; t < seq.n_months(); ++t) {
    YearMonth ym = seq.time_at(t);
    const auto& mean_f = clim[static_cast<size_t>(ym.month - 1)];
    auto& f = out.frames[static_cast<size_t>(t)];
    for (size_t i = 0; i < cells; ++i) {
      f[i] = static_cast<float>(f[i] - mean_f[i]);
    }
  }
  return out;
}

namespace {
SimSequence affine(const SimSequence& seq, double scale, double shift) {
  SimSequence out = seq;
  for (auto& f : out.frames) {
    for (auto& x : f) x = static_cast<float>(x * scale + shift);
  }
  return out;
}
}  // namespace

SimSequence normalize(const SimSequence& seq, const Normalizer& norm) {
  if (!(norm.std > 0.0)) throw ConfigError("normalize: std must be positive");
  return affine(seq, 1.0 / norm.std, -norm.mean / norm.std);
}

SimSequence denormalize(const SimSequence& seq, const Normalizer& norm) {
  if (!(norm.std > 0.0)) throw ConfigError("denormalize: std must be positive");
  return affine(seq, norm.std, norm.mean);
}

Normalizer fit_normalizer(const std::vector<SimSequence>& seqs) {
  double sum = 0.0, sumsq = 0.0;
  int64_t n = 0;
  for (const auto& s : seqs) {
    for (const auto& f : s.frames) {
      for (float x : f) {
        sum += x;
        sumsq += static_cast<double>(x) * x;
        ++n;
      }
    }
  }
  require(n > 0, "fit_normalizer: no data");
  double mean = sum / static_cast<double>(n);
  double var = sumsq / static_cast<double>(n) - mean * mean;
  Normalizer norm;
  norm.mean = mean;
  norm.std = std::sqrt(std::max(var, 1e-12));
  return norm;
}

}  // namespace ensldm
