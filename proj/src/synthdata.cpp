#include "ensldm/synthdata.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "ensldm/dataio.hpp"
#include "ensldm/rng.hpp"
#include "ensldm/threads.hpp"

namespace ensldm {

void SynthConfig::validate() const {
  grid.validate();
  if (n_members < 2) throw ConfigError("SynthConfig: n_members must be >= 2");
  if (n_years < 1) throw ConfigError("SynthConfig: n_years must be >= 1");
  if (clim_amplitude < 0 || enso_amplitude < 0 || noise_std < 0) {
    throw ConfigError("SynthConfig: amplitudes must be non-negative");
  }
  if (enso_period_months < 4) throw ConfigError("SynthConfig: enso period too short");
  if (noise_corr_cells < 0) throw ConfigError("SynthConfig: noise_corr_cells must be >= 0");
  bool box_ok = false;
  for (int i = 0; i < grid.n_lat && !box_ok; ++i) {
    for (int j = 0; j < grid.n_lon && !box_ok; ++j) {
      box_ok = enso_box.contains(grid.lat_centers[static_cast<size_t>(i)],
                                 grid.lon_centers[static_cast<size_t>(j)]);
    }
  }
  if (!box_ok) throw ConfigError("SynthConfig: enso box contains no grid cells");
}

namespace {

double climatology_at(const SynthConfig& cfg, double lat_deg, int month /*1..12*/) {
  double lat = deg2rad(lat_deg);
  double meridional = cfg.clim_amplitude * std::cos(lat);
  // Hemispherically antisymmetric seasonal cycle, peak NH warmth mid-year.
  double season = -0.25 * cfg.clim_amplitude * std::sin(lat) *
                  std::cos(2.0 * kPi * (month - 0.5) / 12.0);
  return meridional + season;
}

std::vector<double> forced_series(const SynthConfig& cfg) {
  int n = cfg.n_months();
  std::vector<double> f(static_cast<size_t>(n), 0.0);
  for (int t = 0; t < n; ++t) {
    double x = n > 1 ? static_cast<double>(t) / (n - 1) : 0.0;
    f[static_cast<size_t>(t)] = cfg.trend_total * x;
  }
  for (const auto& v : cfg.volcanoes) {
    int t0 = (v.year - cfg.start_year) * 12;
    if (t0 < 0 || t0 >= n) continue;
    for (int t = t0; t < n; ++t) {
      f[static_cast<size_t>(t)] -=
          v.peak_cooling * std::exp(-static_cast<double>(t - t0) / v.efold_months);
    }
  }
  return f;
}

/// Raised-cosine bump centered on the box, reaching zero at 1.5x the box
/// half-width, then scaled so its area-weighted mean over the box is 1.
std::vector<double> enso_pattern(const SynthConfig& cfg) {
  const GridSpec& g = cfg.grid;
  const LatLonBox& b = cfg.enso_box;
  double lat_c = 0.5 * (b.lat_min + b.lat_max);
  double lon_c = 0.5 * (b.lon_min + b.lon_max);
  double lat_hw = 0.5 * (b.lat_max - b.lat_min);
  double lon_hw = 0.5 * (b.lon_max - b.lon_min);
  auto bump = [](double d, double hw) {
    double u = std::abs(d) / (1.5 * hw);
    if (u >= 1.0) return 0.0;
    double c = std::cos(0.5 * kPi * u);
    return c * c;
  };
  std::vector<double> p(static_cast<size_t>(g.n_lat) * g.n_lon, 0.0);
  for (int i = 0; i < g.n_lat; ++i) {
    for (int j = 0; j < g.n_lon; ++j) {
      double lat = g.lat_centers[static_cast<size_t>(i)];
      double lon = g.lon_centers[static_cast<size_t>(j)];
      double dlon = lon - lon_c;
      while (dlon > 180.0) dlon -= 360.0;
      while (dlon < -180.0) dlon += 360.0;
      p[static_cast<size_t>(i * g.n_lon + j)] = bump(lat - lat_c, lat_hw) * bump(dlon, lon_hw);
    }
  }
  // Normalize to unit area-weighted box mean so the planted series is in
  // index units.
  double num = 0.0, den = 0.0;
  for (int i = 0; i < g.n_lat; ++i) {
    double w = std::cos(deg2rad(g.lat_centers[static_cast<size_t>(i)]));
    for (int j = 0; j < g.n_lon; ++j) {
      if (!b.contains(g.lat_centers[static_cast<size_t>(i)], g.lon_centers[static_cast<size_t>(j)]))
        continue;
      num += w * p[static_cast<size_t>(i * g.n_lon + j)];
      den += w;
    }
  }
  double boxmean = num / den;
  if (boxmean > 1e-12) {
    for (auto& x : p) x /= boxmean;
  }
  return p;
}

/// Stochastically forced damped oscillator: AR(2) with complex poles at
/// radius r and angle 2*pi/period, drive scaled for unit stationary variance
/// before multiplying by the configured amplitude.
std::vector<double> enso_process(const SynthConfig& cfg, Rng& rng, int n_months) {
  double jitter = cfg.enso_period_jitter * (2.0 * rng.uniform() - 1.0);
  double period = std::max(6.0, cfg.enso_period_months * (1.0 + jitter));
  const double r = 0.98;
  double theta = 2.0 * kPi / period;
  double a1 = 2.0 * r * std::cos(theta);
  double a2 = -r * r;
  // Stationary variance of AR(2): var = s^2 (1-a2) / ((1+a2)((1-a2)^2 - a1^2)).
  double denom = (1.0 + a2) * ((1.0 - a2) * (1.0 - a2) - a1 * a1);
  double s = cfg.enso_amplitude * std::sqrt(std::max(denom / (1.0 - a2), 1e-12));
  int burn = static_cast<int>(10 * period);
  double x1 = 0.0, x2 = 0.0;
  std::vector<double> out(static_cast<size_t>(n_months));
  for (int t = -burn; t < n_months; ++t) {
    double x = a1 * x1 + a2 * x2 + s * rng.gaussian();
    x2 = x1;
    x1 = x;
    if (t >= 0) out[static_cast<size_t>(t)] = x;
  }
  return out;
}

/// Separable box blur, half width hw: periodic in lon, clipped and
/// renormalized at the lat edges.
void box_blur(std::vector<double>& f, int n_lat, int n_lon, int hw) {
  if (hw <= 0) return;
  std::vector<double> tmp(f.size());
  for (int i = 0; i < n_lat; ++i) {
    for (int j = 0; j < n_lon; ++j) {
      double acc = 0.0;
      for (int d = -hw; d <= hw; ++d) {
        int jj = (j + d + n_lon) % n_lon;
        acc += f[static_cast<size_t>(i * n_lon + jj)];
      }
      tmp[static_cast<size_t>(i * n_lon + j)] = acc / (2 * hw + 1);
    }
  }
  for (int j = 0; j < n_lon; ++j) {
    for (int i = 0; i < n_lat; ++i) {
      double acc = 0.0;
      int lo = std::max(0, i - hw), hi = std::min(n_lat - 1, i + hw);
      for (int ii = lo; ii <= hi; ++ii) acc += tmp[static_cast<size_t>(ii * n_lon + j)];
      f[static_cast<size_t>(i * n_lon + j)] = acc / (hi - lo + 1);
    }
  }
}

}  // namespace

SynthTruth generate_ensemble(const SynthConfig& cfg) {
  cfg.validate();
  SynthTruth truth;
  truth.cfg = cfg;
  truth.forced_monthly = forced_series(cfg);
  truth.enso_pattern = enso_pattern(cfg);
  truth.members.resize(static_cast<size_t>(cfg.n_members));
  truth.enso.resize(static_cast<size_t>(cfg.n_members));

  const int n_months = cfg.n_months();
  const int n_lat = cfg.grid.n_lat, n_lon = cfg.grid.n_lon;
  const size_t cells = static_cast<size_t>(n_lat) * n_lon;

#pragma omp parallel for schedule(dynamic) num_threads(max_threads()) if (max_threads() > 1)
  for (int m = 0; m < cfg.n_members; ++m) {
    Rng rng(cfg.seed, static_cast<uint64_t>(m));
    std::vector<double> enso = enso_process(cfg, rng, n_months);

    SimSequence seq;
    seq.spec = cfg.grid;
    seq.start = YearMonth{cfg.start_year, 1};
    char id[16];
    std::snprintf(id, sizeof(id), "m%03d", m);
    seq.member_id = id;
    seq.frames.resize(static_cast<size_t>(n_months));

    std::vector<double> noise(cells);
    for (int t = 0; t < n_months; ++t) {
      for (size_t k = 0; k < cells; ++k) noise[k] = cfg.noise_std * rng.gaussian();
      box_blur(noise, n_lat, n_lon, cfg.noise_corr_cells);

      auto& frame = seq.frames[static_cast<size_t>(t)];
      frame.resize(cells);
      int month = t % 12 + 1;
      double forced = truth.forced_monthly[static_cast<size_t>(t)];
      double e = enso[static_cast<size_t>(t)];
      for (int i = 0; i < n_lat; ++i) {
        double clim = climatology_at(cfg, cfg.grid.lat_centers[static_cast<size_t>(i)], month);
        for (int j = 0; j < n_lon; ++j) {
          size_t k = static_cast<size_t>(i * n_lon + j);
          frame[k] = static_cast<float>(clim + forced + e * truth.enso_pattern[k] + noise[k]);
        }
      }
    }
    truth.members[static_cast<size_t>(m)] = std::move(seq);
    truth.enso[static_cast<size_t>(m)] = std::move(enso);
  }
  return truth;
}

std::vector<EnsoEvent> oracle_enso_events(const SynthTruth& truth, int member, double threshold,
                                          int min_months) {
  if (member < 0 || member >= static_cast<int>(truth.enso.size())) {
    throw RangeError("oracle_enso_events: no such member");
  }
  const auto& x = truth.enso[static_cast<size_t>(member)];
  const int n = static_cast<int>(x.size());
  std::vector<EnsoEvent> events;
  // Deliberately naive scan: for every month, grow the longest run of
  // same-signed exceedance starting there and keep maximal runs.
  int t = 0;
  while (t < n) {
    int sign = 0;
    if (x[static_cast<size_t>(t)] > threshold) sign = 1;
    if (x[static_cast<size_t>(t)] < -threshold) sign = -1;
    if (sign == 0) {
      ++t;
      continue;
    }
    int end = t;
    while (end + 1 < n) {
      double v = x[static_cast<size_t>(end + 1)];
      if ((sign == 1 && v > threshold) || (sign == -1 && v < -threshold)) {
        ++end;
      } else {
        break;
      }
    }
    if (end - t + 1 >= min_months) events.push_back(EnsoEvent{t, end, sign});
    t = end + 1;
  }
  return events;
}

void write_truth_sidecar(const std::string& path, const SynthTruth& truth) {
  nlohmann::ordered_json j;
  j["start_year"] = truth.cfg.start_year;
  j["n_members"] = truth.cfg.n_members;
  j["n_years"] = truth.cfg.n_years;
  j["seed"] = truth.cfg.seed;
  std::vector<int> vyears;
  for (const auto& v : truth.cfg.volcanoes) vyears.push_back(v.year);
  j["volcano_years"] = vyears;
  j["enso_box"] = {{"lat_min", truth.cfg.enso_box.lat_min},
                   {"lat_max", truth.cfg.enso_box.lat_max},
                   {"lon_min", truth.cfg.enso_box.lon_min},
                   {"lon_max", truth.cfg.enso_box.lon_max}};
  j["forced_monthly"] = truth.forced_monthly;
  j["enso"] = truth.enso;
  std::string s = j.dump();
  write_file_bytes(path, s.data(), s.size());
}

TruthSidecar load_truth_sidecar(const std::string& path) {
  std::vector<char> buf = read_file_bytes(path);
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(std::string(buf.begin(), buf.end()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("truth sidecar: ") + e.what());
  }
  TruthSidecar t;
  t.start_year = j.at("start_year").get<int>();
  t.n_members = j.at("n_members").get<int>();
  t.volcano_years = j.at("volcano_years").get<std::vector<int>>();
  t.forced_monthly = j.at("forced_monthly").get<std::vector<double>>();
  t.enso = j.at("enso").get<std::vector<std::vector<double>>>();
  const auto& b = j.at("enso_box");
  t.enso_box = LatLonBox{b.at("lat_min").get<double>(), b.at("lat_max").get<double>(),
                         b.at("lon_min").get<double>(), b.at("lon_max").get<double>()};
  return t;
}

}  // namespace ensldm
