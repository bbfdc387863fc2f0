#include "ensldm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "ensldm/dataio.hpp"

namespace ensldm {

EnsembleStats ensemble_stats(const std::vector<SimSequence>& members) {
  if (members.size() < 2) throw RangeError("ensemble_stats: need at least 2 members");
  for (const auto& m : members) {
    if (!(m.start == members[0].start) || m.n_months() != members[0].n_months() ||
        !(m.spec == members[0].spec)) {
      throw RangeError("ensemble_stats: members have misaligned time axes or grids");
    }
  }
  // Per member annual series, then cross-member mean and n-1 std per year.
  std::vector<std::vector<std::pair<int, double>>> annual;
  annual.reserve(members.size());
  for (const auto& m : members) annual.push_back(annual_mean(m));

  EnsembleStats out;
  size_t n_years = annual[0].size();
  for (const auto& a : annual) {
    if (a.size() != n_years) throw RangeError("ensemble_stats: inconsistent year counts");
  }
  for (size_t y = 0; y < n_years; ++y) {
    double sum = 0.0;
    for (const auto& a : annual) sum += a[y].second;
    double mean = sum / static_cast<double>(members.size());
    double ss = 0.0;
    for (const auto& a : annual) {
      double d = a[y].second - mean;
      ss += d * d;
    }
    out.years.push_back(annual[0][y].first);
    out.mean.push_back(mean);
    out.spread.push_back(std::sqrt(ss / static_cast<double>(members.size() - 1)));
  }
  return out;
}

std::vector<double> enso_index(const SimSequence& seq, const LatLonBox& box, int clim_start,
                               int clim_end, int smooth_months) {
  seq.validate();
  const GridSpec& g = seq.spec;
  std::vector<std::pair<size_t, double>> cells;  // (flat index, cos weight)
  for (int i = 0; i < g.n_lat; ++i) {
    for (int j = 0; j < g.n_lon; ++j) {
      double lat = g.lat_centers[static_cast<size_t>(i)];
      double lon = g.lon_centers[static_cast<size_t>(j)];
      if (box.contains(lat, lon)) {
        cells.emplace_back(static_cast<size_t>(i * g.n_lon + j), std::cos(deg2rad(lat)));
      }
    }
  }
  if (cells.empty()) throw RangeError("enso_index: box contains no grid cells");

  int n = seq.n_months();
  std::vector<double> boxmean(static_cast<size_t>(n));
  double wsum = 0.0;
  for (const auto& [k, w] : cells) wsum += w;
  for (int t = 0; t < n; ++t) {
    double acc = 0.0;
    const auto& f = seq.frames[static_cast<size_t>(t)];
    for (const auto& [k, w] : cells) acc += w * f[k];
    boxmean[static_cast<size_t>(t)] = acc / wsum;
  }

  // Monthly climatology of the box series inside the window.
  double csum[12] = {0};
  int ccount[12] = {0};
  for (int t = 0; t < n; ++t) {
    YearMonth ym = seq.time_at(t);
    if (ym.year < clim_start || ym.year > clim_end) continue;
    csum[ym.month - 1] += boxmean[static_cast<size_t>(t)];
    ccount[ym.month - 1] += 1;
  }
  for (int m = 0; m < 12; ++m) {
    if (ccount[m] == 0) throw RangeError("enso_index: climatology window misses a month");
  }
  std::vector<double> anom(static_cast<size_t>(n));
  for (int t = 0; t < n; ++t) {
    YearMonth ym = seq.time_at(t);
    anom[static_cast<size_t>(t)] =
        boxmean[static_cast<size_t>(t)] - csum[ym.month - 1] / ccount[ym.month - 1];
  }

  // Centered running mean; the window shrinks near the series ends.
  int hw = smooth_months / 2;
  std::vector<double> idx(static_cast<size_t>(n));
  for (int t = 0; t < n; ++t) {
    int lo = std::max(0, t - hw), hi = std::min(n - 1, t + hw);
    double acc = 0.0;
    for (int s = lo; s <= hi; ++s) acc += anom[static_cast<size_t>(s)];
    idx[static_cast<size_t>(t)] = acc / (hi - lo + 1);
  }
  return idx;
}

std::vector<EnsoEvent> detect_events(const std::vector<double>& index, double threshold,
                                     int min_months) {
  if (!(threshold > 0)) throw ConfigError("detect_events: threshold must be positive");
  if (min_months < 1) throw ConfigError("detect_events: min_months must be >= 1");
  std::vector<EnsoEvent> events;
  const int n = static_cast<int>(index.size());
  int run_start = -1, run_sign = 0;
  auto flush = [&](int end) {
    if (run_sign != 0 && end - run_start + 1 >= min_months) {
      events.push_back(EnsoEvent{run_start, end, run_sign});
    }
  };
  for (int t = 0; t < n; ++t) {
    int sign = 0;
    if (index[static_cast<size_t>(t)] > threshold) sign = 1;
    if (index[static_cast<size_t>(t)] < -threshold) sign = -1;
    if (sign != run_sign) {
      flush(t - 1);
      run_sign = sign;
      run_start = t;
    }
  }
  flush(n - 1);
  return events;
}

EnsembleReport compare_ensembles(const std::vector<SimSequence>& orig,
                                 const std::vector<SimSequence>& gen, const EnsoParams& enso,
                                 const std::vector<int>& volcano_years) {
  EnsembleReport rep;
  rep.orig = ensemble_stats(orig);
  rep.gen = ensemble_stats(gen);
  rep.volcano_years = volcano_years;

  // Align on common years.
  for (size_t a = 0; a < rep.orig.years.size(); ++a) {
    for (size_t b = 0; b < rep.gen.years.size(); ++b) {
      if (rep.gen.years[b] == rep.orig.years[a]) rep.years.push_back(rep.orig.years[a]);
    }
  }
  if (rep.years.empty()) throw RangeError("compare_ensembles: no overlapping years");

  auto at_year = [](const EnsembleStats& s, int year) {
    for (size_t i = 0; i < s.years.size(); ++i) {
      if (s.years[i] == year) return i;
    }
    throw RangeError("compare_ensembles: year lookup failed");
  };

  double se = 0.0, orig_spread_sum = 0.0, gen_spread_sum = 0.0;
  for (int y : rep.years) {
    size_t a = at_year(rep.orig, y), b = at_year(rep.gen, y);
    double d = rep.gen.mean[b] - rep.orig.mean[a];
    se += d * d;
    orig_spread_sum += rep.orig.spread[a];
    gen_spread_sum += rep.gen.spread[b];
    double denom = rep.orig.spread[a];
    rep.spread_ratio.push_back(denom > 1e-12 ? rep.gen.spread[b] / denom : 0.0);
  }
  rep.mean_rmse = std::sqrt(se / static_cast<double>(rep.years.size()));
  rep.orig_spread_time_mean = orig_spread_sum / static_cast<double>(rep.years.size());
  rep.spread_ratio_time_mean =
      orig_spread_sum > 1e-12 ? gen_spread_sum / orig_spread_sum : 0.0;

  // Event statistics, full record climatology.
  auto count_events = [&](const std::vector<SimSequence>& members) {
    double total = 0.0;
    for (const auto& m : members) {
      int y0 = m.time_at(0).year, y1 = m.time_at(m.n_months() - 1).year;
      auto idx = enso_index(m, enso.box, y0, y1, enso.smooth_months);
      total += static_cast<double>(detect_events(idx, enso.threshold, enso.min_months).size());
    }
    return total / static_cast<double>(members.size());
  };
  rep.orig_events_per_member = count_events(orig);
  rep.gen_events_per_member = count_events(gen);

  // Forced-event check: the generated mean must dip around each volcano year.
  for (int vy : volcano_years) {
    bool ok = false;
    for (size_t i = 0; i < rep.gen.years.size(); ++i) {
      int y = rep.gen.years[i];
      if (std::abs(y - vy) > 1) continue;
      double here = rep.gen.mean[i];
      double left = i > 0 ? rep.gen.mean[i - 1] : std::numeric_limits<double>::infinity();
      double right = i + 1 < rep.gen.mean.size() ? rep.gen.mean[i + 1]
                                                 : std::numeric_limits<double>::infinity();
      if (here <= left && here <= right) {
        ok = true;
        break;
      }
    }
    rep.volcano_dip_ok.push_back(ok);
  }
  return rep;
}

void write_report(const std::string& dir, const EnsembleReport& rep) {
  std::vector<std::pair<std::string, std::vector<double>>> series;
  std::vector<double> years(rep.years.begin(), rep.years.end());
  series.emplace_back("year", years);

  auto pick = [&](const EnsembleStats& s, const std::vector<double>& v) {
    std::vector<double> out;
    for (int y : rep.years) {
      for (size_t i = 0; i < s.years.size(); ++i) {
        if (s.years[i] == y) out.push_back(v[i]);
      }
    }
    return out;
  };
  series.emplace_back("orig_mean", pick(rep.orig, rep.orig.mean));
  series.emplace_back("orig_spread", pick(rep.orig, rep.orig.spread));
  series.emplace_back("gen_mean", pick(rep.gen, rep.gen.mean));
  series.emplace_back("gen_spread", pick(rep.gen, rep.gen.spread));
  series.emplace_back("spread_ratio", rep.spread_ratio);
  write_series_csv(dir + "/series.csv", series);

  nlohmann::ordered_json j;
  j["mean_rmse"] = rep.mean_rmse;
  j["orig_spread_time_mean"] = rep.orig_spread_time_mean;
  j["spread_ratio_time_mean"] = rep.spread_ratio_time_mean;
  j["orig_events_per_member"] = rep.orig_events_per_member;
  j["gen_events_per_member"] = rep.gen_events_per_member;
  j["volcano_years"] = rep.volcano_years;
  std::vector<int> dips;
  for (bool b : rep.volcano_dip_ok) dips.push_back(b ? 1 : 0);
  j["volcano_dip_ok"] = dips;
  if (rep.vae_rmse >= 0) {
    j["vae_rmse"] = rep.vae_rmse;
    j["vae_rmse_limit"] = rep.vae_rmse_limit;
  }
  std::string s = j.dump(2);
  s += "\n";
  write_file_bytes(dir + "/report.json", s.data(), s.size());
}

}  // namespace ensldm
