#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ensldm/core.hpp"
#include "ensldm/eval.hpp"

namespace ensldm {

struct VolcanoEvent {
  int year = 0;
  double peak_cooling = 1.0;  // degC, applied as an instantaneous drop
  int efold_months = 24;      // exponential recovery scale
};

/// Configuration of the synthetic "toy earth" grand ensemble. Every member
/// shares the forced response (trend + volcanic); internal variability is an
/// AR(2) ENSO oscillator plus spatially smoothed noise.
struct SynthConfig {
  GridSpec grid = GridSpec::regular(24, 48);
  int n_members = 20;
  int n_years = 50;
  int start_year = 1950;
  double clim_amplitude = 20.0;  // meridional gradient scale; seasonal cycle is 1/4 of it
  double trend_total = 0.8;      // degC over the whole record
  std::vector<VolcanoEvent> volcanoes = {{1963, 1.5, 24}, {1982, 1.0, 24}, {1991, 1.2, 24}};
  double enso_period_months = 48.0;
  double enso_period_jitter = 0.1;  // relative, per member
  double enso_amplitude = 1.2;      // degC stationary std of the oscillator
  LatLonBox enso_box = {-10.0, 10.0, 190.0, 240.0};
  double noise_std = 0.5;      // degC, white noise std before smoothing
  int noise_corr_cells = 3;    // box-blur half width in grid cells
  uint64_t seed = 42;

  int n_months() const { return n_years * 12; }
  void validate() const;
};

/// Ground-truth ensemble with the planted components kept for oracle use.
struct SynthTruth {
  SynthConfig cfg;
  std::vector<SimSequence> members;
  std::vector<double> forced_monthly;       // trend + volcanic, shared by all members
  std::vector<std::vector<double>> enso;    // per member planted index series, degC
  std::vector<double> enso_pattern;         // spatial pattern, area-weighted box mean = 1
};

/// Deterministic in cfg.seed: member m draws from stream (seed, m), so
/// parallel and serial generation are bitwise identical.
SynthTruth generate_ensemble(const SynthConfig& cfg);

/// Brute-force event scan of the planted (noise-free) ENSO series of one
/// member; the reference oracle for event detection on synthetic data.
std::vector<EnsoEvent> oracle_enso_events(const SynthTruth& truth, int member,
                                          double threshold = 0.4, int min_months = 6);

/// Sidecar JSON next to the member files: forced series, volcano years,
/// planted ENSO series.
void write_truth_sidecar(const std::string& path, const SynthTruth& truth);

struct TruthSidecar {
  int start_year = 0;
  int n_members = 0;
  std::vector<int> volcano_years;
  std::vector<double> forced_monthly;
  std::vector<std::vector<double>> enso;
  LatLonBox enso_box;
};

TruthSidecar load_truth_sidecar(const std::string& path);

}  // namespace ensldm
