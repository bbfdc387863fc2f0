#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ensldm/core.hpp"
#include "ensldm/rng.hpp"
#include "ensldm/synthdata.hpp"

using namespace ensldm;

namespace {

SimSequence constant_sequence(const GridSpec& spec, int months, float value) {
  SimSequence s;
  s.spec = spec;
  s.start = YearMonth{2000, 1};
  s.frames.assign(static_cast<size_t>(months),
                  std::vector<float>(static_cast<size_t>(spec.n_lat * spec.n_lon), value));
  return s;
}

}  // namespace

TEST_CASE("spatial mean of a constant field is the constant") {
  GridSpec spec = GridSpec::regular(8, 16);
  GridField f{spec, std::vector<float>(static_cast<size_t>(8 * 16), 3.0f)};
  CHECK(spatial_mean_weighted(f) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(spatial_mean_unweighted(f) == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("symmetric bands average to the midpoint under cos weights") {
  GridSpec spec = GridSpec::regular(4, 8);
  std::vector<float> v(static_cast<size_t>(4 * 8));
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 8; ++j) v[static_cast<size_t>(i * 8 + j)] = i < 2 ? 0.0f : 10.0f;
  }
  // cos weights are symmetric about the equator, so the two halves weigh the
  // same.
  CHECK(spatial_mean_weighted(GridField{spec, v}) == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("weighted mean matches an independent double-precision quadrature") {
  GridSpec spec = GridSpec::regular(16, 32);
  std::vector<float> v(static_cast<size_t>(16 * 32));
  for (int i = 0; i < 16; ++i) {
    double lat = spec.lat_centers[static_cast<size_t>(i)];
    for (int j = 0; j < 32; ++j) {
      v[static_cast<size_t>(i * 32 + j)] = static_cast<float>(5.0 * std::sin(deg2rad(lat)) +
                                                              0.5 * lat * lat / 90.0);
    }
  }
  // Oracle: per-longitude accumulation first, opposite order from the
  // implementation.
  double num = 0.0, den = 0.0;
  for (int j = 0; j < 32; ++j) {
    for (int i = 0; i < 16; ++i) {
      double w = std::cos(deg2rad(spec.lat_centers[static_cast<size_t>(i)]));
      num += w * v[static_cast<size_t>(i * 32 + j)];
      den += w;
    }
  }
  CHECK(spatial_mean_weighted(GridField{spec, v}) == doctest::Approx(num / den).epsilon(1e-12));
}

TEST_CASE("spatial mean rejects non-finite fields") {
  GridSpec spec = GridSpec::regular(4, 8);
  std::vector<float> v(static_cast<size_t>(4 * 8), 1.0f);
  v[5] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(spatial_mean_weighted(GridField{spec, v}), Error);
}

TEST_CASE("spatial mean is linear") {
  GridSpec spec = GridSpec::regular(8, 16);
  Rng rng(11);
  std::vector<float> fa(static_cast<size_t>(8 * 16)), fb(fa);
  for (auto& x : fa) x = static_cast<float>(rng.gaussian());
  for (auto& x : fb) x = static_cast<float>(rng.gaussian());
  double ma = spatial_mean_weighted(GridField{spec, fa});
  double mb = spatial_mean_weighted(GridField{spec, fb});
  std::vector<float> combo(fa.size());
  for (size_t i = 0; i < fa.size(); ++i) combo[i] = 2.5f * fa[i] - 1.25f * fb[i];
  double mc = spatial_mean_weighted(GridField{spec, combo});
  CHECK(mc == doctest::Approx(2.5 * ma - 1.25 * mb).epsilon(1e-5));
}

TEST_CASE("annual mean over whole years") {
  GridSpec spec = GridSpec::regular(4, 8);
  SUBCASE("constant 24 months gives two identical years") {
    auto s = constant_sequence(spec, 24, 1.0f);
    auto am = annual_mean(s);
    REQUIRE(am.size() == 2);
    CHECK(am[0].second == doctest::Approx(1.0));
    CHECK(am[1].second == doctest::Approx(1.0));
    CHECK(am[0].first == 2000);
    CHECK(am[1].first == 2001);
  }
  SUBCASE("months valued 1..12 average to 6.5") {
    auto s = constant_sequence(spec, 12, 0.0f);
    for (int t = 0; t < 12; ++t) {
      for (auto& x : s.frames[static_cast<size_t>(t)]) x = static_cast<float>(t + 1);
    }
    auto am = annual_mean(s);
    REQUIRE(am.size() == 1);
    CHECK(am[0].second == doctest::Approx(6.5).epsilon(1e-12));
  }
  SUBCASE("short sequences give an empty series") {
    auto s = constant_sequence(spec, 11, 1.0f);
    CHECK(annual_mean(s).empty());
  }
  SUBCASE("partial trailing year is dropped") {
    auto s = constant_sequence(spec, 30, 2.0f);
    CHECK(annual_mean(s).size() == 2);
  }
}

TEST_CASE("annual mean of a synthetic member matches a double-precision oracle") {
  SynthConfig cfg;
  cfg.grid = GridSpec::regular(8, 16);
  cfg.n_members = 2;
  cfg.n_years = 3;
  cfg.seed = 5;
  SynthTruth truth = generate_ensemble(cfg);
  const SimSequence& m = truth.members[0];
  auto am = annual_mean(m);
  REQUIRE(am.size() == 3);
  for (size_t y = 0; y < am.size(); ++y) {
    // Oracle accumulates month means in reverse order.
    double acc = 0.0;
    for (int t = 11; t >= 0; --t) {
      acc += spatial_mean_weighted(m.field(static_cast<int>(y) * 12 + t));
    }
    CHECK(am[y].second == doctest::Approx(acc / 12.0).epsilon(1e-12));
  }
}

TEST_CASE("monthly anomaly removes constant and seasonal structure") {
  GridSpec spec = GridSpec::regular(4, 8);
  SUBCASE("constant sequence becomes zero") {
    auto s = constant_sequence(spec, 36, 7.0f);
    auto a = monthly_anomaly(s, 2000, 2002);
    for (const auto& f : a.frames) {
      for (float x : f) CHECK(std::abs(x) <= 1e-5f);
    }
  }
  SUBCASE("pure annual cycle becomes zero") {
    auto s = constant_sequence(spec, 48, 0.0f);
    for (int t = 0; t < 48; ++t) {
      float v = static_cast<float>(std::sin(2.0 * kPi * (t % 12) / 12.0));
      for (auto& x : s.frames[static_cast<size_t>(t)]) x = v;
    }
    auto a = monthly_anomaly(s, 2000, 2003);
    for (const auto& f : a.frames) {
      for (float x : f) CHECK(std::abs(x) <= 1e-5f);
    }
  }
  SUBCASE("window outside the record throws") {
    auto s = constant_sequence(spec, 24, 0.0f);
    CHECK_THROWS_AS(monthly_anomaly(s, 1999, 2000), RangeError);
    CHECK_THROWS_AS(monthly_anomaly(s, 2001, 2002), RangeError);
  }
}

TEST_CASE("anomaly of a planted trend equals the trend minus its window mean") {
  GridSpec spec = GridSpec::regular(4, 8);
  auto s = constant_sequence(spec, 48, 0.0f);
  const double slope = 0.01;
  for (int t = 0; t < 48; ++t) {
    for (auto& x : s.frames[static_cast<size_t>(t)]) x = static_cast<float>(slope * t);
  }
  auto a = monthly_anomaly(s, 2000, 2003);
  // Oracle: for calendar month m the climatology is the mean of slope*(m-1 +
  // 12y) over the 4 window years.
  for (int t = 0; t < 48; ++t) {
    int m = t % 12;
    double clim = 0.0;
    for (int y = 0; y < 4; ++y) clim += slope * (m + 12 * y);
    clim /= 4.0;
    double expect = slope * t - clim;
    CHECK(static_cast<double>(a.frames[static_cast<size_t>(t)][0]) ==
          doctest::Approx(expect).epsilon(1e-5));
  }
}

TEST_CASE("climatology-window anomalies sum to zero per calendar month") {
  SynthConfig cfg;
  cfg.grid = GridSpec::regular(8, 16);
  cfg.n_members = 2;
  cfg.n_years = 4;
  cfg.seed = 9;
  SynthTruth truth = generate_ensemble(cfg);
  auto a = monthly_anomaly(truth.members[0], cfg.start_year, cfg.start_year + 3);
  size_t cells = a.frames[0].size();
  for (int m = 0; m < 12; ++m) {
    for (size_t i = 0; i < cells; ++i) {
      double sum = 0.0;
      for (int y = 0; y < 4; ++y) sum += a.frames[static_cast<size_t>(m + 12 * y)][i];
      CHECK(std::abs(sum) <= 1e-4);
    }
  }
}

TEST_CASE("normalize and denormalize") {
  GridSpec spec = GridSpec::regular(4, 8);
  SUBCASE("identity normalizer") {
    auto s = constant_sequence(spec, 3, 4.0f);
    auto n = normalize(s, Normalizer{0.0, 1.0});
    CHECK(n.frames[0][0] == 4.0f);
  }
  SUBCASE("centering") {
    auto s = constant_sequence(spec, 1, 10.0f);
    auto n = normalize(s, Normalizer{10.0, 2.0});
    CHECK(n.frames[0][0] == 0.0f);
  }
  SUBCASE("invalid std") {
    auto s = constant_sequence(spec, 1, 0.0f);
    CHECK_THROWS_AS(normalize(s, Normalizer{0.0, 0.0}), ConfigError);
    CHECK_THROWS_AS(denormalize(s, Normalizer{0.0, -1.0}), ConfigError);
  }
  SUBCASE("random round trip within f32 tolerance") {
    auto s = constant_sequence(spec, 12, 0.0f);
    Rng rng(3);
    for (auto& f : s.frames) {
      for (auto& x : f) x = static_cast<float>(rng.uniform(-30.0, 30.0));
    }
    Normalizer norm{12.3, 7.7};
    auto round = denormalize(normalize(s, norm), norm);
    for (size_t t = 0; t < s.frames.size(); ++t) {
      for (size_t i = 0; i < s.frames[t].size(); ++i) {
        CHECK(std::abs(round.frames[t][i] - s.frames[t][i]) <= 1e-5f);
        CHECK(std::abs(round.frames[t][i] - s.frames[t][i]) <=
              8.0f * std::numeric_limits<float>::epsilon() *
                  std::max(1.0f, std::abs(s.frames[t][i])));
      }
    }
  }
}

TEST_CASE("grid spec invariants") {
  CHECK_THROWS_AS(GridSpec::regular(2, 16), ConfigError);
  CHECK_THROWS_AS(GridSpec::regular(8, 4), ConfigError);
  GridSpec bad = GridSpec::regular(8, 16);
  bad.lat_centers[2] = bad.lat_centers[1];
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}
