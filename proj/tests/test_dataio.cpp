#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ensldm/dataio.hpp"
#include "ensldm/rng.hpp"
#include "ensldm/synthdata.hpp"
#include "ensldm/vae.hpp"

using namespace ensldm;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "ensldm_dataio_tests";
  fs::create_directories(dir);
  return (dir / name).string();
}

}  // namespace

TEST_CASE("cgf round trip preserves payload bytes") {
  CgfData d;
  d.header.n_time = 1;
  d.header.n_chan = 1;
  d.header.n_lat = 2;
  d.header.n_lon = 2;
  d.header.start_year = 1950;
  d.header.member_id = "m000";
  d.payload = {1.5f, -2.25f, 0.0f, 3.0f};
  std::string path = tmp_path("tiny.cgf");
  write_cgf(path, d);
  CgfData back = read_cgf(path);
  CHECK(back.header.n_lat == 2);
  CHECK(back.header.member_id == "m000");
  REQUIRE(back.payload.size() == 4);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(std::memcmp(&back.payload[i], &d.payload[i], 4) == 0);
  }
}

TEST_CASE("cgf rejects bad magic, bad dims and truncation") {
  std::string path = tmp_path("bad.cgf");
  SUBCASE("bad magic") {
    const char bytes[] = "NOPE\x00\x00\x00\x00";
    write_file_bytes(path, bytes, 8);
    CHECK_THROWS_AS(read_cgf(path), FormatError);
  }
  SUBCASE("zero n_lat") {
    std::string hdr =
        R"({"n_time":1,"n_lat":0,"n_lon":2,"n_chan":1,"start_year":0,"start_month":1,"units":"degC","member_id":"x","kind":"field"})";
    std::vector<char> buf;
    buf.insert(buf.end(), {'C', 'G', 'F', '1'});
    uint32_t len = static_cast<uint32_t>(hdr.size());
    buf.insert(buf.end(), reinterpret_cast<char*>(&len), reinterpret_cast<char*>(&len) + 4);
    buf.insert(buf.end(), hdr.begin(), hdr.end());
    write_file_bytes(path, buf.data(), buf.size());
    CHECK_THROWS_AS(read_cgf(path), FormatError);
  }
  SUBCASE("truncated payload") {
    CgfData d;
    d.header.n_time = 1;
    d.header.n_lat = 2;
    d.header.n_lon = 2;
    d.payload = {1, 2, 3, 4};
    write_cgf(path, d);
    std::vector<char> bytes = read_file_bytes(path);
    bytes.resize(bytes.size() - 4);
    write_file_bytes(path, bytes.data(), bytes.size());
    CHECK_THROWS_AS(read_cgf(path), FormatError);
  }
}

TEST_CASE("synthetic member survives a cgf round trip, checksum-verified") {
  SynthConfig cfg;
  cfg.grid = GridSpec::regular(8, 16);
  cfg.n_members = 2;
  cfg.n_years = 10;  // 120 months
  cfg.seed = 31;
  SynthTruth truth = generate_ensemble(cfg);
  CgfData d = to_cgf(truth.members[1]);
  std::string path = tmp_path("member.cgf");
  write_cgf(path, d);
  CgfData back = read_cgf(path);
  std::string h1 = sha256_hex(d.payload.data(), d.payload.size() * 4);
  std::string h2 = sha256_hex(back.payload.data(), back.payload.size() * 4);
  CHECK(h1 == h2);
  SimSequence seq = to_sim_sequence(back);
  CHECK(seq.n_months() == 120);
  CHECK(seq.member_id == "m001");
}

TEST_CASE("file writes are byte-reproducible") {
  SynthConfig cfg;
  cfg.grid = GridSpec::regular(8, 16);
  cfg.n_members = 2;
  cfg.n_years = 1;
  SynthTruth truth = generate_ensemble(cfg);
  std::string p1 = tmp_path("repr1.cgf"), p2 = tmp_path("repr2.cgf");
  write_cgf(p1, to_cgf(truth.members[0]));
  write_cgf(p2, to_cgf(truth.members[0]));
  CHECK(sha256_file(p1) == sha256_file(p2));
}

TEST_CASE("checkpoint with empty manifest is valid") {
  Checkpoint ck;
  ck.config["note"] = "empty";
  std::string path = tmp_path("empty.ckpt");
  save_checkpoint(path, ck);
  Checkpoint back = load_checkpoint(path);
  CHECK(back.tensors.empty());
  CHECK(back.config.at("note") == "empty");
}

TEST_CASE("single tensor round trip is bitwise") {
  Checkpoint ck;
  ck.tensors.push_back(NamedTensor{"eye", {2, 2}, {1.0f, 0.0f, 0.0f, 1.0f}});
  std::string path = tmp_path("eye.ckpt");
  save_checkpoint(path, ck);
  Checkpoint back = load_checkpoint(path);
  REQUIRE(back.tensors.size() == 1);
  CHECK(back.tensors[0].name == "eye");
  CHECK(back.tensors[0].shape == std::vector<int>{2, 2});
  CHECK(std::memcmp(back.tensors[0].data.data(), ck.tensors[0].data.data(), 16) == 0);
}

TEST_CASE("duplicate tensor names are rejected") {
  Checkpoint ck;
  ck.tensors.push_back(NamedTensor{"w", {1}, {1.0f}});
  ck.tensors.push_back(NamedTensor{"w", {1}, {2.0f}});
  CHECK_THROWS_AS(save_checkpoint(tmp_path("dup.ckpt"), ck), ShapeError);
}

TEST_CASE("full VAE parameter set round-trips bitwise") {
  VaeConfig cfg;
  cfg.f = 2;
  cfg.c = 2;
  cfg.enc_widths = {4, 6};
  Rng rng(17);
  Vae<float> vae(cfg, 8, 16, rng);
  Checkpoint ck;
  for (const auto& e : vae.params().entries) {
    ck.tensors.push_back(NamedTensor{e.name, e.w.shape, e.w.v});
  }
  std::string path = tmp_path("vae.ckpt");
  save_checkpoint(path, ck);
  Checkpoint back = load_checkpoint(path);
  REQUIRE(back.tensors.size() == ck.tensors.size());
  for (size_t i = 0; i < ck.tensors.size(); ++i) {
    std::string h1 =
        sha256_hex(ck.tensors[i].data.data(), ck.tensors[i].data.size() * 4);
    std::string h2 =
        sha256_hex(back.tensors[i].data.data(), back.tensors[i].data.size() * 4);
    CHECK(h1 == h2);
    CHECK(back.tensors[i].name == ck.tensors[i].name);
  }
}

TEST_CASE("corrupted checkpoint magic is rejected") {
  std::string path = tmp_path("badmagic.ckpt");
  const char bytes[] = "XXXX\x00\x00\x00\x00";
  write_file_bytes(path, bytes, 8);
  CHECK_THROWS_AS(load_checkpoint(path), FormatError);
}

TEST_CASE("series csv shape and parse-back") {
  SUBCASE("two series of length two give three lines") {
    std::string path = tmp_path("two.csv");
    write_series_csv(path, {{"a", {1.0, 2.0}}, {"b", {3.0, 4.0}}});
    std::ifstream in(path);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 3);
  }
  SUBCASE("empty series set gives a header-only file") {
    std::string path = tmp_path("empty.csv");
    write_series_csv(path, {{"a", {}}, {"b", {}}});
    std::ifstream in(path);
    std::string line;
    int lines = 0;
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 1);
  }
  SUBCASE("length mismatch is a shape error") {
    CHECK_THROWS_AS(write_series_csv(tmp_path("bad.csv"), {{"a", {1.0}}, {"b", {}}}), ShapeError);
  }
  SUBCASE("values parse back within 1e-6") {
    std::string path = tmp_path("parse.csv");
    std::vector<double> xs = {3.14159265358979, -1234.56789, 1e-7, 42.0};
    write_series_csv(path, {{"x", xs}});
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "x");
    size_t i = 0;
    while (std::getline(in, line)) {
      double v = std::stod(line);
      CHECK(std::abs(v - xs[i]) <= 1e-6 * std::max(1.0, std::abs(xs[i])));
      ++i;
    }
    CHECK(i == xs.size());
  }
}

TEST_CASE("sha256 known vectors") {
  CHECK(sha256_hex("", 0) == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  const char* abc = "abc";
  CHECK(sha256_hex(abc, 3) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
