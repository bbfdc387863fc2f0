#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ensldm/common.hpp"
#include "ensldm/core.hpp"

namespace ensldm {

/// Header of the CGF1 gridded-sequence container. A CGF1 file is
///   magic "CGF1" | u32-LE header length | header JSON | f32-LE payload
/// with the payload row-major ordered [time][chan][lat][lon].
struct CgfHeader {
  int n_time = 0;
  int n_lat = 0;
  int n_lon = 0;
  int n_chan = 1;
  int start_year = 0;
  int start_month = 1;
  std::string units = "degC";
  std::string member_id;
  std::string kind = "field";  // "field" | "latent"

  int64_t payload_count() const {
    return static_cast<int64_t>(n_time) * n_chan * n_lat * n_lon;
  }
};

struct CgfData {
  CgfHeader header;
  std::vector<float> payload;
};

void write_cgf(const std::string& path, const CgfData& data);
CgfData read_cgf(const std::string& path);

CgfData to_cgf(const SimSequence& seq);
SimSequence to_sim_sequence(const CgfData& data);

/// Named float tensor as stored in CKP1 checkpoints.
struct NamedTensor {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;

  int64_t numel() const {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

/// CKP1 checkpoint container:
///   magic "CKP1" | u32-LE header length | header JSON | f32-LE payload
/// where the header JSON is {"manifest": [{name, shape, offset}...],
/// "config": {...}} and offsets are ascending byte positions into the
/// payload region.
struct Checkpoint {
  std::vector<NamedTensor> tensors;
  nlohmann::ordered_json config;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// CSV with a header row of names, one row per index, LF line endings,
/// '.' decimal separator, 9 significant digits.
void write_series_csv(const std::string& path,
                      const std::vector<std::pair<std::string, std::vector<double>>>& series);

std::string sha256_hex(const void* data, size_t len);
std::string sha256_file(const std::string& path);

std::vector<char> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const void* data, size_t len);

}  // namespace ensldm
