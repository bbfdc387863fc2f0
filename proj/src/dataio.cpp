#include "ensldm/dataio.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian pinned; big-endian hosts are unsupported");

namespace ensldm {

namespace {

using json = nlohmann::ordered_json;

void append_u32(std::vector<char>& out, uint32_t x) {
  char b[4];
  std::memcpy(b, &x, 4);
  out.insert(out.end(), b, b + 4);
}

uint32_t parse_u32(const char* p) {
  uint32_t x;
  std::memcpy(&x, p, 4);
  return x;
}

json header_to_json(const CgfHeader& h) {
  json j;
  j["n_time"] = h.n_time;
  j["n_lat"] = h.n_lat;
  j["n_lon"] = h.n_lon;
  j["n_chan"] = h.n_chan;
  j["start_year"] = h.start_year;
  j["start_month"] = h.start_month;
  j["units"] = h.units;
  j["member_id"] = h.member_id;
  j["kind"] = h.kind;
  return j;
}

CgfHeader header_from_json(const json& j) {
  CgfHeader h;
  try {
    h.n_time = j.at("n_time").get<int>();
    h.n_lat = j.at("n_lat").get<int>();
    h.n_lon = j.at("n_lon").get<int>();
    h.n_chan = j.at("n_chan").get<int>();
    h.start_year = j.at("start_year").get<int>();
    h.start_month = j.at("start_month").get<int>();
    h.units = j.at("units").get<std::string>();
    h.member_id = j.at("member_id").get<std::string>();
    h.kind = j.at("kind").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("CGF1 header: ") + e.what());
  }
  if (h.n_time <= 0) throw FormatError("CGF1 header: n_time must be positive");
  if (h.n_lat <= 0) throw FormatError("CGF1 header: n_lat must be positive");
  if (h.n_lon <= 0) throw FormatError("CGF1 header: n_lon must be positive");
  if (h.n_chan <= 0) throw FormatError("CGF1 header: n_chan must be positive");
  if (h.kind != "field" && h.kind != "latent") {
    throw FormatError("CGF1 header: kind must be \"field\" or \"latent\"");
  }
  return h;
}

}  // namespace

std::vector<char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path);
  in.seekg(0, std::ios::end);
  std::streamoff len = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<char> buf(static_cast<size_t>(len));
  if (len > 0) in.read(buf.data(), len);
  if (!in) throw IoError("read failed: " + path);
  return buf;
}

void write_file_bytes(const std::string& path, const void* data, size_t len) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
  if (!out) throw IoError("write failed: " + path);
}

void write_cgf(const std::string& path, const CgfData& data) {
  if (static_cast<int64_t>(data.payload.size()) != data.header.payload_count()) {
    throw ShapeError("write_cgf: payload length does not match header dims");
  }
  std::string hdr = header_to_json(data.header).dump();
  std::vector<char> buf;
  buf.reserve(8 + hdr.size() + data.payload.size() * 4);
  buf.insert(buf.end(), {'C', 'G', 'F', '1'});
  append_u32(buf, static_cast<uint32_t>(hdr.size()));
  buf.insert(buf.end(), hdr.begin(), hdr.end());
  size_t off = buf.size();
  buf.resize(off + data.payload.size() * 4);
  std::memcpy(buf.data() + off, data.payload.data(), data.payload.size() * 4);
  write_file_bytes(path, buf.data(), buf.size());
}

CgfData read_cgf(const std::string& path) {
  std::vector<char> buf = read_file_bytes(path);
  if (buf.size() < 8 || std::memcmp(buf.data(), "CGF1", 4) != 0) {
    throw FormatError("not a CGF1 file (bad magic): " + path);
  }
  uint32_t hlen = parse_u32(buf.data() + 4);
  if (buf.size() < 8 + hlen) throw FormatError("CGF1 header truncated: " + path);
  json j;
  try {
    j = json::parse(std::string(buf.data() + 8, buf.data() + 8 + hlen));
  } catch (const json::exception& e) {
    throw FormatError(std::string("CGF1 header JSON: ") + e.what());
  }
  CgfData out;
  out.header = header_from_json(j);
  size_t want = static_cast<size_t>(out.header.payload_count()) * 4;
  size_t have = buf.size() - 8 - hlen;
  if (have != want) {
    throw FormatError("CGF1 payload size mismatch (have " + std::to_string(have) + " bytes, want " +
                      std::to_string(want) + "): " + path);
  }
  out.payload.resize(static_cast<size_t>(out.header.payload_count()));
  std::memcpy(out.payload.data(), buf.data() + 8 + hlen, want);
  return out;
}

CgfData to_cgf(const SimSequence& seq) {
  seq.validate();
  CgfData d;
  d.header.n_time = seq.n_months();
  d.header.n_lat = seq.spec.n_lat;
  d.header.n_lon = seq.spec.n_lon;
  d.header.n_chan = 1;
  d.header.start_year = seq.start.year;
  d.header.start_month = seq.start.month;
  d.header.units = "degC";
  d.header.member_id = seq.member_id;
  d.header.kind = "field";
  d.payload.reserve(static_cast<size_t>(d.header.payload_count()));
  for (const auto& f : seq.frames) d.payload.insert(d.payload.end(), f.begin(), f.end());
  return d;
}

SimSequence to_sim_sequence(const CgfData& data) {
  if (data.header.kind != "field") throw FormatError("to_sim_sequence: kind is not \"field\"");
  if (data.header.n_chan != 1) throw FormatError("to_sim_sequence: field data must have n_chan=1");
  SimSequence seq;
  seq.spec = GridSpec::regular(data.header.n_lat, data.header.n_lon);
  seq.start = YearMonth{data.header.start_year, data.header.start_month};
  seq.member_id = data.header.member_id;
  size_t cells = static_cast<size_t>(data.header.n_lat) * data.header.n_lon;
  seq.frames.resize(static_cast<size_t>(data.header.n_time));
  for (int t = 0; t < data.header.n_time; ++t) {
    const float* p = data.payload.data() + static_cast<size_t>(t) * cells;
    seq.frames[static_cast<size_t>(t)].assign(p, p + cells);
  }
  return seq;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json manifest = json::array();
  int64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    for (const auto& o : ckpt.tensors) {
      if (&o != &t && o.name == t.name) {
        throw ShapeError("save_checkpoint: duplicate tensor name " + t.name);
      }
    }
    if (static_cast<int64_t>(t.data.size()) != t.numel()) {
      throw ShapeError("save_checkpoint: tensor " + t.name + " data/shape mismatch");
    }
    json e;
    e["name"] = t.name;
    e["shape"] = t.shape;
    e["offset"] = offset;
    manifest.push_back(e);
    offset += t.numel() * 4;
  }
  json hdr;
  hdr["manifest"] = manifest;
  hdr["config"] = ckpt.config;
  std::string hs = hdr.dump();

  std::vector<char> buf;
  buf.reserve(8 + hs.size() + static_cast<size_t>(offset));
  buf.insert(buf.end(), {'C', 'K', 'P', '1'});
  append_u32(buf, static_cast<uint32_t>(hs.size()));
  buf.insert(buf.end(), hs.begin(), hs.end());
  for (const auto& t : ckpt.tensors) {
    size_t off = buf.size();
    buf.resize(off + t.data.size() * 4);
    std::memcpy(buf.data() + off, t.data.data(), t.data.size() * 4);
  }
  write_file_bytes(path, buf.data(), buf.size());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::vector<char> buf = read_file_bytes(path);
  if (buf.size() < 8 || std::memcmp(buf.data(), "CKP1", 4) != 0) {
    throw FormatError("not a CKP1 file (bad magic): " + path);
  }
  uint32_t hlen = parse_u32(buf.data() + 4);
  if (buf.size() < 8 + hlen) throw FormatError("CKP1 header truncated: " + path);
  json hdr;
  try {
    hdr = json::parse(std::string(buf.data() + 8, buf.data() + 8 + hlen));
  } catch (const json::exception& e) {
    throw FormatError(std::string("CKP1 header JSON: ") + e.what());
  }
  Checkpoint out;
  out.config = hdr.value("config", json::object());
  const char* payload = buf.data() + 8 + hlen;
  size_t payload_len = buf.size() - 8 - hlen;
  int64_t prev_end = 0;
  for (const auto& e : hdr.at("manifest")) {
    NamedTensor t;
    t.name = e.at("name").get<std::string>();
    t.shape = e.at("shape").get<std::vector<int>>();
    int64_t off = e.at("offset").get<int64_t>();
    if (off < prev_end) throw FormatError("CKP1 manifest: overlapping or unsorted offsets");
    int64_t bytes = t.numel() * 4;
    if (off + bytes > static_cast<int64_t>(payload_len)) {
      throw FormatError("CKP1 manifest: tensor " + t.name + " exceeds payload");
    }
    t.data.resize(static_cast<size_t>(t.numel()));
    std::memcpy(t.data.data(), payload + off, static_cast<size_t>(bytes));
    prev_end = off + bytes;
    out.tensors.push_back(std::move(t));
  }
  return out;
}

void write_series_csv(const std::string& path,
                      const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  size_t len = series.empty() ? 0 : series[0].second.size();
  for (const auto& [name, col] : series) {
    if (col.size() != len) throw ShapeError("write_series_csv: column " + name + " length mismatch");
  }
  std::string out;
  for (size_t c = 0; c < series.size(); ++c) {
    if (c) out += ",";
    out += series[c].first;
  }
  out += "\n";
  char num[64];
  for (size_t r = 0; r < len; ++r) {
    for (size_t c = 0; c < series.size(); ++c) {
      if (c) out += ",";
      std::snprintf(num, sizeof(num), "%.9g", series[c].second[r]);
      out += num;
    }
    out += "\n";
  }
  write_file_bytes(path, out.data(), out.size());
}

// ---------------------------------------------------------------------------
// SHA-256 (FIPS 180-4), used for file hashes in generation manifests.

namespace {

struct Sha256 {
  uint32_t h[8] = {0x6a09e667u, 0xbb67ae85u, 0x3c6ef372u, 0xa54ff53au,
                   0x510e527fu, 0x9b05688cu, 0x1f83d9abu, 0x5be0cd19u};
  unsigned char block[64];
  size_t block_len = 0;
  uint64_t total_len = 0;

  static uint32_t rotr(uint32_t x, int n) { return (x >> n) | (x << (32 - n)); }

  void process(const unsigned char* p) {
    static const uint32_t k[64] = {
        0x428a2f98u, 0x71374491u, 0xb5c0fbcfu, 0xe9b5dba5u, 0x3956c25bu, 0x59f111f1u, 0x923f82a4u,
        0xab1c5ed5u, 0xd807aa98u, 0x12835b01u, 0x243185beu, 0x550c7dc3u, 0x72be5d74u, 0x80deb1feu,
        0x9bdc06a7u, 0xc19bf174u, 0xe49b69c1u, 0xefbe4786u, 0x0fc19dc6u, 0x240ca1ccu, 0x2de92c6fu,
        0x4a7484aau, 0x5cb0a9dcu, 0x76f988dau, 0x983e5152u, 0xa831c66du, 0xb00327c8u, 0xbf597fc7u,
        0xc6e00bf3u, 0xd5a79147u, 0x06ca6351u, 0x14292967u, 0x27b70a85u, 0x2e1b2138u, 0x4d2c6dfcu,
        0x53380d13u, 0x650a7354u, 0x766a0abbu, 0x81c2c92eu, 0x92722c85u, 0xa2bfe8a1u, 0xa81a664bu,
        0xc24b8b70u, 0xc76c51a3u, 0xd192e819u, 0xd6990624u, 0xf40e3585u, 0x106aa070u, 0x19a4c116u,
        0x1e376c08u, 0x2748774cu, 0x34b0bcb5u, 0x391c0cb3u, 0x4ed8aa4au, 0x5b9cca4fu, 0x682e6ff3u,
        0x748f82eeu, 0x78a5636fu, 0x84c87814u, 0x8cc70208u, 0x90befffau, 0xa4506cebu, 0xbef9a3f7u,
        0xc67178f2u};
    uint32_t w[64];
    for (int i = 0; i < 16; ++i) {
      w[i] = (uint32_t(p[4 * i]) << 24) | (uint32_t(p[4 * i + 1]) << 16) |
             (uint32_t(p[4 * i + 2]) << 8) | uint32_t(p[4 * i + 3]);
    }
    for (int i = 16; i < 64; ++i) {
      uint32_t s0 = rotr(w[i - 15], 7) ^ rotr(w[i - 15], 18) ^ (w[i - 15] >> 3);
      uint32_t s1 = rotr(w[i - 2], 17) ^ rotr(w[i - 2], 19) ^ (w[i - 2] >> 10);
      w[i] = w[i - 16] + s0 + w[i - 7] + s1;
    }
    uint32_t a = h[0], b = h[1], c = h[2], d = h[3], e = h[4], f = h[5], g = h[6], hh = h[7];
    for (int i = 0; i < 64; ++i) {
      uint32_t s1 = rotr(e, 6) ^ rotr(e, 11) ^ rotr(e, 25);
      uint32_t ch = (e & f) ^ (~e & g);
      uint32_t t1 = hh + s1 + ch + k[i] + w[i];
      uint32_t s0 = rotr(a, 2) ^ rotr(a, 13) ^ rotr(a, 22);
      uint32_t maj = (a & b) ^ (a & c) ^ (b & c);
      uint32_t t2 = s0 + maj;
      hh = g;
      g = f;
      f = e;
      e = d + t1;
      d = c;
      c = b;
      b = a;
      a = t1 + t2;
    }
    h[0] += a;
    h[1] += b;
    h[2] += c;
    h[3] += d;
    h[4] += e;
    h[5] += f;
    h[6] += g;
    h[7] += hh;
  }

  void update(const void* data, size_t len) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    total_len += len;
    while (len > 0) {
      size_t take = std::min(len, sizeof(block) - block_len);
      std::memcpy(block + block_len, p, take);
      block_len += take;
      p += take;
      len -= take;
      if (block_len == 64) {
        process(block);
        block_len = 0;
      }
    }
  }

  std::string hex_digest() {
    uint64_t bits = total_len * 8;
    unsigned char pad = 0x80;
    update(&pad, 1);
    unsigned char zero = 0;
    while (block_len != 56) update(&zero, 1);
    unsigned char lenb[8];
    for (int i = 0; i < 8; ++i) lenb[i] = static_cast<unsigned char>(bits >> (56 - 8 * i));
    update(lenb, 8);
    std::string out;
    out.reserve(64);
    static const char* digits = "0123456789abcdef";
    for (uint32_t x : h) {
      for (int i = 7; i >= 0; --i) out += digits[(x >> (4 * i)) & 0xF];
    }
    return out;
  }
};

}  // namespace

std::string sha256_hex(const void* data, size_t len) {
  Sha256 s;
  s.update(data, len);
  return s.hex_digest();
}

std::string sha256_file(const std::string& path) {
  std::vector<char> buf = read_file_bytes(path);
  return sha256_hex(buf.data(), buf.size());
}

}  // namespace ensldm
