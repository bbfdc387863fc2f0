#include "ensldm/runconfig.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace ensldm {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (...) {
    throw ConfigError("config: key " + key + " expects a number, got \"" + v + "\"");
  }
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    long x = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return static_cast<int>(x);
  } catch (...) {
    throw ConfigError("config: key " + key + " expects an integer, got \"" + v + "\"");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return static_cast<uint64_t>(x);
  } catch (...) {
    throw ConfigError("config: key " + key + " expects an unsigned integer, got \"" + v + "\"");
  }
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& item : split_list(v)) out.push_back(parse_int(key, item));
  return out;
}

std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const auto& item : split_list(v)) out.push_back(parse_double(key, item));
  return out;
}

}  // namespace

RunConfig RunConfig::defaults() {
  RunConfig c;
  c.eval_enso.box = c.synth.enso_box;
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);

  RunConfig cfg = defaults();
  bool enso_box_set = false;

  using Setter = std::function<void(const std::string&, const std::string&)>;
  std::map<std::string, Setter> keys;

  auto K = [&](const std::string& name, Setter fn) { keys[name] = std::move(fn); };

  // [synth]
  K("synth.n_lat", [&](const std::string& k, const std::string& v) {
    cfg.synth.grid = GridSpec::regular(parse_int(k, v), cfg.synth.grid.n_lon);
  });
  K("synth.n_lon", [&](const std::string& k, const std::string& v) {
    cfg.synth.grid = GridSpec::regular(cfg.synth.grid.n_lat, parse_int(k, v));
  });
  K("synth.n_members",
    [&](const std::string& k, const std::string& v) { cfg.synth.n_members = parse_int(k, v); });
  K("synth.n_years",
    [&](const std::string& k, const std::string& v) { cfg.synth.n_years = parse_int(k, v); });
  K("synth.start_year",
    [&](const std::string& k, const std::string& v) { cfg.synth.start_year = parse_int(k, v); });
  K("synth.clim_amplitude", [&](const std::string& k, const std::string& v) {
    cfg.synth.clim_amplitude = parse_double(k, v);
  });
  K("synth.trend_total",
    [&](const std::string& k, const std::string& v) { cfg.synth.trend_total = parse_double(k, v); });
  K("synth.volcano_years", [&](const std::string& k, const std::string& v) {
    auto years = parse_int_list(k, v);
    std::vector<VolcanoEvent> events;
    for (size_t i = 0; i < years.size(); ++i) {
      VolcanoEvent e;
      e.year = years[i];
      if (i < cfg.synth.volcanoes.size()) {
        e.peak_cooling = cfg.synth.volcanoes[i].peak_cooling;
        e.efold_months = cfg.synth.volcanoes[i].efold_months;
      }
      events.push_back(e);
    }
    cfg.synth.volcanoes = events;
  });
  K("synth.volcano_coolings", [&](const std::string& k, const std::string& v) {
    auto vals = parse_double_list(k, v);
    if (vals.size() != cfg.synth.volcanoes.size()) {
      throw ConfigError("config: synth.volcano_coolings length must match synth.volcano_years");
    }
    for (size_t i = 0; i < vals.size(); ++i) cfg.synth.volcanoes[i].peak_cooling = vals[i];
  });
  K("synth.volcano_efold_months", [&](const std::string& k, const std::string& v) {
    auto vals = parse_int_list(k, v);
    if (vals.size() != cfg.synth.volcanoes.size()) {
      throw ConfigError("config: synth.volcano_efold_months length must match synth.volcano_years");
    }
    for (size_t i = 0; i < vals.size(); ++i) cfg.synth.volcanoes[i].efold_months = vals[i];
  });
  K("synth.enso_period_months", [&](const std::string& k, const std::string& v) {
    cfg.synth.enso_period_months = parse_double(k, v);
  });
  K("synth.enso_period_jitter", [&](const std::string& k, const std::string& v) {
    cfg.synth.enso_period_jitter = parse_double(k, v);
  });
  K("synth.enso_amplitude", [&](const std::string& k, const std::string& v) {
    cfg.synth.enso_amplitude = parse_double(k, v);
  });
  K("synth.enso_box", [&](const std::string& k, const std::string& v) {
    auto vals = parse_double_list(k, v);
    if (vals.size() != 4) {
      throw ConfigError("config: synth.enso_box expects lat_min,lat_max,lon_min,lon_max");
    }
    cfg.synth.enso_box = LatLonBox{vals[0], vals[1], vals[2], vals[3]};
    if (!enso_box_set) cfg.eval_enso.box = cfg.synth.enso_box;
  });
  K("synth.noise_std",
    [&](const std::string& k, const std::string& v) { cfg.synth.noise_std = parse_double(k, v); });
  K("synth.noise_corr_cells", [&](const std::string& k, const std::string& v) {
    cfg.synth.noise_corr_cells = parse_int(k, v);
  });
  K("synth.seed",
    [&](const std::string& k, const std::string& v) { cfg.synth.seed = parse_u64(k, v); });

  // [vae]
  K("vae.f", [&](const std::string& k, const std::string& v) { cfg.vae.f = parse_int(k, v); });
  K("vae.c", [&](const std::string& k, const std::string& v) { cfg.vae.c = parse_int(k, v); });
  K("vae.enc_widths", [&](const std::string& k, const std::string& v) {
    cfg.vae.enc_widths = parse_int_list(k, v);
    cfg.vae.dec_widths.clear();
  });
  K("vae.lambda_rec",
    [&](const std::string& k, const std::string& v) { cfg.vae.lambda_rec = parse_double(k, v); });
  K("vae.lambda_adv",
    [&](const std::string& k, const std::string& v) { cfg.vae.lambda_adv = parse_double(k, v); });
  K("vae.lambda_kl",
    [&](const std::string& k, const std::string& v) { cfg.vae.lambda_kl = parse_double(k, v); });
  K("vae.disc_width",
    [&](const std::string& k, const std::string& v) { cfg.vae.disc_width = parse_int(k, v); });
  K("vae.lr", [&](const std::string& k, const std::string& v) { cfg.vae.lr = parse_double(k, v); });
  K("vae.batch",
    [&](const std::string& k, const std::string& v) { cfg.vae.batch = parse_int(k, v); });
  K("vae.epochs",
    [&](const std::string& k, const std::string& v) { cfg.vae.epochs = parse_int(k, v); });
  K("vae.max_fields_per_epoch", [&](const std::string& k, const std::string& v) {
    cfg.vae.max_fields_per_epoch = parse_int(k, v);
  });
  K("vae.seed", [&](const std::string& k, const std::string& v) { cfg.vae.seed = parse_u64(k, v); });
  K("vae.holdout_members", [&](const std::string& k, const std::string& v) {
    cfg.vae_holdout_members = parse_int(k, v);
  });

  // [ddm]
  K("ddm.steps",
    [&](const std::string& k, const std::string& v) { cfg.ddm.steps = parse_int(k, v); });
  K("ddm.base_width",
    [&](const std::string& k, const std::string& v) { cfg.ddm.base_width = parse_int(k, v); });
  K("ddm.width_mult",
    [&](const std::string& k, const std::string& v) { cfg.ddm.width_mult = parse_int_list(k, v); });
  K("ddm.window",
    [&](const std::string& k, const std::string& v) { cfg.ddm.window = parse_int(k, v); });
  K("ddm.seq_len",
    [&](const std::string& k, const std::string& v) { cfg.ddm.seq_len = parse_int(k, v); });
  K("ddm.lr", [&](const std::string& k, const std::string& v) { cfg.ddm.lr = parse_double(k, v); });
  K("ddm.batch",
    [&](const std::string& k, const std::string& v) { cfg.ddm.batch = parse_int(k, v); });
  K("ddm.epochs",
    [&](const std::string& k, const std::string& v) { cfg.ddm.epochs = parse_int(k, v); });
  K("ddm.samples_per_epoch", [&](const std::string& k, const std::string& v) {
    cfg.ddm.samples_per_epoch = parse_int(k, v);
  });
  K("ddm.seed", [&](const std::string& k, const std::string& v) { cfg.ddm.seed = parse_u64(k, v); });
  K("ddm.exclude", [&](const std::string&, const std::string& v) { cfg.ddm_exclude = split_list(v); });

  // [sampler]
  K("sampler.sampler", [&](const std::string& k, const std::string& v) {
    if (v != "ddim" && v != "ddpm") throw ConfigError("config: " + k + " must be ddim or ddpm");
    cfg.sampler.sampler = v;
  });
  K("sampler.ddim_steps",
    [&](const std::string& k, const std::string& v) { cfg.sampler.ddim_steps = parse_int(k, v); });
  K("sampler.seed",
    [&](const std::string& k, const std::string& v) { cfg.sampler_seed = parse_u64(k, v); });

  // [eval]
  K("eval.enso_threshold", [&](const std::string& k, const std::string& v) {
    cfg.eval_enso.threshold = parse_double(k, v);
  });
  K("eval.enso_min_months", [&](const std::string& k, const std::string& v) {
    cfg.eval_enso.min_months = parse_int(k, v);
  });
  K("eval.enso_smooth_months", [&](const std::string& k, const std::string& v) {
    cfg.eval_enso.smooth_months = parse_int(k, v);
  });
  K("eval.enso_box", [&](const std::string& k, const std::string& v) {
    auto vals = parse_double_list(k, v);
    if (vals.size() != 4) {
      throw ConfigError("config: eval.enso_box expects lat_min,lat_max,lon_min,lon_max");
    }
    cfg.eval_enso.box = LatLonBox{vals[0], vals[1], vals[2], vals[3]};
    enso_box_set = true;
  });

  static const char* kSections[] = {"synth", "vae", "ddm", "sampler", "eval"};

  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']') {
        throw ConfigError("config: malformed section at line " + std::to_string(lineno));
      }
      section = trim(s.substr(1, s.size() - 2));
      bool known = false;
      for (const char* name : kSections) known = known || section == name;
      if (!known) throw ConfigError("config: unknown section [" + section + "]");
      continue;
    }
    size_t eq = s.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: expected key = value at line " + std::to_string(lineno));
    }
    std::string key = trim(s.substr(0, eq));
    std::string value = trim(s.substr(eq + 1));
    if (section.empty()) throw ConfigError("config: key " + key + " outside any section");
    std::string full = section + "." + key;
    auto it = keys.find(full);
    if (it == keys.end()) throw ConfigError("config: unknown key " + full);
    it->second(full, value);
  }
  return cfg;
}

std::string RunConfig::dump_defaults() {
  RunConfig c = defaults();
  std::ostringstream os;
  os << "[synth]\n";
  os << "n_lat = " << c.synth.grid.n_lat << "\n";
  os << "n_lon = " << c.synth.grid.n_lon << "\n";
  os << "n_members = " << c.synth.n_members << "\n";
  os << "n_years = " << c.synth.n_years << "\n";
  os << "start_year = " << c.synth.start_year << "\n";
  os << "clim_amplitude = " << c.synth.clim_amplitude << "\n";
  os << "trend_total = " << c.synth.trend_total << "\n";
  os << "volcano_years = ";
  for (size_t i = 0; i < c.synth.volcanoes.size(); ++i) {
    os << (i ? "," : "") << c.synth.volcanoes[i].year;
  }
  os << "\nvolcano_coolings = ";
  for (size_t i = 0; i < c.synth.volcanoes.size(); ++i) {
    os << (i ? "," : "") << c.synth.volcanoes[i].peak_cooling;
  }
  os << "\nvolcano_efold_months = ";
  for (size_t i = 0; i < c.synth.volcanoes.size(); ++i) {
    os << (i ? "," : "") << c.synth.volcanoes[i].efold_months;
  }
  os << "\n";
  os << "enso_period_months = " << c.synth.enso_period_months << "\n";
  os << "enso_period_jitter = " << c.synth.enso_period_jitter << "\n";
  os << "enso_amplitude = " << c.synth.enso_amplitude << "\n";
  os << "enso_box = " << c.synth.enso_box.lat_min << "," << c.synth.enso_box.lat_max << ","
     << c.synth.enso_box.lon_min << "," << c.synth.enso_box.lon_max << "\n";
  os << "noise_std = " << c.synth.noise_std << "\n";
  os << "noise_corr_cells = " << c.synth.noise_corr_cells << "\n";
  os << "seed = " << c.synth.seed << "\n\n";

  os << "[vae]\n";
  os << "f = " << c.vae.f << "\n";
  os << "c = " << c.vae.c << "\n";
  os << "enc_widths = ";
  for (size_t i = 0; i < c.vae.enc_widths.size(); ++i) os << (i ? "," : "") << c.vae.enc_widths[i];
  os << "\n";
  os << "lambda_rec = " << c.vae.lambda_rec << "\n";
  os << "lambda_adv = " << c.vae.lambda_adv << "\n";
  os << "lambda_kl = " << c.vae.lambda_kl << "\n";
  os << "disc_width = " << c.vae.disc_width << "\n";
  os << "lr = " << c.vae.lr << "\n";
  os << "batch = " << c.vae.batch << "\n";
  os << "epochs = " << c.vae.epochs << "\n";
  os << "max_fields_per_epoch = " << c.vae.max_fields_per_epoch << "\n";
  os << "seed = " << c.vae.seed << "\n";
  os << "holdout_members = " << c.vae_holdout_members << "\n\n";

  os << "[ddm]\n";
  os << "steps = " << c.ddm.steps << "\n";
  os << "base_width = " << c.ddm.base_width << "\n";
  os << "width_mult = ";
  for (size_t i = 0; i < c.ddm.width_mult.size(); ++i) os << (i ? "," : "") << c.ddm.width_mult[i];
  os << "\n";
  os << "window = " << c.ddm.window << "\n";
  os << "seq_len = " << c.ddm.seq_len << "\n";
  os << "lr = " << c.ddm.lr << "\n";
  os << "batch = " << c.ddm.batch << "\n";
  os << "epochs = " << c.ddm.epochs << "\n";
  os << "samples_per_epoch = " << c.ddm.samples_per_epoch << "\n";
  os << "seed = " << c.ddm.seed << "\n\n";

  os << "[sampler]\n";
  os << "sampler = " << c.sampler.sampler << "\n";
  os << "ddim_steps = " << c.sampler.ddim_steps << "\n";
  os << "seed = " << c.sampler_seed << "\n\n";

  os << "[eval]\n";
  os << "enso_threshold = " << c.eval_enso.threshold << "\n";
  os << "enso_min_months = " << c.eval_enso.min_months << "\n";
  os << "enso_smooth_months = " << c.eval_enso.smooth_months << "\n";
  return os.str();
}

}  // namespace ensldm
