// ensldm: synthesize data, train the VAE and denoisers, generate new
// ensemble members and evaluate them, from one binary. Every subcommand
// prints a single JSON summary line on stdout; exit codes are 0 success,
// 2 config error, 3 I/O error, 4 numeric error.

#include <algorithm>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ensldm/dataio.hpp"
#include "ensldm/eval.hpp"
#include "ensldm/runconfig.hpp"
#include "ensldm/seqgen.hpp"
#include "ensldm/synthdata.hpp"
#include "ensldm/threads.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace ensldm;

namespace {

void emit(const ordered_json& j) { std::cout << j.dump() << std::endl; }

std::vector<std::string> sorted_files(const std::string& dir, const std::string& prefix) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string name = e.path().filename().string();
    if (name.rfind(prefix, 0) == 0 && name.size() > 4 &&
        name.compare(name.size() - 4, 4, ".cgf") == 0) {
      names.push_back(name);
    }
  }
  std::sort(names.begin(), names.end());
  return names;
}

std::vector<SimSequence> load_members(const std::string& dir) {
  std::vector<SimSequence> out;
  for (const auto& name : sorted_files(dir, "member_")) {
    out.push_back(to_sim_sequence(read_cgf(dir + "/" + name)));
  }
  if (out.empty()) throw IoError("no member_*.cgf files in " + dir);
  return out;
}

std::vector<LatentSeq> load_latents(const std::string& dir) {
  std::vector<LatentSeq> out;
  for (const auto& name : sorted_files(dir, "latent_")) {
    out.push_back(latent_from_cgf(read_cgf(dir + "/" + name)));
  }
  if (out.empty()) throw IoError("no latent_*.cgf files in " + dir);
  return out;
}

const LatentSeq& find_latent(const std::vector<LatentSeq>& latents, const std::string& id) {
  for (const auto& l : latents) {
    if (l.member_id == id) return l;
  }
  throw ConfigError("no latents for member id \"" + id + "\"");
}

RunConfig load_config(const std::string& path) {
  return path.empty() ? RunConfig::defaults() : RunConfig::load(path);
}

struct CommonOpts {
  std::string config;
  int threads = 0;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config, "Run configuration file (key = value sections)");
  cmd->add_option("--threads", opts.threads,
                  "Worker thread cap; 1 guarantees bitwise determinism (default: "
                  "ENSEMBLE_LDM_THREADS or all cores)");
}

void apply_common(const CommonOpts& opts) {
  if (opts.threads > 0) set_max_threads(opts.threads);
}

int run_synth(const CommonOpts& common, const std::string& out_dir, int members, int64_t seed) {
  apply_common(common);
  RunConfig cfg = load_config(common.config);
  if (members > 0) cfg.synth.n_members = members;
  if (seed >= 0) cfg.synth.seed = static_cast<uint64_t>(seed);
  fs::create_directories(out_dir);
  SynthTruth truth = generate_ensemble(cfg.synth);
  for (const auto& m : truth.members) {
    write_cgf(out_dir + "/member_" + m.member_id + ".cgf", to_cgf(m));
  }
  write_truth_sidecar(out_dir + "/truth.json", truth);
  ordered_json j;
  j["cmd"] = "synth";
  j["status"] = "ok";
  j["out"] = out_dir;
  j["members"] = cfg.synth.n_members;
  j["months"] = cfg.synth.n_months();
  j["seed"] = cfg.synth.seed;
  emit(j);
  return 0;
}

int run_train_vae(const CommonOpts& common, const std::string& data_dir, const std::string& out,
                  int64_t seed, int epochs) {
  apply_common(common);
  RunConfig cfg = load_config(common.config);
  if (seed >= 0) cfg.vae.seed = static_cast<uint64_t>(seed);
  if (epochs > 0) cfg.vae.epochs = epochs;
  std::vector<SimSequence> members = load_members(data_dir);
  int holdout = std::clamp(cfg.vae_holdout_members, 0, static_cast<int>(members.size()) - 1);
  std::vector<SimSequence> train(members.begin(), members.end() - holdout);
  VaeTrainResult res = train_vae(train, cfg.vae);
  save_checkpoint(out, res.checkpoint);
  write_vae_log_csv(out + ".log.csv", res.log);
  ordered_json j;
  j["cmd"] = "train-vae";
  j["status"] = "ok";
  j["checkpoint"] = out;
  j["trained_members"] = train.size();
  j["holdout_members"] = holdout;
  j["epochs"] = cfg.vae.epochs;
  j["final_rec"] = res.log.back().rec;
  j["final_kl"] = res.log.back().kl;
  j["final_total"] = res.log.back().total;
  emit(j);
  return 0;
}

int run_encode(const CommonOpts& common, const std::string& vae_path, const std::string& data_dir,
               const std::string& out_dir) {
  apply_common(common);
  VaeBundle vae = vae_from_checkpoint(load_checkpoint(vae_path));
  std::vector<SimSequence> members = load_members(data_dir);
  fs::create_directories(out_dir);
  for (const auto& m : members) {
    LatentSeq lat = encode_sequence(vae, m);
    write_cgf(out_dir + "/latent_" + m.member_id + ".cgf", latent_to_cgf(lat));
  }
  ordered_json j;
  j["cmd"] = "encode";
  j["status"] = "ok";
  j["out"] = out_dir;
  j["members"] = members.size();
  j["latent_shape"] = {vae.cfg.c, vae.latent_h(), vae.latent_w()};
  emit(j);
  return 0;
}

int run_train_ddm(const CommonOpts& common, const std::string& mode,
                  const std::string& latents_dir, const std::string& cond_member,
                  const std::string& exclude_csv, const std::string& out, int64_t seed,
                  int epochs) {
  apply_common(common);
  RunConfig cfg = load_config(common.config);
  cfg.ddm.mode = mode;
  if (seed >= 0) cfg.ddm.seed = static_cast<uint64_t>(seed);
  if (epochs > 0) cfg.ddm.epochs = epochs;
  std::vector<std::string> exclude = cfg.ddm_exclude;
  {
    std::stringstream ss(exclude_csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!item.empty()) exclude.push_back(item);
    }
  }
  std::vector<LatentSeq> latents = load_latents(latents_dir);
  const LatentSeq& cond = find_latent(latents, cond_member);
  std::vector<LatentSeq> targets;
  for (const auto& l : latents) {
    if (l.member_id == cond_member) continue;
    if (std::find(exclude.begin(), exclude.end(), l.member_id) != exclude.end()) continue;
    targets.push_back(l);
  }
  DdmTrainResult res = train_ddm(targets, cond, cfg.ddm);
  save_checkpoint(out, res.checkpoint);
  write_ddm_log_csv(out + ".log.csv", res.log);
  ordered_json j;
  j["cmd"] = "train-ddm";
  j["status"] = "ok";
  j["checkpoint"] = out;
  j["mode"] = mode;
  j["cond_member"] = cond_member;
  j["target_members"] = targets.size();
  j["epochs"] = cfg.ddm.epochs;
  j["final_loss"] = res.log.back().loss;
  emit(j);
  return 0;
}

int run_generate(const CommonOpts& common, const std::string& ddm_path,
                 const std::string& vae_path, const std::string& latents_dir,
                 const std::string& cond_member, const std::string& out_dir, int members,
                 int64_t seed, int start_month, int months) {
  apply_common(common);
  RunConfig cfg = load_config(common.config);
  DdmBundle ddm = ddm_from_checkpoint(load_checkpoint(ddm_path));
  VaeBundle vae = vae_from_checkpoint(load_checkpoint(vae_path));
  std::vector<LatentSeq> latents = load_latents(latents_dir);
  const LatentSeq& cond = find_latent(latents, cond_member);

  GenRequest req;
  req.mode = ddm.mode;
  req.n_members = members;
  req.start_month = start_month;
  req.n_months = months > 0 ? months : cond.n_months() - start_month;
  req.sampler = cfg.sampler;
  req.seed = seed >= 0 ? static_cast<uint64_t>(seed) : cfg.sampler_seed;

  GridSpec spec = GridSpec::regular(vae.grid_h, vae.grid_w);
  GenerateResult res = generate_ensemble(req, ddm, vae, cond, spec, out_dir);

  ordered_json j;
  j["cmd"] = "generate";
  j["status"] = "ok";
  j["out"] = out_dir;
  j["mode"] = req.mode;
  j["members"] = req.n_members;
  j["months"] = req.n_months;
  j["seed"] = req.seed;
  j["cond_member"] = cond_member;
  j["ddm_sha256"] = sha256_file(ddm_path);
  j["vae_sha256"] = sha256_file(vae_path);
  j["sampler_invocations"] = res.stats.sampler_invocations;
  j["model_forwards"] = res.stats.model_forwards;
  emit(j);
  return 0;
}

int run_eval(const CommonOpts& common, const std::string& orig_dir, const std::string& gen_dir,
             const std::string& out_dir, const std::string& truth_path,
             const std::string& vae_path, const std::string& rmse_member) {
  apply_common(common);
  RunConfig cfg = load_config(common.config);
  std::vector<SimSequence> orig = load_members(orig_dir);
  std::vector<SimSequence> gen = load_members(gen_dir);

  std::vector<int> volcano_years;
  std::string truth = truth_path;
  if (truth.empty() && fs::exists(orig_dir + "/truth.json")) truth = orig_dir + "/truth.json";
  if (!truth.empty()) {
    TruthSidecar sidecar = load_truth_sidecar(truth);
    volcano_years = sidecar.volcano_years;
    cfg.eval_enso.box = sidecar.enso_box;
  }

  EnsembleReport rep = compare_ensembles(orig, gen, cfg.eval_enso, volcano_years);

  if (!vae_path.empty()) {
    VaeBundle vae = vae_from_checkpoint(load_checkpoint(vae_path));
    std::vector<SimSequence> held;
    if (rmse_member.empty()) {
      held.push_back(orig.back());
    } else {
      for (const auto& m : orig) {
        if (m.member_id == rmse_member) held.push_back(m);
      }
      if (held.empty()) throw ConfigError("eval: no original member with id " + rmse_member);
    }
    rep.vae_rmse = reconstruction_rmse(vae, held);
    double sum = 0.0, sumsq = 0.0;
    int64_t n = 0;
    for (const auto& m : held) {
      for (const auto& f : m.frames) {
        for (float v : f) {
          sum += v;
          sumsq += static_cast<double>(v) * v;
          ++n;
        }
      }
    }
    double mean = sum / static_cast<double>(n);
    rep.vae_rmse_limit = 0.35 * std::sqrt(std::max(sumsq / static_cast<double>(n) - mean * mean, 0.0));
  }

  fs::create_directories(out_dir);
  write_report(out_dir, rep);

  ordered_json j;
  j["cmd"] = "eval";
  j["status"] = "ok";
  j["out"] = out_dir;
  j["years"] = rep.years.size();
  j["mean_rmse"] = rep.mean_rmse;
  j["orig_spread_time_mean"] = rep.orig_spread_time_mean;
  j["spread_ratio_time_mean"] = rep.spread_ratio_time_mean;
  j["orig_events_per_member"] = rep.orig_events_per_member;
  j["gen_events_per_member"] = rep.gen_events_per_member;
  int dips = 0;
  for (bool b : rep.volcano_dip_ok) dips += b ? 1 : 0;
  j["volcano_dips"] = dips;
  j["volcano_total"] = rep.volcano_dip_ok.size();
  if (rep.vae_rmse >= 0) {
    j["vae_rmse"] = rep.vae_rmse;
    j["vae_rmse_limit"] = rep.vae_rmse_limit;
  }
  emit(j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ensldm: latent-diffusion climate ensemble emulator"};
  app.require_subcommand(1);

  CommonOpts synth_c, vae_c, enc_c, ddm_c, gen_c, eval_c;

  auto* synth = app.add_subcommand("synth", "Generate the synthetic ground-truth ensemble");
  std::string synth_out = "data";
  int synth_members = 0;
  int64_t synth_seed = -1;
  add_common(synth, synth_c);
  synth->add_option("--out", synth_out, "Output directory")->capture_default_str();
  synth->add_option("--members", synth_members, "Member count (default from config: 20)");
  synth->add_option("--seed", synth_seed, "Generator seed (default from config: 42)");

  auto* tvae = app.add_subcommand("train-vae", "Train the VAE on member fields");
  std::string tvae_data = "data", tvae_out = "vae.ckpt";
  int64_t tvae_seed = -1;
  int tvae_epochs = 0;
  add_common(tvae, vae_c);
  tvae->add_option("--data", tvae_data, "Directory with member_*.cgf")->capture_default_str();
  tvae->add_option("--out", tvae_out, "Checkpoint path")->capture_default_str();
  tvae->add_option("--seed", tvae_seed, "Training seed (default from config: 1)");
  tvae->add_option("--epochs", tvae_epochs, "Override epoch count (default from config: 12)");

  auto* enc = app.add_subcommand("encode", "Encode member fields into latent sequences");
  std::string enc_vae = "vae.ckpt", enc_data = "data", enc_out = "latents";
  add_common(enc, enc_c);
  enc->add_option("--vae", enc_vae, "VAE checkpoint")->capture_default_str();
  enc->add_option("--data", enc_data, "Directory with member_*.cgf")->capture_default_str();
  enc->add_option("--out", enc_out, "Output directory for latent_*.cgf")->capture_default_str();

  auto* tddm = app.add_subcommand("train-ddm", "Train a denoiser on latent residuals");
  std::string tddm_mode = "ar", tddm_latents = "latents", tddm_cond = "m000", tddm_out = "ddm.ckpt",
              tddm_exclude;
  int64_t tddm_seed = -1;
  int tddm_epochs = 0;
  add_common(tddm, ddm_c);
  tddm->add_option("--mode", tddm_mode, "Denoiser variant: ar | transformer")
      ->check(CLI::IsMember({"ar", "transformer"}))
      ->capture_default_str();
  tddm->add_option("--latents", tddm_latents, "Directory with latent_*.cgf")->capture_default_str();
  tddm->add_option("--cond-member", tddm_cond, "Conditioning member id")->capture_default_str();
  tddm->add_option("--exclude", tddm_exclude, "Comma-separated member ids to exclude from targets");
  tddm->add_option("--out", tddm_out, "Checkpoint path")->capture_default_str();
  tddm->add_option("--seed", tddm_seed, "Training seed (default from config: 2)");
  tddm->add_option("--epochs", tddm_epochs, "Override epoch count (default from config: 10)");

  auto* gen = app.add_subcommand("generate", "Generate new ensemble members");
  std::string gen_ddm = "ddm.ckpt", gen_vae = "vae.ckpt", gen_latents = "latents",
              gen_cond = "m019", gen_out = "generated";
  int gen_members = 20, gen_start = 0, gen_months = 0;
  int64_t gen_seed = -1;
  add_common(gen, gen_c);
  gen->add_option("--ddm", gen_ddm, "Denoiser checkpoint")->capture_default_str();
  gen->add_option("--vae", gen_vae, "VAE checkpoint")->capture_default_str();
  gen->add_option("--latents", gen_latents, "Directory with latent_*.cgf")->capture_default_str();
  gen->add_option("--cond-member", gen_cond, "Conditioning member id")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->capture_default_str();
  gen->add_option("--members", gen_members, "Members to generate")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Sampling seed (default from config: 3)");
  gen->add_option("--start-month", gen_start, "First month index to generate")
      ->capture_default_str();
  gen->add_option("--months", gen_months, "Months to generate (default: remaining range)");

  auto* ev = app.add_subcommand("eval", "Compare a generated ensemble against the original");
  std::string ev_orig = "data", ev_gen = "generated", ev_out = "report", ev_truth, ev_vae,
              ev_rmse_member;
  add_common(ev, eval_c);
  ev->add_option("--orig", ev_orig, "Original ensemble directory")->capture_default_str();
  ev->add_option("--gen", ev_gen, "Generated ensemble directory")->capture_default_str();
  ev->add_option("--out", ev_out, "Report output directory")->capture_default_str();
  ev->add_option("--truth", ev_truth, "Truth sidecar (default: <orig>/truth.json when present)");
  ev->add_option("--vae", ev_vae, "VAE checkpoint for the reconstruction RMSE gate");
  ev->add_option("--rmse-member", ev_rmse_member,
                 "Member id for the reconstruction RMSE (default: last original member)");

  auto* pc = app.add_subcommand("print-config", "Print the default run configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (synth->parsed()) return run_synth(synth_c, synth_out, synth_members, synth_seed);
    if (tvae->parsed()) return run_train_vae(vae_c, tvae_data, tvae_out, tvae_seed, tvae_epochs);
    if (enc->parsed()) return run_encode(enc_c, enc_vae, enc_data, enc_out);
    if (tddm->parsed()) {
      return run_train_ddm(ddm_c, tddm_mode, tddm_latents, tddm_cond, tddm_exclude, tddm_out,
                           tddm_seed, tddm_epochs);
    }
    if (gen->parsed()) {
      return run_generate(gen_c, gen_ddm, gen_vae, gen_latents, gen_cond, gen_out, gen_members,
                          gen_seed, gen_start, gen_months);
    }
    if (ev->parsed()) {
      return run_eval(eval_c, ev_orig, ev_gen, ev_out, ev_truth, ev_vae, ev_rmse_member);
    }
    if (pc->parsed()) {
      std::cout << RunConfig::dump_defaults();
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const RangeError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << std::endl;
    return 4;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << std::endl;
    return 3;
  } catch (const FormatError& e) {
    std::cerr << "io error: " << e.what() << std::endl;
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 0;
}
