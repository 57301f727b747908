// Command-line front end: simulate, perturb, extract, train, evaluate, plot.
#include "locus/errors.hpp"
#include "locus/features.hpp"
#include "locus/harness.hpp"
#include "locus/intermittence.hpp"
#include "locus/simulate.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>

namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

int cmd_simulate(const std::string& config, const std::string& out, std::uint64_t seed) {
  const locus::SimulationConfig cfg = config.empty() ? locus::desk_preset() : locus::load_simulation_config(config);
  const auto manifest = locus::generate_dataset(cfg, seed, out);
  std::printf("%s\n", (fs::path(out) / "manifest.jsonl").string().c_str());
  return manifest.entries.empty() ? kExitData : 0;
}

int cmd_perturb(const std::string& manifest_path, double mdp, int m, std::uint64_t seed, std::string out) {
  const locus::DatasetManifest in = locus::load_manifest(manifest_path);
  if (out.empty()) {
    char name[64];
    std::snprintf(name, sizeof(name), "perturbed_mdp%g_m%d_s%llu", mdp, m, static_cast<unsigned long long>(seed));
    out = (fs::path(manifest_path).parent_path() / name).string();
  }
  locus::DatasetManifest result = in;
  result.attributes["perturb_mdp_pct"] = std::to_string(mdp);
  result.attributes["perturb_max_m"] = std::to_string(m);
  result.attributes["perturb_seed"] = std::to_string(seed);
  for (auto& e : result.entries) {
    auto clip = locus::load_clip(locus::resolve_path(manifest_path, e.clip));
    const std::string id = clip.clip_id.empty() ? e.clip : clip.clip_id;
    const std::uint64_t s = locus::nn::mix_seed(seed, locus::nn::tag_hash("perturb:" + id));
    const auto sched = locus::sample_schedule(s, clip.duration_s(), clip.n_channels(), mdp, m);
    const auto damaged = locus::apply_perturbation(clip, sched, locus::nn::mix_seed(s, 1));
    const std::string stem = fs::path(e.clip).stem().string();
    const std::string rel_clip = "audio/" + stem + ".wav";
    const std::string rel_sched = "masks/" + stem + ".mask";
    locus::save_clip(damaged, fs::path(out) / rel_clip);
    fs::create_directories(fs::path(out) / "masks");
    locus::save_schedule(sched, fs::path(out) / rel_sched);
    e.clip = rel_clip;
    e.schedule = rel_sched;
  }
  locus::save_manifest(result, fs::path(out) / "manifest.jsonl");
  std::printf("%s\n", (fs::path(out) / "manifest.jsonl").string().c_str());
  return 0;
}

int cmd_extract(const std::string& manifest_path, std::string out) {
  const locus::DatasetManifest m = locus::load_manifest(manifest_path);
  if (out.empty()) out = (fs::path(manifest_path).parent_path() / "features").string();
  for (const auto& e : m.entries) {
    const auto clip = locus::load_clip(locus::resolve_path(manifest_path, e.clip));
    const auto f = locus::assemble_features(clip);
    locus::save_features(f, fs::path(out) / (fs::path(e.clip).stem().string() + ".feat"));
  }
  spdlog::info("extracted features for {} clips into {}", m.entries.size(), out);
  return 0;
}

int cmd_train(const std::string& config) {
  const auto cfg = locus::load_experiment_config(config);
  const auto r = locus::train_joint(cfg);
  std::printf("%s\n", r.checkpoint.string().c_str());
  return 0;
}

int cmd_evaluate(const std::string& ckpt, const std::string& manifest, double mdp, int m, std::uint64_t seed,
                 const std::string& split, const std::string& imputation, const std::string& out,
                 const std::string& predictions) {
  locus::EvalOptions opt;
  opt.mdp_pct = mdp;
  opt.max_simultaneous_m = m;
  opt.seed = seed;
  opt.split = locus::split_from_string(split);
  if (!imputation.empty()) opt.imputation = locus::imputation_from_string(imputation);
  if (!predictions.empty()) opt.predictions_csv = predictions;
  const auto r = locus::evaluate(ckpt, manifest, opt);
  if (out.empty()) {
    std::printf("%s\n", locus::report_to_json(r).c_str());
  } else {
    locus::write_report(r, out);
    std::printf("E_DoA %.3f deg over %ld matched frames -> %s\n", r.e_doa_deg(), r.score.matched, out.c_str());
  }
  return 0;
}

int cmd_plot(const std::string& dir) {
  for (const auto& p : locus::plot_results(dir)) std::printf("%s\n", p.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"locus: feature restoration for localization with intermittently missing microphones"};
  app.require_subcommand(1);

  std::string sim_config, sim_out;
  std::uint64_t sim_seed = 0;
  auto* sim = app.add_subcommand("simulate", "Generate a simulated multichannel dataset");
  sim->add_option("--config", sim_config, "Simulation config (JSON); defaults to the desk preset");
  sim->add_option("--out", sim_out, "Output directory")->required();
  sim->add_option("--seed", sim_seed, "Master seed");

  std::string pert_manifest, pert_out;
  double pert_mdp = 75.0;
  int pert_m = 2;
  std::uint64_t pert_seed = 0;
  auto* pert = app.add_subcommand("perturb", "Apply intermittent channel loss to every clip of a manifest");
  pert->add_option("--manifest", pert_manifest)->required();
  pert->add_option("--mdp", pert_mdp, "Missing-data percentage")->required();
  pert->add_option("--m", pert_m, "Maximum simultaneously missing channels");
  pert->add_option("--seed", pert_seed);
  pert->add_option("--out", pert_out, "Output directory");

  std::string ext_manifest, ext_out;
  auto* ext = app.add_subcommand("extract", "Write MFCC + GCC-PHAT feature tensors");
  ext->add_option("--manifest", ext_manifest)->required();
  ext->add_option("--out", ext_out);

  std::string train_config;
  auto* train = app.add_subcommand("train", "Train from an experiment config");
  train->add_option("--config", train_config)->required();

  std::string ev_ckpt, ev_manifest, ev_split = "test", ev_imp, ev_out, ev_pred;
  double ev_mdp = 0.0;
  int ev_m = 2;
  std::uint64_t ev_seed = 0;
  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint");
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--manifest", ev_manifest)->required();
  ev->add_option("--mdp", ev_mdp);
  ev->add_option("--m", ev_m);
  ev->add_option("--seed", ev_seed);
  ev->add_option("--split", ev_split);
  ev->add_option("--imputation", ev_imp, "mean, hotdeck, prob or corrupt-passthrough");
  ev->add_option("--out", ev_out, "Report path (JSON)");
  ev->add_option("--predictions", ev_pred, "Predictions CSV path");

  std::string plot_dir;
  auto* plot = app.add_subcommand("plot", "Render SVG plots from evaluation reports");
  plot->add_option("--results", plot_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*sim) return cmd_simulate(sim_config, sim_out, sim_seed);
    if (*pert) return cmd_perturb(pert_manifest, pert_mdp, pert_m, pert_seed, pert_out);
    if (*ext) return cmd_extract(ext_manifest, ext_out);
    if (*train) return cmd_train(train_config);
    if (*ev) {
      return cmd_evaluate(ev_ckpt, ev_manifest, ev_mdp, ev_m, ev_seed, ev_split, ev_imp, ev_out, ev_pred);
    }
    if (*plot) return cmd_plot(plot_dir);
  } catch (const locus::ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const locus::DataError& e) {
    spdlog::error("data error: {}", e.what());
    return kExitData;
  } catch (const locus::DivergenceError& e) {
    spdlog::error("divergence at step {}: {}", e.step(), e.what());
    return kExitDivergence;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
