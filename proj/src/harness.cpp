#include "locus/harness.hpp"

#include "locus/errors.hpp"

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace locus {

using json = nlohmann::json;
using nn::Tensor;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double null_to_nan(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

}  // namespace

// ------------------------------------------------------------------ mode

ModeSpec ModeSpec::parse(const std::string& s) {
  ModeSpec m;
  if (s == "locus") m.mode = TrainMode::Locus;
  else if (s == "info-only") m.mode = TrainMode::InfoOnly;
  else if (s == "lafs-only") m.mode = TrainMode::LafsOnly;
  else if (s == "corrupt") m.mode = TrainMode::Corrupt;
  else if (s == "clean") m.mode = TrainMode::Clean;
  else if (s.rfind("baseline:", 0) == 0) {
    m.mode = TrainMode::Baseline;
    m.baseline = imputation_from_string(s.substr(9));
  } else {
    throw ConfigError("unknown mode '" + s + "'");
  }
  return m;
}

std::string ModeSpec::str() const {
  switch (mode) {
    case TrainMode::Locus: return "locus";
    case TrainMode::InfoOnly: return "info-only";
    case TrainMode::LafsOnly: return "lafs-only";
    case TrainMode::Corrupt: return "corrupt";
    case TrainMode::Clean: return "clean";
    case TrainMode::Baseline: return "baseline:" + to_string(baseline);
  }
  return "?";
}

std::optional<RecoveryMode> ModeSpec::recovery() const {
  switch (mode) {
    case TrainMode::Locus: return RecoveryMode::Full;
    case TrainMode::InfoOnly: return RecoveryMode::InfoOnly;
    case TrainMode::LafsOnly: return RecoveryMode::LafsOnly;
    case TrainMode::Baseline:
      if (baseline == ImputationMethod::Autoenc) return RecoveryMode::LafsOnly;
      return std::nullopt;
    default: return std::nullopt;
  }
}

ImputationMethod ModeSpec::time_domain_imputation() const {
  if (mode == TrainMode::Baseline && is_time_domain(baseline)) return baseline;
  return ImputationMethod::CorruptPassthrough;
}

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  if (manifest.empty()) throw ConfigError("config: manifest is required");
  ModeSpec::parse(mode);
  if (!(mdp_pct >= 0.0 && mdp_pct <= 100.0)) throw ConfigError("config: mdp_pct must lie in [0, 100]");
  if (max_simultaneous_m < 1) throw ConfigError("config: max_simultaneous_m must be >= 1");
  if (batch_size < 2) throw ConfigError("config: batch_size must be >= 2 (batch normalization)");
  if (epochs < 1) throw ConfigError("config: epochs must be >= 1");
  if (!(threshold > 0.0)) throw ConfigError("config: threshold must be positive");
  if (!(min_val_recall >= 0.0 && min_val_recall <= 1.0)) throw ConfigError("config: min_val_recall must lie in [0, 1]");
  if (reduction < 1) throw ConfigError("config: reduction must be >= 1");
  if (pool.empty()) throw ConfigError("config: pool must list at least one factor");
  int pooled = 1;
  for (int f : pool) {
    if (f < 1) throw ConfigError("config: pool factors must be positive");
    pooled *= f;
  }
  if (pooled != features.n_mels) throw ConfigError("config: pool factors must multiply to n_mels");
  for (const auto* o : {&optimizer, &lafs_optimizer}) {
    if (!(o->lr > 0.0) || !(o->beta1 >= 0.0 && o->beta1 < 1.0) || !(o->beta2 >= 0.0 && o->beta2 < 1.0) ||
        !(o->eps > 0.0)) {
      throw ConfigError("config: invalid optimizer settings");
    }
  }
  if (max_clips_per_split < 0) throw ConfigError("config: max_clips_per_split must be >= 0");
  if (features.n_mels != features.gcc_lags) throw ConfigError("config: GCC length must equal n_mels");
}

namespace {

json adam_to_json(const nn::AdamOptions& o) {
  return {{"lr", o.lr}, {"beta1", o.beta1}, {"beta2", o.beta2}, {"eps", o.eps}};
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) {
      throw ConfigError("unknown key '" + k + "' in " + where);
    }
  }
}

template <typename V>
void take(const json& j, const char* key, V& dst) {
  if (j.contains(key)) dst = j.at(key).get<V>();
}

nn::AdamOptions adam_from_json(const json& j, const std::string& where) {
  check_keys(j, {"lr", "beta1", "beta2", "eps"}, where);
  nn::AdamOptions o;
  take(j, "lr", o.lr);
  take(j, "beta1", o.beta1);
  take(j, "beta2", o.beta2);
  take(j, "eps", o.eps);
  return o;
}

json config_json(const ExperimentConfig& c, bool with_output) {
  json j = {{"manifest", c.manifest},
            {"mode", c.mode},
            {"mdp_pct", c.mdp_pct},
            {"max_simultaneous_m", c.max_simultaneous_m},
            {"optimizer", adam_to_json(c.optimizer)},
            {"lafs_optimizer", adam_to_json(c.lafs_optimizer)},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"seed", c.seed},
            {"deterministic", c.deterministic},
            {"strict_mdp", c.strict_mdp},
            {"resample_masks", c.resample_masks},
            {"threshold", c.threshold},
            {"reduction", c.reduction},
            {"pool", c.pool},
            {"features",
             {{"n_fft", c.features.n_fft},
              {"window_s", c.features.window_s},
              {"hop_s", c.features.hop_s},
              {"n_mels", c.features.n_mels}}},
            {"max_clips_per_split", c.max_clips_per_split},
            {"min_val_recall", c.min_val_recall}};
  if (with_output) j["output_dir"] = c.output_dir;
  return j;
}

}  // namespace

ExperimentConfig experiment_config_from_json(const std::string& text) {
  ExperimentConfig c;
  try {
    const json j = json::parse(text);
    check_keys(j,
               {"manifest", "mode", "mdp_pct", "max_simultaneous_m", "optimizer", "lafs_optimizer", "batch_size",
                "epochs", "seed", "output_dir", "deterministic", "strict_mdp", "resample_masks", "threshold",
                "reduction", "pool", "features", "max_clips_per_split", "min_val_recall"},
               "experiment config");
    take(j, "manifest", c.manifest);
    take(j, "mode", c.mode);
    take(j, "mdp_pct", c.mdp_pct);
    take(j, "max_simultaneous_m", c.max_simultaneous_m);
    if (j.contains("optimizer")) c.optimizer = adam_from_json(j.at("optimizer"), "optimizer");
    if (j.contains("lafs_optimizer")) c.lafs_optimizer = adam_from_json(j.at("lafs_optimizer"), "lafs_optimizer");
    take(j, "batch_size", c.batch_size);
    take(j, "epochs", c.epochs);
    take(j, "seed", c.seed);
    take(j, "output_dir", c.output_dir);
    take(j, "deterministic", c.deterministic);
    take(j, "strict_mdp", c.strict_mdp);
    take(j, "resample_masks", c.resample_masks);
    take(j, "threshold", c.threshold);
    take(j, "reduction", c.reduction);
    take(j, "pool", c.pool);
    take(j, "max_clips_per_split", c.max_clips_per_split);
    take(j, "min_val_recall", c.min_val_recall);
    if (j.contains("features")) {
      const auto& f = j.at("features");
      check_keys(f, {"n_fft", "window_s", "hop_s", "n_mels"}, "features");
      take(f, "n_fft", c.features.n_fft);
      take(f, "window_s", c.features.window_s);
      take(f, "hop_s", c.features.hop_s);
      take(f, "n_mels", c.features.n_mels);
      c.features.gcc_lags = c.features.n_mels;
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig c = experiment_config_from_json(ss.str());
  const auto base = path.parent_path();
  if (!c.manifest.empty() && std::filesystem::path(c.manifest).is_relative()) c.manifest = (base / c.manifest).string();
  if (std::filesystem::path(c.output_dir).is_relative()) c.output_dir = (base / c.output_dir).string();
  return c;
}

std::string experiment_config_to_json(const ExperimentConfig& cfg) { return config_json(cfg, true).dump(2); }

std::string config_hash(const ExperimentConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(nn::tag_hash(config_json(cfg, false).dump())));
  return buf;
}

// ------------------------------------------------------------------ data

const LoadedSplit& Dataset::split(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Val: return val;
    case Split::Test: return test;
  }
  return test;
}

Dataset load_dataset(const std::filesystem::path& manifest_path, const StftParams& params, int max_clips_per_split) {
  Dataset d;
  d.manifest_path = manifest_path;
  d.manifest = load_manifest(manifest_path);
  if (d.manifest.n_classes < 1) throw DataError("manifest declares no classes");
  const int sr = d.manifest.sample_rate;
  params.validate(sr);
  const double hop_s = static_cast<double>(params.hop_samples(sr)) / sr;
  const double win_s = static_cast<double>(params.window_samples(sr)) / sr;
  for (const auto& e : d.manifest.entries) {
    LoadedSplit& s = e.split == Split::Train ? d.train : e.split == Split::Val ? d.val : d.test;
    if (max_clips_per_split > 0 && static_cast<int>(s.clips.size()) >= max_clips_per_split) continue;
    ClipRecord r;
    r.clip = load_clip(resolve_path(manifest_path, e.clip));
    if (r.clip.sample_rate != sr) throw DataError("clip " + e.clip + " has a different sample rate than the manifest");
    if (!d.manifest.mic_positions.empty() && r.clip.n_channels() != static_cast<int>(d.manifest.mic_positions.size())) {
      throw DataError("clip " + e.clip + " channel count differs from the manifest geometry");
    }
    r.id = r.clip.clip_id.empty() ? e.clip : r.clip.clip_id;
    r.labels = e.labels;
    for (const auto& l : r.labels) l.validate(d.manifest.n_classes, r.clip.duration_s());
    r.clean = assemble_features(r.clip, params);
    r.target = accdoa_targets(r.labels, r.clean.frames(), d.manifest.n_classes, hop_s, win_s);
    if (e.schedule) r.stored_schedule = load_schedule(resolve_path(manifest_path, *e.schedule));
    s.clips.push_back(std::move(r));
  }
  return d;
}

// ---------------------------------------------------------------- models

Models build_models(const ExperimentConfig& cfg, int channels, int bins, int n_classes) {
  Models m;
  m.mode = ModeSpec::parse(cfg.mode);
  const auto rec = m.mode.recovery();
  if (rec && *rec != RecoveryMode::LafsOnly) {
    nn::Rng rng(nn::mix_seed(cfg.seed, nn::tag_hash("init:info")));
    m.info = std::make_unique<InfoNet<float>>(channels, cfg.reduction, rng);
  }
  if (rec && *rec != RecoveryMode::InfoOnly) {
    nn::Rng rng(nn::mix_seed(cfg.seed, nn::tag_hash("init:lafs")));
    m.lafs = std::make_unique<Lafs<float>>(channels, rng);
  }
  CrnnConfig cc;
  cc.channels = channels;
  cc.bins = bins;
  cc.n_classes = n_classes;
  cc.pool = cfg.pool;
  nn::Rng rng(nn::mix_seed(cfg.seed, nn::tag_hash("init:crnn")));
  m.crnn = std::make_unique<Crnn<float>>(cc, rng);
  return m;
}

std::vector<nn::StateEntry<float>> Models::state() {
  std::vector<nn::StateEntry<float>> s;
  if (info) info->state(s, "info.");
  if (lafs) lafs->state(s, "lafs.");
  crnn->state(s, "crnn.");
  return s;
}

std::vector<nn::Parameter<float>*> Models::dt_parameters() {
  std::vector<nn::Parameter<float>*> p;
  crnn->parameters(p);
  if (info) info->parameters(p);
  return p;
}

std::vector<nn::Parameter<float>*> Models::lafs_parameters() {
  std::vector<nn::Parameter<float>*> p;
  if (lafs) lafs->parameters(p);
  return p;
}

// ---------------------------------------------------------------- inputs

MaskSchedule clip_schedule(const ClipRecord& rec, double mdp_pct, int max_m, std::uint64_t seed, int epoch,
                           bool strict_mdp) {
  const std::uint64_t s =
      nn::mix_seed(nn::mix_seed(seed, nn::tag_hash("mask:" + rec.id)), static_cast<std::uint64_t>(epoch));
  ScheduleOptions opt;
  opt.strict = strict_mdp;
  return sample_schedule(s, rec.clip.duration_s(), rec.clip.n_channels(), mdp_pct,
                         std::min(max_m, rec.clip.n_channels() / 2), opt);
}

Tensor<float> corrupted_input(const ClipRecord& rec, const MaskSchedule& schedule, ImputationMethod imputation,
                              const FeatureNormalizer& norm, const StftParams& params, std::uint64_t seed) {
  if (schedule.segments.empty()) return norm.standardize(rec.clean);
  const MultichannelClip damaged = apply_perturbation(rec.clip, schedule, nn::mix_seed(seed, 1));
  const MultichannelClip repaired = impute_clip(imputation, damaged, schedule, nn::mix_seed(seed, 2));
  return norm.standardize(assemble_features(repaired, params));
}

PipelineOutput pipeline_forward(Models& models, const Tensor<float>& z, const FeatureNormalizer& norm, bool training) {
  PipelineOutput out;
  const auto rec = models.mode.recovery();
  if (!rec) {
    out.accdoa = models.crnn->forward(z, training);
    return out;
  }
  out.squashed = norm.squash(z);
  out.recovery = recover<float>(out.squashed, models.info.get(), models.lafs.get(), *rec, training);
  out.accdoa = models.crnn->forward(norm.unsquash(out.recovery.f_hat), training);
  return out;
}

namespace {

Tensor<float> stack(const std::vector<const Tensor<float>*>& items) {
  std::vector<int> shape = items.front()->shape();
  for (const auto* t : items) {
    if (t->shape() != shape) throw DataError("batch items differ in shape; clips must share a length");
  }
  shape.insert(shape.begin(), static_cast<int>(items.size()));
  Tensor<float> out(shape);
  const std::size_t block = items.front()->size();
  for (std::size_t i = 0; i < items.size(); ++i) std::copy_n(items[i]->data(), block, out.data() + i * block);
  return out;
}

Tensor<float> slice(const Tensor<float>& batch, int index) {
  std::vector<int> shape(batch.shape().begin() + 1, batch.shape().end());
  Tensor<float> out(shape);
  std::copy_n(batch.data() + static_cast<std::size_t>(index) * out.size(), out.size(), out.data());
  return out;
}

/// A fixed-length window of one clip's frames.
struct Chunk {
  std::size_t clip = 0;
  int frame0 = 0;
};

Tensor<float> frame_window(const Tensor<float>& t, int frame_axis, int frame0, int frames) {
  std::vector<int> shape = t.shape();
  const int total = shape[frame_axis];
  if (frame0 == 0 && frames == total) return t;
  shape[frame_axis] = frames;
  Tensor<float> out(shape);
  std::size_t outer = 1;
  for (int a = 0; a < frame_axis; ++a) outer *= static_cast<std::size_t>(t.dim(a));
  const std::size_t inner = t.stride(frame_axis);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(t.data() + (o * total + frame0) * inner, frames * inner, out.data() + o * frames * inner);
  }
  return out;
}

void check_finite(double loss, const char* what, long step) {
  if (!std::isfinite(loss)) {
    spdlog::error("non-finite {} at step {}", what, step);
    throw DivergenceError(std::string("non-finite ") + what + " at step " + std::to_string(step), step);
  }
}

std::uint64_t noise_seed(std::uint64_t seed, const std::string& id, int epoch) {
  return nn::mix_seed(nn::mix_seed(seed, nn::tag_hash("noise:" + id)), static_cast<std::uint64_t>(epoch));
}

struct EvalCore {
  EvalReport report;
  double l_dt = 0.0;
  double l_dci = kNaN;
};

EvalCore evaluate_core(Models& models, const FeatureNormalizer& norm, const Dataset& data, const ExperimentConfig& cfg,
                       const EvalOptions& opt) {
  const auto& clips = data.split(opt.split).clips;
  if (clips.empty()) throw DataError("split '" + to_string(opt.split) + "' is empty");
  const ImputationMethod imputation = opt.imputation.value_or(models.mode.time_domain_imputation());
  const int sr = data.manifest.sample_rate;
  const int hop = cfg.features.hop_samples(sr), win = cfg.features.window_samples(sr);
  const auto rec_mode = models.mode.recovery();

  EvalCore core;
  EvalReport& r = core.report;
  r.mode = models.mode.str();
  r.regime = !opt.regime.empty() ? opt.regime : models.mode.trains_on_clean() ? "PreTrain" : "ReTrain";
  r.imputation = to_string(imputation);
  r.split = to_string(opt.split);
  r.train_mdp_pct = models.mode.trains_on_clean() ? 0.0 : cfg.mdp_pct;
  r.eval_mdp_pct = opt.mdp_pct;
  r.max_simultaneous_m = opt.max_simultaneous_m;
  r.seed = opt.seed;
  r.config_hash = config_hash(cfg);

  std::vector<Tensor<float>> inputs(clips.size());
  std::vector<MaskSchedule> schedules(clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto& rec = clips[i];
    if (opt.mdp_pct > 0.0) {
      schedules[i] = clip_schedule(rec, opt.mdp_pct, opt.max_simultaneous_m, opt.seed, 0, cfg.strict_mdp);
      inputs[i] = corrupted_input(rec, schedules[i], imputation, norm, cfg.features, noise_seed(opt.seed, rec.id, 0));
    } else if (rec.stored_schedule) {
      // audio was perturbed upstream; only imputation remains
      schedules[i] = *rec.stored_schedule;
      const auto repaired = impute_clip(imputation, rec.clip, schedules[i], nn::mix_seed(noise_seed(opt.seed, rec.id, 0), 2));
      inputs[i] = norm.standardize(assemble_features(repaired, cfg.features));
    } else {
      schedules[i].clip_duration_s = rec.clip.duration_s();
      schedules[i].n_channels = rec.clip.n_channels();
      inputs[i] = norm.standardize(rec.clean);
    }
  }
  if (opt.mdp_pct == 0.0 && !clips.empty() && clips.front().stored_schedule && clips.front().stored_schedule->target_mdp_pct) {
    r.eval_mdp_pct = *clips.front().stored_schedule->target_mdp_pct;
  }
  r.mdp_mismatch = std::abs(r.train_mdp_pct - r.eval_mdp_pct) > 1e-9;

  std::ofstream csv;
  if (opt.predictions_csv) {
    if (opt.predictions_csv->has_parent_path()) std::filesystem::create_directories(opt.predictions_csv->parent_path());
    csv.open(*opt.predictions_csv, std::ios::trunc);
    if (!csv) throw DataError("cannot write predictions: " + opt.predictions_csv->string());
    write_predictions_header(csv);
  }

  double dt_sum = 0.0, dci_sum = 0.0;
  std::size_t dt_n = 0, dci_n = 0;
  double masked_sum = 0.0, clean_sum = 0.0, diff_sq = 0.0, ref_sq = 0.0;
  long masked_frames_n = 0, clean_frames_n = 0;

  std::size_t i = 0;
  while (i < clips.size()) {
    std::size_t j = i;
    std::vector<const Tensor<float>*> items;
    while (j < clips.size() && static_cast<int>(items.size()) < opt.batch_size &&
           (items.empty() || inputs[j].shape() == inputs[i].shape())) {
      items.push_back(&inputs[j]);
      ++j;
    }
    const Tensor<float> z = stack(items);
    const PipelineOutput out = pipeline_forward(models, z, norm, false);
    std::vector<const Tensor<float>*> tgts;
    for (std::size_t k = i; k < j; ++k) tgts.push_back(&clips[k].target);
    const Tensor<float> target = stack(tgts);
    dt_sum += nn::mse_loss<float>(out.accdoa, target, nullptr) * static_cast<double>(target.size());
    dt_n += target.size();
    if (models.lafs) {
      std::vector<const Tensor<float>*> clean_items;
      std::vector<Tensor<float>> clean_z;
      clean_z.reserve(j - i);
      for (std::size_t k = i; k < j; ++k) clean_z.push_back(norm.standardize(clips[k].clean));
      for (const auto& t : clean_z) clean_items.push_back(&t);
      const Tensor<float> clean_s = norm.squash(stack(clean_items));
      dci_sum += nn::mse_loss<float>(out.recovery.f_bar, clean_s, nullptr) * static_cast<double>(clean_s.size());
      dci_n += clean_s.size();
    }
    if (rec_mode) {
      for (std::size_t e = 0; e < out.squashed.size(); ++e) {
        const double d = out.recovery.f_hat[e] - out.squashed[e];
        diff_sq += d * d;
        ref_sq += static_cast<double>(out.squashed[e]) * out.squashed[e];
      }
    }
    for (std::size_t k = i; k < j; ++k) {
      const int b = static_cast<int>(k - i);
      const auto& rec = clips[k];
      const Tensor<float> pred = slice(out.accdoa, b);
      const auto preds = decode_accdoa(pred, cfg.threshold);
      const auto refs = decode_accdoa(rec.target, 0.5);
      const DoaScore s = e_doa(preds, refs);
      r.score += s;
      r.reference_pairs += static_cast<long>(refs.size());
      const double achieved =
          schedules[k].segments.empty() ? 0.0 : schedules[k].achieved_mdp_pct.value_or(compute_mdp(schedules[k]));
      r.clips.push_back({rec.id, s.mean_deg(), s.matched, achieved});
      if (csv.is_open()) write_predictions_csv(csv, rec.id, preds);
      if (!out.recovery.entropy.values.empty()) {
        const Tensor<float> ent = slice(out.recovery.entropy.values, b);  // [C, T, D]
        const int c = ent.dim(0), frames = ent.dim(1), bins = ent.dim(2);
        const auto masked = masked_frames(schedules[k], sr, hop, win, frames);
        for (int t = 0; t < frames; ++t) {
          double m = 0.0;
          for (int ch = 0; ch < c; ++ch) {
            const float* row = ent.data() + (static_cast<std::size_t>(ch) * frames + t) * bins;
            for (int d = 0; d < bins; ++d) m += row[d];
          }
          m /= static_cast<double>(c) * bins;
          if (masked[t]) {
            masked_sum += m;
            ++masked_frames_n;
          } else {
            clean_sum += m;
            ++clean_frames_n;
          }
        }
      }
    }
    i = j;
  }
  core.l_dt = dt_sum / static_cast<double>(dt_n);
  if (dci_n > 0) core.l_dci = dci_sum / static_cast<double>(dci_n);
  if (masked_frames_n + clean_frames_n > 0) {
    EntropyStats es;
    es.masked_frames = masked_frames_n;
    es.clean_frames = clean_frames_n;
    es.masked_mean = masked_frames_n > 0 ? masked_sum / masked_frames_n : kNaN;
    es.clean_mean = clean_frames_n > 0 ? clean_sum / clean_frames_n : kNaN;
    r.entropy = es;
  }
  if (rec_mode && ref_sq > 0.0) r.passthrough_rel_change = std::sqrt(diff_sq / ref_sq);
  return core;
}

Checkpoint make_checkpoint(Models& models, const ExperimentConfig& cfg, const FeatureNormalizer& norm,
                           const DatasetManifest& manifest, int best_epoch, double best_val) {
  Checkpoint c;
  // output_dir stays out so the same run written elsewhere is byte-identical
  c.config_json = config_json(cfg, false).dump(2);
  c.config_hash = config_hash(cfg);
  c.normalizer = norm;
  c.mic_positions = manifest.mic_positions;
  c.n_classes = manifest.n_classes;
  c.best_epoch = best_epoch;
  c.best_val_e_doa = best_val;
  for (const auto& e : models.state()) c.tensors.emplace(e.name, *e.tensor);
  return c;
}

json epoch_to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"train_l_dt", nan_to_null(e.train_l_dt)},
          {"train_l_dci", nan_to_null(e.train_l_dci)},
          {"val_l_dt", nan_to_null(e.val_l_dt)},
          {"val_l_dci", nan_to_null(e.val_l_dci)},
          {"val_e_doa_deg", nan_to_null(e.val_e_doa)},
          {"val_recall", nan_to_null(e.val_recall)},
          {"best", e.best}};
}

}  // namespace

EvalReport evaluate_models(Models& models, const FeatureNormalizer& norm, const Dataset& data,
                           const ExperimentConfig& cfg, const EvalOptions& opt) {
  return evaluate_core(models, norm, data, cfg, opt).report;
}

// -------------------------------------------------------------- training

TrainResult train_joint(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.deterministic) Eigen::setNbThreads(1);
  const auto t_start = std::chrono::steady_clock::now();
  const std::filesystem::path out_dir(cfg.output_dir);
  std::filesystem::create_directories(out_dir);

  const Dataset data = load_dataset(cfg.manifest, cfg.features, cfg.max_clips_per_split);
  if (data.train.clips.empty()) throw DataError("training split is empty");
  if (data.val.clips.empty()) throw DataError("validation split is empty");
  for (const auto& c : data.train.clips) {
    if (c.stored_schedule) throw DataError("training needs clean audio; clip " + c.id + " is already perturbed");
  }

  std::vector<const FeatureMatrix*> train_feats;
  for (const auto& c : data.train.clips) train_feats.push_back(&c.clean);
  const FeatureNormalizer norm = FeatureNormalizer::fit(train_feats);

  Models models = build_models(cfg, norm.channels(), norm.bins(), data.manifest.n_classes);
  const ModeSpec& mode = models.mode;
  const auto rec_mode = mode.recovery();
  const double train_mdp = mode.trains_on_clean() ? 0.0 : cfg.mdp_pct;
  const ImputationMethod imputation = mode.time_domain_imputation();

  nn::Adam<float> dt_opt(models.dt_parameters(), cfg.optimizer);
  std::unique_ptr<nn::Adam<float>> lafs_opt;
  if (models.lafs) lafs_opt = std::make_unique<nn::Adam<float>>(models.lafs_parameters(), cfg.lafs_optimizer);

  // chunking into fixed one-second windows
  const int sr = data.manifest.sample_rate;
  const int chunk_frames = cfg.features.n_frames(sr, sr);
  std::vector<Chunk> chunks;
  for (std::size_t i = 0; i < data.train.clips.size(); ++i) {
    const int frames = data.train.clips[i].clean.frames();
    if (frames < chunk_frames) {
      spdlog::warn("clip {} is shorter than one second; skipped for training", data.train.clips[i].id);
      continue;
    }
    for (int f0 = 0; f0 + chunk_frames <= frames; f0 += chunk_frames) chunks.push_back({i, f0});
  }
  if (chunks.size() < 2) throw DataError("need at least two one-second training chunks");

  std::vector<Tensor<float>> clean_s(data.train.clips.size());
  if (models.lafs) {
    for (std::size_t i = 0; i < clean_s.size(); ++i) clean_s[i] = norm.squash(norm.standardize(data.train.clips[i].clean));
  }
  std::vector<Tensor<float>> inputs(data.train.clips.size());
  auto prepare_inputs = [&](int epoch) {
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const auto& rec = data.train.clips[i];
      if (train_mdp <= 0.0) {
        inputs[i] = norm.standardize(rec.clean);
        continue;
      }
      const MaskSchedule s = clip_schedule(rec, train_mdp, cfg.max_simultaneous_m, cfg.seed, epoch, cfg.strict_mdp);
      inputs[i] = corrupted_input(rec, s, imputation, norm, cfg.features, noise_seed(cfg.seed, rec.id, epoch));
    }
  };
  prepare_inputs(0);

  std::ofstream log(out_dir / "training_log.jsonl", std::ios::trunc);
  if (!log) throw DataError("cannot write training log in " + out_dir.string());
  log << json{{"kind", "locus-train-log"}, {"config_hash", config_hash(cfg)}, {"mode", mode.str()},
              {"seed", cfg.seed}, {"train_clips", data.train.clips.size()}, {"val_clips", data.val.clips.size()}}
             .dump()
      << "\n";
  {
    std::ofstream cj(out_dir / "config.json", std::ios::trunc);
    cj << experiment_config_to_json(cfg) << "\n";
  }

  TrainResult result;
  result.checkpoint = out_dir / "checkpoint.bin";
  result.log_path = out_dir / "training_log.jsonl";
  json timing = {{"config_hash", config_hash(cfg)}, {"epochs", json::array()}};

  nn::Rng shuffle_rng(nn::mix_seed(cfg.seed, nn::tag_hash("shuffle")));
  std::vector<std::size_t> order(chunks.size());
  long step = 0;
  std::pair<int, double> best_key{2, 0.0};

  EvalOptions val_opt;
  val_opt.mdp_pct = train_mdp;
  val_opt.max_simultaneous_m = cfg.max_simultaneous_m;
  val_opt.seed = cfg.seed;
  val_opt.split = Split::Val;
  val_opt.batch_size = cfg.batch_size;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t_epoch = std::chrono::steady_clock::now();
    if (cfg.resample_masks && epoch > 0) prepare_inputs(epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double dt_sum = 0.0, dci_sum = 0.0;
    long batches = 0;
    for (std::size_t b0 = 0; b0 + 2 <= order.size(); b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
      if (b1 - b0 < 2) break;
      std::vector<Tensor<float>> zs, ts, cs;
      for (std::size_t k = b0; k < b1; ++k) {
        const Chunk& ch = chunks[order[k]];
        zs.push_back(frame_window(inputs[ch.clip], 1, ch.frame0, chunk_frames));
        ts.push_back(frame_window(data.train.clips[ch.clip].target, 0, ch.frame0, chunk_frames));
        if (models.lafs) cs.push_back(frame_window(clean_s[ch.clip], 1, ch.frame0, chunk_frames));
      }
      auto ptrs = [](const std::vector<Tensor<float>>& v) {
        std::vector<const Tensor<float>*> p;
        for (const auto& t : v) p.push_back(&t);
        return p;
      };
      const Tensor<float> z = stack(ptrs(zs));
      const Tensor<float> target = stack(ptrs(ts));
      ++step;

      PipelineOutput fw = pipeline_forward(models, z, norm, true);

      if (models.lafs) {
        Tensor<float> g;
        const double l_dci = nn::mse_loss(fw.recovery.f_bar, stack(ptrs(cs)), &g);
        check_finite(l_dci, "L_DCI", step);
        lafs_opt->zero_grad();
        models.lafs->backward(g);
        lafs_opt->step();
        dci_sum += l_dci;
      }

      Tensor<float> gy;
      const double l_dt = nn::mse_loss(fw.accdoa, target, &gy);
      check_finite(l_dt, "L_DT", step);
      dt_opt.zero_grad();
      const Tensor<float> gz = models.crnn->backward(gy);
      if (models.info) {
        Tensor<float> g_fhat = norm.unsquash_scale(gz.shape());
        for (std::size_t e = 0; e < g_fhat.size(); ++e) g_fhat[e] *= gz[e];
        models.info->backward(recovery_entropy_grad(fw.recovery, fw.squashed, g_fhat, *rec_mode));
      }
      dt_opt.step();
      dt_sum += l_dt;
      ++batches;
    }
    if (models.lafs) models.lafs->trained = true;

    EpochLog e;
    e.epoch = epoch + 1;
    e.train_l_dt = dt_sum / static_cast<double>(batches);
    e.train_l_dci = models.lafs ? dci_sum / static_cast<double>(batches) : kNaN;
    const EvalCore val = evaluate_core(models, norm, data, cfg, val_opt);
    e.val_l_dt = val.l_dt;
    e.val_l_dci = val.l_dci;
    e.val_e_doa = val.report.e_doa_deg();
    e.val_recall = val.report.recall();
    // Eligible epochs rank by E_DoA. Until one exists, the epoch with the
    // highest recall is kept, so a near-silent network never wins on a
    // handful of lucky matches.
    const bool eligible = !std::isnan(e.val_e_doa) && e.val_recall >= cfg.min_val_recall;
    const std::pair<int, double> key{eligible ? 0 : 1,
                                     eligible ? e.val_e_doa : -(std::isnan(e.val_recall) ? 0.0 : e.val_recall)};
    if (result.best_epoch < 0 || key < best_key) {
      best_key = key;
      e.best = true;
      result.best_epoch = e.epoch;
      result.best_val_e_doa = e.val_e_doa;
      save_checkpoint(make_checkpoint(models, cfg, norm, data.manifest, e.epoch, e.val_e_doa), result.checkpoint);
    }
    result.epochs.push_back(e);
    log << epoch_to_json(e).dump() << "\n";
    log.flush();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_epoch).count();
    timing["epochs"].push_back({{"epoch", e.epoch}, {"seconds", secs}});
    spdlog::info("[{}] epoch {}/{}: L_DT {:.5f} L_DCI {:.5f} | val L_DT {:.5f} E_DoA {:.2f} deg recall {:.2f}{} ({:.1f} s)",
                 mode.str(), e.epoch, cfg.epochs, e.train_l_dt, e.train_l_dci, e.val_l_dt, e.val_e_doa, e.val_recall,
                 e.best ? " *" : "", secs);
  }
  timing["total_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  std::ofstream(out_dir / "timing.json", std::ios::trunc) << timing.dump(2) << "\n";
  return result;
}

// ------------------------------------------------------------ evaluation

Models restore_models(const Checkpoint& ckpt, ExperimentConfig* cfg_out) {
  const ExperimentConfig cfg = experiment_config_from_json(ckpt.config_json);
  Models m = build_models(cfg, ckpt.normalizer.channels(), ckpt.normalizer.bins(), ckpt.n_classes);
  std::size_t used = 0;
  for (auto& e : m.state()) {
    const auto it = ckpt.tensors.find(e.name);
    if (it == ckpt.tensors.end()) throw DataError("checkpoint lacks tensor '" + e.name + "'");
    if (it->second.shape() != e.tensor->shape()) {
      throw DataError("checkpoint tensor '" + e.name + "' has shape " + nn::shape_string(it->second.shape()) +
                      ", expected " + nn::shape_string(e.tensor->shape()));
    }
    *e.tensor = it->second;
    ++used;
  }
  if (used != ckpt.tensors.size()) throw DataError("checkpoint carries tensors the model does not use");
  if (m.lafs) m.lafs->trained = true;
  if (cfg_out) *cfg_out = cfg;
  return m;
}

EvalReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                    const EvalOptions& opt) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  ExperimentConfig cfg;
  Models models = restore_models(ckpt, &cfg);
  if (cfg.deterministic) Eigen::setNbThreads(1);
  const Dataset data = load_dataset(manifest, cfg.features, cfg.max_clips_per_split);
  if (!same_geometry(data.manifest.mic_positions, ckpt.mic_positions)) {
    throw DataError("microphone geometry of " + manifest.string() +
                    " differs from the checkpoint's; the model must be retrained for a new array");
  }
  if (data.manifest.n_classes != ckpt.n_classes) throw DataError("manifest class count differs from the checkpoint");
  const auto& clips = data.split(opt.split).clips;
  if (!clips.empty() && clips.front().clean.channels() != ckpt.normalizer.channels()) {
    throw DataError("feature channel count differs from the checkpoint");
  }
  EvalReport r = evaluate_models(models, ckpt.normalizer, data, cfg, opt);
  r.config_hash = ckpt.config_hash;
  return r;
}

// --------------------------------------------------------------- reports

double EvalReport::recall() const {
  return reference_pairs > 0 ? static_cast<double>(score.matched) / static_cast<double>(reference_pairs) : kNaN;
}

std::string report_to_json(const EvalReport& r) {
  json clips = json::array();
  for (const auto& c : r.clips) {
    clips.push_back({{"clip_id", c.clip_id},
                     {"e_doa_deg", nan_to_null(c.e_doa_deg)},
                     {"matched", c.matched},
                     {"achieved_mdp_pct", c.achieved_mdp_pct}});
  }
  json j = {{"kind", "locus-eval"},
            {"mode", r.mode},
            {"regime", r.regime},
            {"imputation", r.imputation},
            {"split", r.split},
            {"train_mdp_pct", r.train_mdp_pct},
            {"eval_mdp_pct", r.eval_mdp_pct},
            {"max_simultaneous_m", r.max_simultaneous_m},
            {"seed", r.seed},
            {"config_hash", r.config_hash},
            {"mdp_mismatch", r.mdp_mismatch},
            {"e_doa_deg", nan_to_null(r.e_doa_deg())},
            {"matched", r.score.matched},
            {"reference_pairs", r.reference_pairs},
            {"e_doa_sum_deg", r.score.sum_deg},
            {"clips", clips}};
  if (r.entropy) {
    j["entropy"] = {{"masked_mean", nan_to_null(r.entropy->masked_mean)},
                    {"clean_mean", nan_to_null(r.entropy->clean_mean)},
                    {"gap", nan_to_null(r.entropy->gap())},
                    {"masked_frames", r.entropy->masked_frames},
                    {"clean_frames", r.entropy->clean_frames}};
  }
  if (r.passthrough_rel_change) j["recovery_rel_change"] = *r.passthrough_rel_change;
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  EvalReport r;
  try {
    const json j = json::parse(text);
    if (j.value("kind", "") != "locus-eval") throw DataError("not an evaluation report");
    r.mode = j.at("mode").get<std::string>();
    r.regime = j.at("regime").get<std::string>();
    r.imputation = j.at("imputation").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.train_mdp_pct = j.at("train_mdp_pct").get<double>();
    r.eval_mdp_pct = j.at("eval_mdp_pct").get<double>();
    r.max_simultaneous_m = j.at("max_simultaneous_m").get<int>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.mdp_mismatch = j.at("mdp_mismatch").get<bool>();
    r.score.matched = j.at("matched").get<long>();
    r.score.sum_deg = j.at("e_doa_sum_deg").get<double>();
    r.reference_pairs = j.at("reference_pairs").get<long>();
    for (const auto& c : j.at("clips")) {
      r.clips.push_back({c.at("clip_id").get<std::string>(), null_to_nan(c.at("e_doa_deg")),
                         c.at("matched").get<long>(), c.at("achieved_mdp_pct").get<double>()});
    }
    if (j.contains("entropy")) {
      const auto& e = j.at("entropy");
      r.entropy = EntropyStats{null_to_nan(e.at("masked_mean")), null_to_nan(e.at("clean_mean")),
                               e.at("masked_frames").get<long>(), e.at("clean_frames").get<long>()};
    }
    if (j.contains("recovery_rel_change")) r.passthrough_rel_change = j.at("recovery_rel_change").get<double>();
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed evaluation report: ") + e.what());
  }
  return r;
}

void write_report(const EvalReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write report: " + path.string());
  out << report_to_json(r) << "\n";
}

EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open report: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return report_from_json(ss.str());
}

// ------------------------------------------------------------ conditions

EvalReport run_condition(const Condition& cond, const ExperimentConfig& base,
                         const std::optional<std::filesystem::path>& pretrained_checkpoint) {
  char mdp[32];
  std::snprintf(mdp, sizeof(mdp), "%g", cond.mdp_pct);
  EvalOptions opt;
  opt.mdp_pct = cond.mdp_pct;
  opt.max_simultaneous_m = base.max_simultaneous_m;
  opt.seed = base.seed;
  opt.batch_size = base.batch_size;
  std::filesystem::path report_path;
  EvalReport r;
  if (cond.regime == Regime::PreTrain) {
    if (!pretrained_checkpoint || !std::filesystem::exists(*pretrained_checkpoint)) {
      throw DataError("PreTrain condition needs an existing clean checkpoint");
    }
    const ImputationMethod m = imputation_from_string(cond.method);
    if (m == ImputationMethod::Autoenc) throw ConfigError("autoenc needs a trained LaFS; use the ReTrain regime");
    opt.imputation = m;
    opt.regime = "PreTrain";
    r = evaluate(*pretrained_checkpoint, base.manifest, opt);
    report_path = std::filesystem::path(base.output_dir) / ("PreTrain_" + cond.method + "_mdp" + mdp + ".json");
  } else {
    ExperimentConfig cfg = base;
    const bool is_imputer = cond.method == "mean" || cond.method == "hotdeck" || cond.method == "prob" ||
                            cond.method == "autoenc" || cond.method == "corrupt-passthrough";
    cfg.mode = is_imputer ? "baseline:" + cond.method : cond.method;
    cfg.mdp_pct = cond.mdp_pct;
    std::string tag = cfg.mode;
    std::replace(tag.begin(), tag.end(), ':', '-');
    cfg.output_dir = (std::filesystem::path(base.output_dir) / ("ReTrain_" + tag + "_mdp" + mdp)).string();
    const TrainResult tr = train_joint(cfg);
    opt.regime = "ReTrain";
    r = evaluate(tr.checkpoint, cfg.manifest, opt);
    report_path = std::filesystem::path(base.output_dir) / ("ReTrain_" + tag + "_mdp" + mdp + ".json");
  }
  write_report(r, report_path);
  return r;
}

}  // namespace locus
