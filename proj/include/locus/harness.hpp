#pragma once

#include "locus/baselines.hpp"
#include "locus/checkpoint.hpp"
#include "locus/features.hpp"
#include "locus/localization.hpp"
#include "locus/nn/adam.hpp"
#include "locus/recovery.hpp"

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace locus {

enum class TrainMode { Locus, InfoOnly, LafsOnly, Corrupt, Clean, Baseline };

/// Parsed form of the mode string: locus, info-only, lafs-only, corrupt,
/// clean, or baseline:<mean|hotdeck|prob|autoenc|corrupt-passthrough>.
struct ModeSpec {
  TrainMode mode = TrainMode::Locus;
  ImputationMethod baseline = ImputationMethod::CorruptPassthrough;

  static ModeSpec parse(const std::string& s);  // throws ConfigError
  std::string str() const;
  /// Recovery stack used by the mode, if any (baseline:autoenc shares lafs-only).
  std::optional<RecoveryMode> recovery() const;
  /// Audio-domain imputation applied before feature extraction.
  ImputationMethod time_domain_imputation() const;
  bool trains_on_clean() const { return mode == TrainMode::Clean; }
};

struct ExperimentConfig {
  std::string manifest;
  std::string mode = "locus";
  double mdp_pct = 75.0;
  int max_simultaneous_m = 2;
  nn::AdamOptions optimizer;       // InFo + localizer (L_DT)
  nn::AdamOptions lafs_optimizer;  // LaFS (L_DCI)
  int batch_size = 16;
  int epochs = 40;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  bool deterministic = true;   // single-threaded execution
  bool strict_mdp = false;     // schedule sampling throws when quantization misses the target
  bool resample_masks = false; // draw fresh masks every epoch
  double threshold = 0.5;
  int reduction = 4;
  std::vector<int> pool = {8, 8, 1};
  StftParams features;
  int max_clips_per_split = 0;  // 0 keeps every clip
  /// Epochs whose validation detections cover fewer reference pairs than this
  /// fraction are not eligible as the best checkpoint.
  double min_val_recall = 0.5;

  void validate() const;
};

/// Unknown keys are rejected with ConfigError. Relative manifest and output
/// paths resolve against the config file's directory.
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
ExperimentConfig experiment_config_from_json(const std::string& json_text);
std::string experiment_config_to_json(const ExperimentConfig& cfg);
/// Hash of the canonical config without output_dir, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

/// One clip with its clean features and localization targets.
struct ClipRecord {
  std::string id;
  MultichannelClip clip;
  std::vector<EventLabel> labels;
  nn::Tensor<float> target;                    // [T, K, 3]
  FeatureMatrix clean;                         // raw features of the stored audio
  std::optional<MaskSchedule> stored_schedule; // audio already perturbed upstream
};

struct LoadedSplit {
  std::vector<ClipRecord> clips;
};

struct Dataset {
  std::filesystem::path manifest_path;
  DatasetManifest manifest;
  LoadedSplit train, val, test;
  const LoadedSplit& split(Split s) const;
};

Dataset load_dataset(const std::filesystem::path& manifest_path, const StftParams& params, int max_clips_per_split);

/// The networks used by one mode. Init seeds depend only on the master seed,
/// so shared networks start identical across modes.
struct Models {
  ModeSpec mode;
  std::unique_ptr<InfoNet<float>> info;
  std::unique_ptr<Lafs<float>> lafs;
  std::unique_ptr<Crnn<float>> crnn;

  std::vector<nn::StateEntry<float>> state();
  std::vector<nn::Parameter<float>*> dt_parameters();    // updated by L_DT
  std::vector<nn::Parameter<float>*> lafs_parameters();  // updated by L_DCI
};

Models build_models(const ExperimentConfig& cfg, int channels, int bins, int n_classes);

/// Per-clip mask schedule; depends on (seed, clip id, epoch) only.
MaskSchedule clip_schedule(const ClipRecord& rec, double mdp_pct, int max_m, std::uint64_t seed, int epoch,
                           bool strict_mdp);

/// Corrupted (and optionally imputed) z-scored features for one clip.
nn::Tensor<float> corrupted_input(const ClipRecord& rec, const MaskSchedule& schedule, ImputationMethod imputation,
                                  const FeatureNormalizer& norm, const StftParams& params, std::uint64_t seed);

/// Localizer input for a batch of z-scored features; runs recovery as needed.
struct PipelineOutput {
  nn::Tensor<float> squashed;  // recovery input, empty when unused
  RecoveryOutput<float> recovery;
  nn::Tensor<float> accdoa;    // [N, T, K, 3]
};

PipelineOutput pipeline_forward(Models& models, const nn::Tensor<float>& z, const FeatureNormalizer& norm,
                                bool training);

struct EpochLog {
  int epoch = 0;
  double train_l_dt = 0.0;
  double train_l_dci = 0.0;  // NaN for modes without LaFS
  double val_l_dt = 0.0;
  double val_l_dci = 0.0;
  double val_e_doa = 0.0;    // NaN when nothing matched
  double val_recall = 0.0;   // matched / reference (frame, class) pairs
  bool best = false;
};

struct TrainResult {
  std::filesystem::path checkpoint;
  std::filesystem::path log_path;
  std::vector<EpochLog> epochs;
  int best_epoch = -1;
  double best_val_e_doa = 0.0;
};

/// Joint training. L_DCI updates LaFS through its own optimizer; L_DT updates
/// the localizer and InFo through GRep. Writes training_log.jsonl,
/// timing.json, config.json and checkpoint.bin (best validation E_DoA).
/// Throws DivergenceError on a non-finite loss.
TrainResult train_joint(const ExperimentConfig& cfg);

struct ClipMetric {
  std::string clip_id;
  double e_doa_deg = 0.0;  // NaN when unmatched
  long matched = 0;
  double achieved_mdp_pct = 0.0;
};

struct EntropyStats {
  double masked_mean = 0.0, clean_mean = 0.0;
  long masked_frames = 0, clean_frames = 0;
  double gap() const { return clean_mean - masked_mean; }
};

struct EvalReport {
  std::string mode;
  std::string regime = "PreTrain";  // PreTrain or ReTrain
  std::string imputation = "corrupt-passthrough";
  std::string split = "test";
  double train_mdp_pct = 0.0;
  double eval_mdp_pct = 0.0;
  int max_simultaneous_m = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  bool mdp_mismatch = false;
  DoaScore score;
  long reference_pairs = 0;  // active (frame, class) pairs in the references
  std::vector<ClipMetric> clips;
  std::optional<EntropyStats> entropy;
  std::optional<double> passthrough_rel_change;  // |F_hat - F_tilde| / |F_tilde|, recovery modes

  double e_doa_deg() const { return score.mean_deg(); }
  /// Fraction of reference pairs matched by a prediction; NaN without references.
  double recall() const;
};

std::string report_to_json(const EvalReport& r);
EvalReport report_from_json(const std::string& text);
void write_report(const EvalReport& r, const std::filesystem::path& path);
EvalReport read_report(const std::filesystem::path& path);

struct EvalOptions {
  double mdp_pct = 0.0;
  int max_simultaneous_m = 2;
  std::uint64_t seed = 0;
  Split split = Split::Test;
  /// Overrides the checkpoint mode's own time-domain imputation.
  std::optional<ImputationMethod> imputation;
  /// Empty means PreTrain for clean-trained checkpoints and ReTrain otherwise.
  std::string regime;
  std::optional<std::filesystem::path> predictions_csv;
  int batch_size = 16;
};

/// Evaluates already-built models on one split.
EvalReport evaluate_models(Models& models, const FeatureNormalizer& norm, const Dataset& data,
                           const ExperimentConfig& cfg, const EvalOptions& opt);

/// Loads a checkpoint, rebuilds its networks, and evaluates on the manifest.
/// Refuses (DataError) when the manifest's array geometry differs.
EvalReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                    const EvalOptions& opt);

/// Restores a checkpoint into freshly built models.
Models restore_models(const Checkpoint& ckpt, ExperimentConfig* cfg_out);

enum class Regime { PreTrain, ReTrain };

struct Condition {
  Regime regime = Regime::PreTrain;
  /// Imputation tag for PreTrain; any mode string for ReTrain.
  std::string method = "corrupt-passthrough";
  double mdp_pct = 0.0;
};

/// PreTrain evaluates the clean checkpoint on (imputed) corrupted data.
/// ReTrain trains base with the condition's mode and MDP, then evaluates.
/// The report is also written to base.output_dir.
EvalReport run_condition(const Condition& cond, const ExperimentConfig& base,
                         const std::optional<std::filesystem::path>& pretrained_checkpoint);

/// E_DoA-vs-MDP lines and per-condition bars from every *.json report under
/// dir. Returns the written SVG paths. Throws DataError for an empty dir.
std::vector<std::filesystem::path> plot_results(const std::filesystem::path& dir);

}  // namespace locus
