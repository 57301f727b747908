#pragma once

#include "locus/features.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace locus {

/// Everything needed to rebuild a trained pipeline: the experiment config,
/// normalization statistics, array geometry, and named state tensors.
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::string config_json;
  std::string config_hash;
  FeatureNormalizer normalizer;
  std::vector<Eigen::Vector3d> mic_positions;
  int n_classes = 0;
  std::map<std::string, nn::Tensor<float>> tensors;
  int best_epoch = -1;
  double best_val_e_doa = 0.0;  // may be NaN
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
/// Throws DataError on a bad magic, a version mismatch, or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// True when both arrays list the same positions within tol meters.
bool same_geometry(const std::vector<Eigen::Vector3d>& a, const std::vector<Eigen::Vector3d>& b, double tol = 1e-6);

}  // namespace locus
