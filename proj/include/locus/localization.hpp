#pragma once

#include "locus/audio_io.hpp"
#include "locus/nn/gru.hpp"

#include <ostream>
#include <string>
#include <vector>

namespace locus {

struct CrnnConfig {
  int channels = 10;  // C_feat
  int bins = 64;      // D
  int n_classes = 7;
  std::vector<int> pool = {8, 8, 1};  // product must equal bins
  int conv_filters = 64;
  int gru_hidden = 128;
  int fc_hidden = 128;
};

/// Conv blocks pooling only the D axis, two bidirectional GRUs, and a
/// tanh-bounded head. [N, C, T, D] -> ACCDOA [N, T, K, 3].
template <typename T>
class Crnn {
 public:
  Crnn(const CrnnConfig& cfg, nn::Rng& rng);

  nn::Tensor<T> forward(const nn::Tensor<T>& x, bool training);
  nn::Tensor<T> backward(const nn::Tensor<T>& grad_out);
  void parameters(std::vector<nn::Parameter<T>*>& out);
  void state(std::vector<nn::StateEntry<T>>& out, const std::string& prefix);
  const CrnnConfig& config() const { return cfg_; }

 private:
  CrnnConfig cfg_;
  nn::Sequential<T> conv_;
  nn::BiGru<T> gru1_, gru2_;
  nn::Sequential<T> head_;
  int batch_ = 0, frames_ = 0;
};

/// Frame t covers [t*hop, t*hop + window); it is active for a label when the
/// frame centre falls inside [onset, offset).
bool frame_active(const EventLabel& label, int frame, double hop_s, double window_s);

/// Activity-masked unit DoA vectors, [T, K, 3].
nn::Tensor<float> accdoa_targets(const std::vector<EventLabel>& labels, int n_frames, int n_classes, double hop_s,
                                 double window_s);

struct Detection {
  int frame = 0;
  int class_id = 0;
  Eigen::Vector3d doa = Eigen::Vector3d::UnitX();
};

/// Emits (frame, class) iff the vector norm is strictly above threshold.
/// Input is one clip's [T, K, 3] output.
std::vector<Detection> decode_accdoa(const nn::Tensor<float>& accdoa, double threshold);

/// Angle between two directions in degrees, in [0, 180].
double angular_error_deg(const Eigen::Vector3d& p, const Eigen::Vector3d& r);

struct DoaScore {
  double sum_deg = 0.0;
  long matched = 0;
  /// NaN when nothing matched.
  double mean_deg() const;
  DoaScore& operator+=(const DoaScore& o) {
    sum_deg += o.sum_deg;
    matched += o.matched;
    return *this;
  }
};

/// Frame-level matching: a pair counts when prediction and reference share
/// (frame, class). Vectors with norm in [0.5, 2] are normalized with a
/// warning; anything else throws std::invalid_argument.
DoaScore e_doa(const std::vector<Detection>& predictions, const std::vector<Detection>& references);

void write_predictions_header(std::ostream& out);
void write_predictions_csv(std::ostream& out, const std::string& clip_id, const std::vector<Detection>& detections);

}  // namespace locus
