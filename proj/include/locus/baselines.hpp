#pragma once

#include "locus/intermittence.hpp"
#include "locus/recovery.hpp"

#include <cstdint>
#include <string>

namespace locus {

enum class ImputationMethod { Mean, Hotdeck, Prob, Autoenc, CorruptPassthrough };

std::string to_string(ImputationMethod m);
/// Accepts mean, hotdeck, prob, autoenc, corrupt-passthrough. Throws ConfigError.
ImputationMethod imputation_from_string(const std::string& s);
/// True for methods that operate on audio samples rather than features.
bool is_time_domain(ImputationMethod m);

/// Each missing sample becomes the mean of the channels available at that
/// instant. Throws DataError if a segment leaves no channel available.
MultichannelClip mean_impute(const MultichannelClip& clip, const MaskSchedule& schedule);

/// Missing samples are copied from the available channel with the highest
/// Pearson correlation over the samples where both are observed. Ties go to
/// the lowest channel index; without a usable donor the segment falls back to
/// mean imputation.
MultichannelClip hotdeck_impute(const MultichannelClip& clip, const MaskSchedule& schedule);

/// Missing samples are i.i.d. draws from a Gaussian fitted to the channel's
/// observed samples (all channels pooled with zero mean when the channel has
/// none). Deterministic given seed.
MultichannelClip prob_impute(const MultichannelClip& clip, const MaskSchedule& schedule, std::uint64_t seed);

/// Dispatches the time-domain methods; feature-domain methods and the
/// passthrough return the clip unchanged.
MultichannelClip impute_clip(ImputationMethod method, const MultichannelClip& clip, const MaskSchedule& schedule,
                             std::uint64_t seed);

/// Feature-domain autoencoder imputation: the LaFS output used directly.
/// Throws std::logic_error when the network has not been trained.
nn::Tensor<float> autoenc_impute(const nn::Tensor<float>& f_tilde, Lafs<float>& lafs);

}  // namespace locus
