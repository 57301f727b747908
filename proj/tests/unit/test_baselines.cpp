#include "locus/baselines.hpp"
#include "locus/errors.hpp"
#include "test_util.hpp"

using namespace locus;

namespace {

MaskSchedule one_segment(double duration, int n, double a, double b, std::vector<int> missing) {
  MaskSchedule s;
  s.clip_duration_s = duration;
  s.n_channels = n;
  if (b > a) s.segments.push_back({a, b, std::move(missing)});
  return s;
}

MultichannelClip noise_clip(int channels, long samples, int sr, std::uint64_t seed) {
  MultichannelClip c;
  c.sample_rate = sr;
  c.samples = SampleMatrix(channels, samples);
  nn::Rng rng(seed);
  std::normal_distribution<double> d(0.0, 0.3);
  for (int ch = 0; ch < channels; ++ch) {
    for (long i = 0; i < samples; ++i) c.samples(ch, i) = static_cast<float>(d(rng));
  }
  return c;
}

/// Asserts every sample outside the schedule's (segment x channel) ranges is unchanged.
void check_identity_outside(const MultichannelClip& in, const MultichannelClip& out, const MaskSchedule& s) {
  const auto mask = sample_mask(s, in.sample_rate, in.n_samples());
  long diffs = 0;
  for (int ch = 0; ch < in.n_channels(); ++ch) {
    for (long i = 0; i < in.n_samples(); ++i) {
      if (!mask[ch][i] && in.samples(ch, i) != out.samples(ch, i)) ++diffs;
    }
  }
  CHECK(diffs == 0);
}

}  // namespace

TEST_CASE("method names") {
  for (auto m : {ImputationMethod::Mean, ImputationMethod::Hotdeck, ImputationMethod::Prob, ImputationMethod::Autoenc,
                 ImputationMethod::CorruptPassthrough}) {
    CHECK(imputation_from_string(to_string(m)) == m);
  }
  CHECK_THROWS_AS(imputation_from_string("median"), ConfigError);
  CHECK(is_time_domain(ImputationMethod::Hotdeck));
  CHECK_FALSE(is_time_domain(ImputationMethod::Autoenc));
}

TEST_CASE("mean_impute") {
  MultichannelClip c;
  c.sample_rate = 100;
  c.samples = SampleMatrix(4, 100);
  c.samples.row(0).setConstant(1.0f);
  c.samples.row(1).setConstant(-7.0f);
  c.samples.row(2).setConstant(3.0f);
  c.samples.row(3).setConstant(5.0f);
  SUBCASE("available values 1 and 3, two channels masked") {
    const auto s = one_segment(1.0, 4, 0.2, 0.4, {1, 3});
    const auto out = mean_impute(c, s);
    CHECK(out.samples(1, 30) == 2.0f);
    CHECK(out.samples(3, 30) == 2.0f);
    CHECK(out.samples(1, 50) == -7.0f);
    check_identity_outside(c, out, s);
  }
  SUBCASE("identical available channels") {
    auto d = c;
    d.samples.row(0).setConstant(0.25f);
    d.samples.row(2).setConstant(0.25f);
    d.samples.row(3).setConstant(0.25f);
    CHECK(mean_impute(d, one_segment(1.0, 4, 0.0, 1.0, {1})).samples(1, 10) == 0.25f);
  }
  SUBCASE("empty schedule") { CHECK(mean_impute(c, one_segment(1.0, 4, 0, 0, {})).samples == c.samples); }
}

TEST_CASE("hotdeck_impute") {
  auto c = noise_clip(4, 2400, 2400, 1);
  SUBCASE("perfect-copy donor reconstructs the masked samples exactly") {
    c.samples.row(1) = c.samples.row(0);
    const auto s = one_segment(1.0, 4, 0.25, 0.75, {0});
    const auto damaged = apply_perturbation(c, s, 3);
    const auto out = hotdeck_impute(damaged, s);
    CHECK(out.samples == c.samples);
  }
  SUBCASE("ties go to the lowest channel index") {
    c.samples.row(2) = c.samples.row(0);
    c.samples.row(3) = c.samples.row(0);
    const auto s = one_segment(1.0, 4, 0.5, 1.0, {0});
    const auto out = hotdeck_impute(apply_perturbation(c, s, 4), s);
    const long i = 2000;
    CHECK(out.samples(0, i) == c.samples(2, i));
  }
  SUBCASE("empty schedule") { CHECK(hotdeck_impute(c, one_segment(1.0, 4, 0, 0, {})).samples == c.samples); }
}

TEST_CASE("prob_impute") {
  SUBCASE("constant channel imputes its constant") {
    auto c = noise_clip(4, 1000, 1000, 2);
    c.samples.row(2).setConstant(0.4f);
    const auto s = one_segment(1.0, 4, 0.5, 0.9, {2});
    const auto out = prob_impute(c, s, 5);
    for (long i = 500; i < 900; ++i) CHECK(out.samples(2, i) == doctest::Approx(0.4f));
  }
  SUBCASE("deterministic given seed") {
    const auto c = noise_clip(4, 1000, 1000, 3);
    const auto s = one_segment(1.0, 4, 0.1, 0.6, {0, 3});
    CHECK(prob_impute(c, s, 8).samples == prob_impute(c, s, 8).samples);
    CHECK(prob_impute(c, s, 8).samples != prob_impute(c, s, 9).samples);
  }
  SUBCASE("moments match the observed part of a white-noise channel") {
    auto c = noise_clip(4, 100000, 10000, 4);
    c.samples.row(1).array() += 0.5f;
    const auto s = one_segment(10.0, 4, 4.0, 8.0, {1});
    const auto out = prob_impute(c, s, 10);
    const Eigen::ArrayXd obs = c.samples.row(1).head(40000).cast<double>().transpose().array();
    const Eigen::ArrayXd imp = out.samples.row(1).segment(40000, 40000).cast<double>().transpose().array();
    const double mo = obs.mean(), mi = imp.mean();
    const double so = std::sqrt((obs - mo).square().mean()), si = std::sqrt((imp - mi).square().mean());
    CHECK(std::abs(mi - mo) <= 0.1 * std::abs(mo));
    CHECK(std::abs(si - so) <= 0.1 * so);
  }
}

TEST_CASE("time-domain imputers are identity on unmasked samples") {
  // exhaustive over every single- and double-channel subset on a small clip
  const auto c = noise_clip(4, 200, 200, 6);
  for (unsigned m = 1; m < 16; ++m) {
    std::vector<int> missing;
    for (int ch = 0; ch < 4; ++ch) {
      if (m & (1u << ch)) missing.push_back(ch);
    }
    if (missing.size() > 2) continue;
    const auto s = one_segment(1.0, 4, 0.3, 0.65, missing);
    const auto damaged = apply_perturbation(c, s, m);
    for (auto method : {ImputationMethod::Mean, ImputationMethod::Hotdeck, ImputationMethod::Prob}) {
      check_identity_outside(damaged, impute_clip(method, damaged, s, 12), s);
    }
    CHECK(impute_clip(ImputationMethod::CorruptPassthrough, damaged, s, 12).samples == damaged.samples);
  }
}

TEST_CASE("autoenc_impute") {
  nn::Rng rng(1);
  Lafs<float> lafs(3, rng);
  const auto x = locus::test::random_tensor<float>({1, 3, 12, 16}, 2, 0.0, 1.0);
  CHECK_THROWS_AS(autoenc_impute(x, lafs), std::logic_error);
  lafs.trained = true;
  const auto y = autoenc_impute(x, lafs);
  CHECK(y.shape() == x.shape());
  const auto ablation = recover<float>(x, nullptr, &lafs, RecoveryMode::LafsOnly, false);
  CHECK(y.storage() == ablation.f_hat.storage());
}
