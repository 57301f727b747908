#include "locus/errors.hpp"
#include "locus/intermittence.hpp"
#include "test_util.hpp"

#include <fstream>

using namespace locus;
using locus::test::TempDir;

namespace {

MaskSchedule make_schedule(double duration, int n, std::vector<MaskSegment> segs) {
  MaskSchedule s;
  s.clip_duration_s = duration;
  s.n_channels = n;
  s.segments = std::move(segs);
  return s;
}

MultichannelClip ramp_clip(int channels, long samples, int sr) {
  MultichannelClip c;
  c.sample_rate = sr;
  c.samples = SampleMatrix(channels, samples);
  for (int ch = 0; ch < channels; ++ch) {
    for (long i = 0; i < samples; ++i) c.samples(ch, i) = 0.001f * static_cast<float>((i + 37 * ch) % 500);
  }
  return c;
}

}  // namespace

TEST_CASE("compute_mdp worked examples") {
  // 45 s of a 60 s clip with a channel missing
  auto s = make_schedule(60.0, 4, {{0.0, 20.0, {1}}, {30.0, 55.0, {0, 2}}});
  CHECK(compute_mdp(s) == 75.0);
  CHECK(compute_mdp(make_schedule(60.0, 4, {})) == 0.0);
  CHECK(compute_mdp(make_schedule(60.0, 4, {{0.0, 60.0, {3}}})) == 100.0);
}

TEST_CASE("compute_mdp is invariant under reordering and splitting") {
  auto a = make_schedule(10.0, 4, {{1.0, 3.0, {0}}, {5.0, 6.5, {1, 2}}});
  auto b = make_schedule(10.0, 4, {{5.0, 6.5, {1, 2}}, {1.0, 2.0, {0}}, {2.0, 3.0, {0}}});
  CHECK(compute_mdp(a) == doctest::Approx(compute_mdp(b)).epsilon(1e-12));
  CHECK(compute_mdp(a) == doctest::Approx(35.0));
}

TEST_CASE("sample_schedule") {
  SUBCASE("60 s, 4 channels, 75 percent, m <= 2") {
    const auto s = sample_schedule(1, 60.0, 4, 75.0, 2);
    const double mdp = compute_mdp(s);
    CHECK(mdp >= 74.5);
    CHECK(mdp <= 75.5);
    for (const auto& seg : s.segments) {
      CHECK(seg.missing.size() >= 1);
      CHECK(seg.missing.size() <= 2);
    }
    REQUIRE(s.achieved_mdp_pct.has_value());
    CHECK(*s.achieved_mdp_pct == mdp);
  }
  SUBCASE("zero MDP gives an empty schedule") { CHECK(sample_schedule(3, 5.0, 4, 0.0, 2).segments.empty()); }
  SUBCASE("same seed, same schedule") { CHECK(sample_schedule(9, 30.0, 6, 40.0, 3) == sample_schedule(9, 30.0, 6, 40.0, 3)); }
  SUBCASE("every target in 0..100 lands within one granule") {
    for (int p = 0; p <= 100; p += 5) {
      const auto s = sample_schedule(static_cast<std::uint64_t>(p), 1.0, 4, p, 2);
      CHECK(std::abs(compute_mdp(s) - p) <= 1.0 + 1e-9);
    }
  }
  SUBCASE("strict mode rejects an infeasible target") {
    ScheduleOptions opt;
    opt.strict = true;
    CHECK_THROWS_AS(sample_schedule(1, 1.0, 4, 75.0, 2, opt), DataError);
    CHECK_NOTHROW(sample_schedule(1, 1.0, 4, 80.0, 2, opt));
  }
  SUBCASE("m above n/2 is rejected") { CHECK_THROWS(sample_schedule(1, 1.0, 4, 50.0, 3)); }
}

TEST_CASE("schedule validation") {
  CHECK_THROWS_AS(make_schedule(10.0, 4, {{0.0, 2.0, {0, 1, 2}}}).validate(), DataError);
  CHECK_THROWS_AS(make_schedule(10.0, 4, {{0.0, 2.0, {0}}, {1.0, 3.0, {1}}}).validate(), DataError);
  CHECK_THROWS_AS(make_schedule(10.0, 4, {{9.0, 11.0, {0}}}).validate(), DataError);
  CHECK_NOTHROW(make_schedule(10.0, 4, {{0.0, 2.0, {0, 3}}}).validate());
}

TEST_CASE("schedule_from_energy_trace") {
  SUBCASE("one device off for [10, 20] s") {
    EnergyTrace t;
    t.samples = {{0.0, "A", true}, {10.0, "A", false}, {20.0, "A", true}, {30.0, "A", true}};
    const auto s = schedule_from_energy_trace(t, {{"A", {0, 1}}}, 4);
    REQUIRE(s.segments.size() == 1);
    CHECK(s.segments[0] == MaskSegment{10.0, 20.0, {0, 1}});
  }
  SUBCASE("always active") {
    EnergyTrace t;
    t.samples = {{0.0, "A", true}, {5.0, "B", true}, {60.0, "A", true}};
    const auto s = schedule_from_energy_trace(t, {{"A", {0}}, {"B", {1}}}, 4);
    CHECK(s.segments.empty());
    CHECK(compute_mdp(s) == 0.0);
  }
  SUBCASE("overlapping outages union to 56.67 percent of 120 s") {
    TempDir tmp("trace");
    {
      std::ofstream f(tmp / "trace.csv");
      f << "timestamp,device,active\n"
        << "0,A,1\n0,B,1\n10,A,0\n30,B,0\n40,A,1\n78,B,1\n120,A,1\n120,B,1\n";
    }
    const auto t = load_energy_trace_csv(tmp / "trace.csv");
    const auto s = schedule_from_energy_trace(t, {{"A", {0}}, {"B", {2}}}, 4);
    CHECK(compute_mdp(s) == doctest::Approx(56.67).epsilon(0.1 / 56.67));
    CHECK(s.clip_duration_s == 120.0);
    // [30, 40) has both devices off
    bool both = false;
    for (const auto& seg : s.segments) both |= seg.missing == std::vector<int>{0, 2};
    CHECK(both);
  }
  SUBCASE("unmapped device is a data error") {
    EnergyTrace t;
    t.samples = {{0.0, "Z", false}, {1.0, "Z", true}};
    CHECK_THROWS_AS(schedule_from_energy_trace(t, {{"A", {0}}}, 4), DataError);
  }
  SUBCASE("non-increasing timestamps") {
    EnergyTrace t;
    t.samples = {{3.0, "A", false}, {3.0, "A", true}};
    CHECK_THROWS_AS(t.validate(), DataError);
  }
}

TEST_CASE("apply_perturbation") {
  SUBCASE("empty schedule is the identity") {
    const auto c = ramp_clip(4, 2400, 24000);
    const auto out = apply_perturbation(c, make_schedule(0.1, 4, {}), 5);
    CHECK(out.samples == c.samples);
  }
  SUBCASE("full-clip mask on channel 0 draws standard normal noise") {
    const auto c = ramp_clip(4, 1'440'000, 24000);
    const auto out = apply_perturbation(c, make_schedule(60.0, 4, {{0.0, 60.0, {0}}}), 11);
    const Eigen::ArrayXd x = out.samples.row(0).cast<double>().transpose().array();
    const double mean = x.mean();
    const double sd = std::sqrt((x - mean).square().mean());
    CHECK(std::abs(mean) < 0.02);
    CHECK(std::abs(sd - 1.0) < 0.02);
    for (int ch = 1; ch < 4; ++ch) CHECK(out.samples.row(ch) == c.samples.row(ch));
  }
  SUBCASE("only the scheduled ranges change") {
    const auto c = ramp_clip(4, 24000, 24000);
    const auto out = apply_perturbation(c, make_schedule(1.0, 4, {{0.0, 0.5, {2, 3}}}), 2);
    for (int ch = 0; ch < 4; ++ch) {
      for (long i = 0; i < 24000; ++i) {
        const bool masked = ch >= 2 && i < 12000;
        if (masked) {
          if (out.samples(ch, i) == c.samples(ch, i)) FAIL("masked sample unchanged at " << ch << "," << i);
        } else if (out.samples(ch, i) != c.samples(ch, i)) {
          FAIL("unmasked sample changed at " << ch << "," << i);
        }
      }
    }
  }
  SUBCASE("duration mismatch is rejected") {
    const auto c = ramp_clip(4, 24000, 24000);
    CHECK_THROWS_AS(apply_perturbation(c, make_schedule(2.0, 4, {{0.0, 0.5, {1}}}), 2), DataError);
  }
}

TEST_CASE("masked_frames marks frames whose window touches a segment") {
  const auto s = make_schedule(1.0, 4, {{0.10, 0.14, {1}}});
  // window 40 ms (960), hop 20 ms (480) at 24 kHz
  const auto f = masked_frames(s, 24000, 480, 960, 49);
  for (int t = 0; t < 49; ++t) {
    const double a = t * 0.02, b = a + 0.04;
    const bool overlap = a < 0.14 && b > 0.10;
    CHECK_MESSAGE(f[t] == overlap, "frame " << t);
  }
}

TEST_CASE("schedule file round trip") {
  TempDir tmp("sched");
  auto s = sample_schedule(4, 3.0, 4, 60.0, 2);
  save_schedule(s, tmp / "s.mask");
  CHECK(load_schedule(tmp / "s.mask") == s);
}
