#include "locus/errors.hpp"
#include "locus/features.hpp"
#include "locus/simulate.hpp"
#include "test_util.hpp"

#include <fstream>
#include <sstream>

using namespace locus;
using locus::test::TempDir;

namespace {

RoomSpec test_room() {
  RoomSpec r;
  r.id = "test";
  r.dims = {6.0, 5.0, 3.0};
  r.absorption.fill(0.4);
  r.max_order = 3;
  return r;
}

std::vector<double> noise_burst(long n, std::uint64_t seed) {
  nn::Rng rng(seed);
  std::normal_distribution<double> d(0.0, 0.1);
  std::vector<double> x(n);
  for (auto& v : x) v = d(rng);
  return x;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("room spec") {
  auto r = test_room();
  CHECK_NOTHROW(r.validate());
  CHECK(r.inside({1, 1, 1}));
  CHECK_FALSE(r.inside({0.1, 1, 1}, 0.3));
  CHECK(r.rt60_sabine() > 0.0);
  r.absorption[2] = 0.0;
  CHECK_THROWS_AS(r.validate(), ConfigError);
}

TEST_CASE("direct path arrives at distance / c") {
  auto r = test_room();
  const Eigen::Vector3d src(1.0, 2.5, 1.5), mic(4.43, 2.5, 1.5);  // 3.43 m
  const auto h = image_source_rir(r, src, mic, 24000);
  CHECK(std::abs(estimate_first_arrival(h) - 240.0) <= 0.5);
}

TEST_CASE("order-0 room has a single direct-path tap") {
  auto r = test_room();
  r.max_order = 0;
  const Eigen::Vector3d src(1.0, 2.5, 1.5), mic(4.43, 2.5, 1.5);
  CHECK(image_sources(r, src, mic).size() == 1);
  const auto h = image_source_rir(r, src, mic, 24000);
  int nonzero = 0;
  for (double v : h) nonzero += std::abs(v) > 1e-12;
  CHECK(nonzero == 1);
  CHECK(h[240] == doctest::Approx(1.0 / (4.0 * 3.141592653589793 * 3.43)));
}

TEST_CASE("more absorption weakens every reflection and leaves the direct path") {
  auto a = test_room();
  auto b = a;
  b.absorption.fill(0.8);
  const Eigen::Vector3d src(1.2, 1.7, 1.1), mic(3.9, 3.1, 1.6);
  const auto ia = image_sources(a, src, mic), ib = image_sources(b, src, mic);
  REQUIRE(ia.size() == ib.size());
  CHECK(ia[0].order == 0);
  CHECK(ia[0].gain == ib[0].gain);
  for (std::size_t k = 1; k < ia.size(); ++k) {
    CHECK(ia[k].distance == ib[k].distance);
    CHECK(std::abs(ib[k].gain) < std::abs(ia[k].gain));
  }
}

TEST_CASE("first arrival within half a sample for random placements") {
  nn::Rng rng(3);
  auto room = test_room();
  std::uniform_real_distribution<double> ux(0.5, 5.5), uy(0.5, 4.5), uz(0.5, 2.5);
  for (int k = 0; k < 50; ++k) {
    const Eigen::Vector3d s(ux(rng), uy(rng), uz(rng)), m(ux(rng), uy(rng), uz(rng));
    if ((s - m).norm() < 0.5) continue;
    const auto h = image_source_rir(room, s, m, 24000);
    CHECK(std::abs(estimate_first_arrival(h) - (s - m).norm() / 343.0 * 24000) <= 0.5);
  }
}

TEST_CASE("array presets") {
  for (const auto& arr : {tetrahedral_array(0.042), octahedral_array(0.0425)}) {
    for (std::size_t i = 0; i < arr.size(); ++i) {
      for (std::size_t j = i + 1; j < arr.size(); ++j) CHECK((arr[i] - arr[j]).norm() <= 0.085 + 1e-12);
    }
  }
  CHECK(tetrahedral_array().size() == 4);
  CHECK(octahedral_array().size() == 6);
  CHECK(octahedral_array(0.0425)[0].norm() == doctest::Approx(0.0425));
}

TEST_CASE("synthesize_clip") {
  SceneSpec sc;
  sc.room = test_room();
  sc.array_center = {3.0, 2.5, 1.5};
  for (const auto& m : tetrahedral_array()) sc.mics.push_back(sc.array_center + m);
  sc.source = sc.array_center + Eigen::Vector3d(2.0, 0, 0);
  sc.source_signal = noise_burst(24000, 1);
  sc.class_id = 3;
  sc.onset_s = 0.0;
  sc.offset_s = 1.0;

  SUBCASE("label direction and geometry") {
    const auto out = synthesize_clip(sc, 1.0, 24000, 5);
    CHECK((out.label.doa_unit - Eigen::Vector3d::UnitX()).norm() < 1e-6);
    CHECK(out.label.class_id == 3);
    CHECK(out.clip.n_channels() == 4);
    CHECK((out.clip.channel_geometry[0] - tetrahedral_array()[0]).norm() < 1e-12);
    const double rms = std::sqrt(out.clip.samples.cast<double>().array().square().mean());
    CHECK(std::isfinite(rms));
    CHECK(rms > 0.0);
  }
  SUBCASE("infinite SNR adds no noise") {
    sc.snr_db = std::numeric_limits<double>::infinity();
    CHECK(synthesize_clip(sc, 1.0, 24000, 5).clip.samples == synthesize_clip(sc, 1.0, 24000, 6).clip.samples);
  }
  SUBCASE("requested SNR is met") {
    sc.snr_db = 10.0;
    auto quiet = sc;
    quiet.snr_db = std::numeric_limits<double>::infinity();
    const Eigen::MatrixXd noisy = synthesize_clip(sc, 1.0, 24000, 5).clip.samples.cast<double>();
    const Eigen::MatrixXd clean = synthesize_clip(quiet, 1.0, 24000, 5).clip.samples.cast<double>();
    const double ps = clean.array().square().mean(), pn = (noisy - clean).array().square().mean();
    CHECK(10.0 * std::log10(ps / pn) == doctest::Approx(10.0).epsilon(1e-3));
  }
  SUBCASE("source outside the room") {
    sc.source = {10, 1, 1};
    CHECK_THROWS_AS(synthesize_clip(sc, 1.0, 24000, 5), DataError);
  }
}

TEST_CASE("synthesized two-mic clip has its GCC peak at the geometric lag") {
  SceneSpec sc;
  sc.room = test_room();
  sc.room.max_order = 0;
  sc.array_center = {3.0, 2.5, 1.5};
  sc.mics = {sc.array_center + Eigen::Vector3d(-0.1, 0, 0), sc.array_center + Eigen::Vector3d(0.1, 0, 0)};
  sc.snr_db = 30.0;
  nn::Rng rng(8);
  std::uniform_real_distribution<double> ux(0.6, 5.4), uy(0.6, 4.4);
  for (int k = 0; k < 10; ++k) {
    sc.source = {ux(rng), uy(rng), 1.2};
    sc.source_signal = noise_burst(24000, 100 + k);
    sc.offset_s = 1.0;
    const auto out = synthesize_clip(sc, 1.0, 24000, k);
    const std::vector<float> a(out.clip.samples.row(0).begin(), out.clip.samples.row(0).end());
    const std::vector<float> b(out.clip.samples.row(1).begin(), out.clip.samples.row(1).end());
    const auto g = gcc_phat(a, b, {}, 24000);
    const double lag = ((sc.source - sc.mics[1]).norm() - (sc.source - sc.mics[0]).norm()) / 343.0 * 24000;
    const Eigen::RowVectorXd mean = g.colwise().mean();
    Eigen::Index best;
    mean.maxCoeff(&best);
    CHECK_MESSAGE(std::abs((best - 32) - lag) <= 1.0, "placement " << k << " lag " << lag);
  }
}

TEST_CASE("class signals are silent outside the event") {
  for (int c = 0; c < kSyntheticClasses; ++c) {
    const auto s = class_signal(c, 24000, 24000, 0.25, 0.75, 1);
    double inside = 0.0, outside = 0.0;
    for (long i = 0; i < 24000; ++i) (i >= 6000 && i < 18000 ? inside : outside) += s[i] * s[i];
    CHECK(inside > 0.0);
    CHECK(outside == 0.0);
  }
}

TEST_CASE("desk preset and dataset generation") {
  const auto desk = desk_preset();
  CHECK(desk.train_clips == 300);
  CHECK(desk.val_clips == 60);
  CHECK(desk.test_clips == 60);
  CHECK(desk.n_classes == 7);
  CHECK(desk.rooms.size() == 3);
  CHECK(desk.sample_rate == 24000);

  auto small = desk;
  small.train_clips = 6;
  small.val_clips = 2;
  small.test_clips = 2;
  TempDir tmp("sim");
  const auto a = generate_dataset(small, 4, tmp / "a");
  const auto b = generate_dataset(small, 4, tmp / "b");
  CHECK(a == b);
  CHECK(a.entries.size() == 10);
  CHECK(a.split(Split::Val).size() == 2);
  CHECK(a.mic_positions.size() == 4);
  CHECK(load_manifest(tmp / "a" / "manifest.jsonl") == a);
  CHECK(slurp(tmp / "a" / a.entries[3].clip) == slurp(tmp / "b" / b.entries[3].clip));
  const auto clip = load_clip(tmp / "a" / a.entries[0].clip);
  CHECK(clip.n_samples() == 24000);
  CHECK(clip.n_channels() == 4);
}

TEST_CASE("simulation config file") {
  TempDir tmp("simcfg");
  std::ofstream(tmp / "ok.json") << R"({"train_clips": 5, "array": "octahedral", "array_radius": 0.0425})";
  const auto cfg = load_simulation_config(tmp / "ok.json");
  CHECK(cfg.train_clips == 5);
  CHECK(cfg.array == "octahedral");
  CHECK(cfg.rooms.size() == 3);
  std::ofstream(tmp / "bad.json") << R"({"train_clip": 5})";
  CHECK_THROWS_AS(load_simulation_config(tmp / "bad.json"), ConfigError);
}
