#include "locus/nn/adam.hpp"
#include "locus/recovery.hpp"
#include "test_util.hpp"

#include <numbers>

using namespace locus;
using locus::test::grad_check;
using locus::test::grad_check_sampled;
using locus::test::random_tensor;
using locus::test::weighted_sum;

TEST_CASE("entropy_eq1 reference values") {
  CHECK(entropy_eq1(0.0) == 0.5);
  CHECK(entropy_eq1(1.0) == 0.5);
  CHECK(entropy_eq1(std::exp(-1.0)) == doctest::Approx(0.5910).epsilon(1e-4));
  CHECK(entropy_eq1(0.5) == doctest::Approx(1.0 / (1.0 + std::exp(-0.5 * std::log(2.0)))).epsilon(1e-15));
}

TEST_CASE("grep_combine") {
  nn::Tensor<double> ft({1, 1, 1, 1}, 2.0), fb({1, 1, 1, 1}, 4.0), i({1, 1, 1, 1}, 0.5);
  CHECK(grep_combine(ft, fb, i)[0] == 3.0);

  const auto a = random_tensor<double>({2, 3, 4, 5}, 1);
  const auto b = random_tensor<double>({2, 3, 4, 5}, 2);
  CHECK(grep_combine(a, b, nn::Tensor<double>(a.shape(), 1.0)).storage() == a.storage());
  CHECK(grep_combine(a, b, nn::Tensor<double>(a.shape(), 0.0)).storage() == b.storage());

  const auto info = random_tensor<double>(a.shape(), 3, 0.0, 1.0);
  const auto out = grep_combine(a, b, info);
  for (std::size_t k = 0; k < a.size(); ++k) {
    // residual form F_bar + I (F_tilde - F_bar)
    CHECK(out[k] == doctest::Approx(b[k] + info[k] * (a[k] - b[k])).epsilon(1e-12));
  }
  CHECK_THROWS(grep_combine(a, random_tensor<double>({2, 3, 4, 4}, 4), info));
}

TEST_CASE("grep_backward matches finite differences") {
  auto ft = random_tensor<double>({1, 4, 8, 8}, 5);
  auto fb = random_tensor<double>({1, 4, 8, 8}, 6);
  auto info = random_tensor<double>({1, 4, 8, 8}, 7, 0.0, 1.0);
  const auto w = random_tensor<double>({1, 4, 8, 8}, 8);
  const auto g = grep_backward(ft, fb, info, w);
  auto loss = [&] { return weighted_sum(grep_combine(ft, fb, info), w); };
  CHECK(grad_check(ft, g.f_tilde, loss) < 1e-3);
  CHECK(grad_check(fb, g.f_bar, loss) < 1e-3);
  CHECK(grad_check(info, g.info, loss) < 1e-3);
}

TEST_CASE("reflect pad and its adjoint") {
  nn::Tensor<double> x({1, 1, 1, 3});
  x.storage() = {1, 2, 3};
  const auto p = reflect_pad(x, 1, 8);
  // mirror periodization: 1 2 3 2 | 1 2 3 2
  CHECK(p.storage() == nn::Tensor<double>::Storage{1, 2, 3, 2, 1, 2, 3, 2});

  const auto a = random_tensor<double>({2, 3, 5, 7}, 9);
  const auto g = random_tensor<double>({2, 3, 32, 32}, 10);
  const auto pa = reflect_pad(a, 32, 32);
  const auto ag = reflect_pad_backward(g, a.shape());
  CHECK(weighted_sum(pa, g) == doctest::Approx(weighted_sum(a, ag)).epsilon(1e-12));
  CHECK(reflect_pad(a, 5, 7).storage() == a.storage());
}

TEST_CASE("InfoNet") {
  nn::Rng rng(11);
  InfoNet<double> net(10, 4, rng);
  CHECK(net.hidden() == 3);

  SUBCASE("output shape and range") {
    const auto x = random_tensor<double>({2, 10, 49, 64}, 12, -5.0, 5.0);
    const auto y = net.forward(x, false);
    CHECK(y.shape() == x.shape());
    for (double v : y.flat()) {
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }
  SUBCASE("gradients on 4x8x8 inputs") {
    nn::Rng r2(12);
    InfoNet<double> small(4, 4, r2);
    auto x = random_tensor<double>({2, 4, 8, 8}, 13, 0.0, 1.0);
    const auto w = random_tensor<double>(x.shape(), 14);
    std::vector<nn::Parameter<double>*> params;
    small.parameters(params);
    nn::zero_grads(params);
    small.forward(x, true);
    const auto dx = small.backward(w);
    auto loss = [&] { return weighted_sum(small.forward(x, true), w); };
    CHECK(grad_check(x, dx, loss) < 1e-3);
    for (auto* p : params) {
      const auto g = p->grad;
      CHECK_MESSAGE(grad_check(p->value, g, loss) < 1e-3, p->name);
    }
  }
  SUBCASE("state names are prefixed") {
    std::vector<nn::StateEntry<double>> st;
    net.state(st, "info.");
    REQUIRE(!st.empty());
    for (const auto& e : st) CHECK(e.name.rfind("info.", 0) == 0);
  }
  SUBCASE("wrong channel count") {
    CHECK_THROWS(net.forward(random_tensor<double>({1, 9, 8, 8}, 1), false));
  }
}

TEST_CASE("Lafs") {
  nn::Rng rng(21);
  Lafs<double> net(4, rng);

  SUBCASE("any frame count maps back to the input shape with values in (0, 1)") {
    for (auto [t, d] : {std::pair{49, 64}, {8, 8}, {33, 64}, {1, 5}}) {
      const auto x = random_tensor<double>({1, 4, t, d}, 22, 0.0, 1.0);
      const auto y = net.forward(x, false);
      CHECK(y.shape() == x.shape());
      for (double v : y.flat()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      }
    }
  }
  SUBCASE("gradients on 4x8x8 inputs") {
    auto x = random_tensor<double>({2, 4, 8, 8}, 23, 0.0, 1.0);
    const auto w = random_tensor<double>(x.shape(), 24);
    std::vector<nn::Parameter<double>*> params;
    net.parameters(params);
    nn::zero_grads(params);
    net.forward(x, true);
    const auto dx = net.backward(w);
    auto loss = [&] { return weighted_sum(net.forward(x, true), w); };
    CHECK(grad_check_sampled(x, dx, loss, 96) < 1e-3);
    for (auto* p : params) {
      const auto g = p->grad;
      CHECK_MESSAGE(grad_check_sampled(p->value, g, loss, 6) < 1e-3, p->name);
    }
  }
}

TEST_CASE("recover modes") {
  nn::Rng rng(31);
  InfoNet<double> info(4, 4, rng);
  Lafs<double> lafs(4, rng);
  const auto x = random_tensor<double>({1, 4, 10, 16}, 32, 0.0, 1.0);

  const auto full = recover(x, &info, &lafs, RecoveryMode::Full, false);
  CHECK(full.f_hat.storage() == grep_combine(x, full.f_bar, full.entropy.values).storage());

  const auto io = recover<double>(x, &info, nullptr, RecoveryMode::InfoOnly, false);
  CHECK(io.f_bar.empty());
  for (std::size_t k = 0; k < x.size(); ++k) CHECK(io.f_hat[k] == io.entropy.values[k] * x[k]);

  const auto lo = recover<double>(x, nullptr, &lafs, RecoveryMode::LafsOnly, false);
  CHECK(lo.entropy.values.empty());
  CHECK(lo.f_hat.storage() == lo.f_bar.storage());

  CHECK_THROWS(recover<double>(x, nullptr, &lafs, RecoveryMode::Full, false));
  CHECK(to_string(RecoveryMode::InfoOnly) == "info-only");
}

TEST_CASE("recovery_entropy_grad is the chain rule through GRep") {
  nn::Rng rng(41);
  InfoNet<double> info(4, 4, rng);
  Lafs<double> lafs(4, rng);
  const auto x = random_tensor<double>({1, 4, 8, 8}, 42, 0.0, 1.0);
  const auto w = random_tensor<double>(x.shape(), 43);
  const auto out = recover(x, &info, &lafs, RecoveryMode::Full, false);
  const auto g = recovery_entropy_grad(out, x, w, RecoveryMode::Full);
  const auto ref = grep_backward(x, out.f_bar, out.entropy.values, w);
  for (std::size_t k = 0; k < g.size(); ++k) CHECK(g[k] == doctest::Approx(ref.info[k]).epsilon(1e-12));
  CHECK_THROWS(recovery_entropy_grad(out, x, w, RecoveryMode::LafsOnly));
}

namespace {

/// Smooth field shared by every channel plus small per-channel noise, so a
/// missing channel is predictable from the others.
nn::Tensor<float> correlated_batch(int n, int c, int t, int d, nn::Rng& rng) {
  nn::Tensor<float> x({n, c, t, d});
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi), freq(0.1, 0.5);
  std::normal_distribution<double> noise(0.0, 0.02);
  for (int b = 0; b < n; ++b) {
    const double p1 = phase(rng), p2 = phase(rng), f1 = freq(rng), f2 = freq(rng);
    for (int i = 0; i < t; ++i) {
      for (int j = 0; j < d; ++j) {
        const double base = 0.5 + 0.2 * std::sin(f1 * i + p1) + 0.2 * std::cos(f2 * j + p2);
        for (int ch = 0; ch < c; ++ch) x[((b * c + ch) * t + i) * d + j] = static_cast<float>(base + noise(rng));
      }
    }
  }
  return x;
}

/// Overwrites one channel over a random frame range with uniform noise;
/// returns the element mask (1 = corrupted).
nn::Tensor<float> corrupt_batch(nn::Tensor<float>& x, nn::Rng& rng) {
  const int n = x.dim(0), c = x.dim(1), t = x.dim(2), d = x.dim(3);
  nn::Tensor<float> mask(x.shape(), 0.0f);
  std::uniform_int_distribution<int> pick_c(0, c - 1), pick_t(0, t - 4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int b = 0; b < n; ++b) {
    const int ch = pick_c(rng), t0 = pick_t(rng);
    for (int i = t0; i < t0 + t / 2 && i < t; ++i) {
      for (int j = 0; j < d; ++j) {
        const std::size_t k = (static_cast<std::size_t>(b * c + ch) * t + i) * d + j;
        x[k] = static_cast<float>(u(rng));
        mask[k] = 1.0f;
      }
    }
  }
  return mask;
}

}  // namespace

TEST_CASE("trained LaFS reconstructs masked regions better than the global mean") {
  nn::Rng rng(51);
  Lafs<float> net(4, rng);
  std::vector<nn::Parameter<float>*> params;
  net.parameters(params);
  nn::Adam<float> opt(params, {});

  nn::Rng data_rng(52);
  auto held_clean = correlated_batch(16, 4, 16, 16, data_rng);
  auto held = held_clean;
  const auto held_mask = corrupt_batch(held, data_rng);
  const auto masked_mse = [&](const nn::Tensor<float>& pred) {
    double s = 0.0;
    long n = 0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
      if (held_mask[k] == 0.0f) continue;
      s += (pred[k] - held_clean[k]) * (pred[k] - held_clean[k]);
      ++n;
    }
    return s / n;
  };
  const double before = nn::mse_loss<float>(net.forward(held, false), held_clean, nullptr);

  double mean_sum = 0.0;
  long mean_n = 0;
  for (int step = 0; step < 300; ++step) {
    const auto clean = correlated_batch(8, 4, 16, 16, data_rng);
    for (float v : clean.flat()) mean_sum += v;
    mean_n += static_cast<long>(clean.size());
    auto x = clean;
    corrupt_batch(x, data_rng);
    opt.zero_grad();
    const auto y = net.forward(x, true);
    nn::Tensor<float> g;
    nn::mse_loss<float>(y, clean, &g);
    net.backward(g);
    opt.step();
  }
  const auto pred = net.forward(held, false);
  const double after = nn::mse_loss<float>(pred, held_clean, nullptr);
  const nn::Tensor<float> global(held.shape(), static_cast<float>(mean_sum / mean_n));
  MESSAGE("masked MSE " << masked_mse(pred) << " vs global mean " << masked_mse(global) << ", L_DCI " << before
                        << " -> " << after);
  CHECK(masked_mse(pred) < masked_mse(global));
  CHECK(after <= 0.5 * before);
}

TEST_CASE("downstream loss reaches InfoNet parameters") {
  nn::Rng rng(61);
  InfoNet<double> info(4, 4, rng);
  Lafs<double> lafs(4, rng);
  const auto x = random_tensor<double>({2, 4, 8, 8}, 62, 0.0, 1.0);
  const auto w = random_tensor<double>(x.shape(), 63);
  std::vector<nn::Parameter<double>*> params;
  info.parameters(params);
  nn::zero_grads(params);
  const auto out = recover(x, &info, &lafs, RecoveryMode::Full, true);
  info.backward(recovery_entropy_grad(out, x, w, RecoveryMode::Full));
  // biases feeding batch norm have an exact zero gradient, so check the set
  double norm = 0.0;
  for (auto* p : params) {
    for (double v : p->grad.flat()) norm += v * v;
  }
  CHECK(std::sqrt(norm) > 1e-3);
}

TEST_CASE("a change confined to one region moves the entropy map mostly inside it") {
  nn::Rng rng(71);
  InfoNet<double> info(4, 4, rng);
  const auto x = random_tensor<double>({2, 4, 16, 16}, 72, 0.0, 1.0);
  auto y = x;
  nn::Rng noise(73);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto inside = [](int t, int d) { return t >= 4 && t < 8 && d >= 4 && d < 12; };
  for (int b = 0; b < 2; ++b) {
    for (int ch = 0; ch < 4; ++ch) {
      for (int t = 0; t < 16; ++t) {
        for (int d = 0; d < 16; ++d) {
          if (inside(t, d)) y[((b * 4 + ch) * 16 + t) * 16 + d] = u(noise);
        }
      }
    }
  }
  const auto ix = info.forward(x, false), iy = info.forward(y, false);
  double in_sum = 0.0, out_sum = 0.0;
  long in_n = 0, out_n = 0;
  for (int bc = 0; bc < 8; ++bc) {
    for (int t = 0; t < 16; ++t) {
      for (int d = 0; d < 16; ++d) {
        const std::size_t k = (static_cast<std::size_t>(bc) * 16 + t) * 16 + d;
        const double diff = std::abs(ix[k] - iy[k]);
        (inside(t, d) ? in_sum : out_sum) += diff;
        ++(inside(t, d) ? in_n : out_n);
      }
    }
  }
  CHECK(in_sum / in_n > out_sum / out_n);
}
