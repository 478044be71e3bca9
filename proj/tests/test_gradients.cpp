#include <doctest.h>

#include "support.hpp"
#include "usplat/gradients.hpp"

using namespace usplat;
using namespace usplat::testing;

namespace {

RenderOptions sequential(double p = 0.9999) {
  RenderOptions o;
  o.execution = Execution::Sequential;
  o.p_mass = p;
  return o;
}

template <typename F>
void for_each_grad(const ParamGradients<double>& g, F&& f) {
  for (double v : g.d_means) f(v);
  for (double v : g.d_l_raw) f(v);
  for (double v : g.d_intensity_raw) f(v);
  for (double v : g.d_opacity_raw) f(v);
  f(g.d_bg_intensity_raw);
  f(g.d_bg_opacity_raw);
}

}  // namespace

TEST_SUITE("gradients") {
  TEST_CASE("zero upstream gradient gives exactly zero") {
    const auto c = random_scene(1, {.n = 10});
    const SliceSpec s{16, 16, 0.5, {}};
    const auto buf = rasterize(c, s, sequential());
    const std::vector<double> zero(256, 0.0);
    const auto g = backward(c, s, buf, std::span<const double>(zero), sequential());
    CHECK(g.size() == c.size());
    for_each_grad(g, [](double v) { CHECK(v == 0.0); });
  }

  TEST_CASE("background-only cloud: intensity gradient is the sum times the sigmoid slope") {
    GaussianCloudD c;
    c.bg_intensity_raw = 0.7;
    const SliceSpec s{8, 6, 1.0, {}};
    const auto buf = rasterize(c, s, sequential());
    std::vector<double> d(48);
    double sum = 0;
    for (std::size_t i = 0; i < d.size(); ++i) sum += d[i] = 0.01 * double(i) - 0.2;
    const auto g = backward(c, s, buf, std::span<const double>(d), sequential());
    CHECK(g.d_bg_intensity_raw == doctest::Approx(sum * sigmoid_grad_from_value(sigmoid(0.7))).epsilon(1e-12));
    CHECK(std::abs(g.d_bg_opacity_raw) <= 1e-15);
  }

  TEST_CASE("single Gaussian, single pixel: central differences with h = 1e-5") {
    GaussianCloudD c;
    const std::array<double, 6> r{1.1, 0.9, 1.2, 0.2, -0.1, 0.3};
    c.push_back(Vec3<double>(0.2, -0.1, 0.3), std::span<const double, 6>(r), 0.4, 0.6);
    c.bg_intensity_raw = -0.5;
    c.bg_opacity_raw = -1.5;
    const SliceSpec s{1, 1, 1.0, ProbePose::from_euler_zyx_deg(10, 20, 30, Vec3d(0.05, 0.02, -0.01))};
    GradCheckOptions o;
    o.h = 1e-5;
    o.stencil = 2;
    const auto rep = grad_check(c, s, o);
    CHECK(rep.checked > 0);
    CHECK(rep.means <= 1e-5);
    CHECK(rep.l_raw <= 1e-5);
    CHECK(rep.intensity <= 1e-5);
    CHECK(rep.opacity <= 1e-5);
    CHECK(rep.background <= 1e-5);
  }

  TEST_CASE("ten random Gaussians on a 16x16 slice") {
    const auto c = random_scene(3, {.n = 10});
    const SliceSpec s{16, 16, 0.5, ProbePose::from_euler_zyx_deg(5, -15, 25, Vec3d(0.1, 0.2, 0.1))};
    GradCheckOptions two;
    two.h = 1e-5;
    const auto rep = grad_check(c, s, two);
    CHECK(rep.worst() <= 1e-5);
    GradCheckOptions four;
    four.h = 1e-3;
    four.stencil = 4;
    CHECK(grad_check(c, s, four).worst() <= 1e-5);
    CHECK(grad_check(c, s, two) == rep);
  }

  TEST_CASE("truncation sensitivity against an untruncated numeric side") {
    const auto c = random_scene(4, {.n = 10});
    const SliceSpec s{16, 16, 0.5, ProbePose::from_euler_zyx_deg(5, -15, 25, Vec3d(0.1, 0.2, 0.1))};
    GradCheckOptions o;
    o.h = 1e-3;
    o.stencil = 4;
    o.untruncated_numeric = true;
    // The error tracks the discarded mass 1 - p. Culled Gaussians have no analytic gradient,
    // so per-parameter relative error is meaningless: compare against the gradient scale.
    auto scaled = [&](double p) {
      o.p_mass = p;
      const auto r = grad_check(c, s, o);
      return r.max_abs_diff / r.max_abs_numeric;
    };
    const double loose = scaled(0.95), tight = scaled(0.9999);
    MESSAGE("scaled truncation error: p=0.95 ", loose, ", p=0.9999 ", tight);
    CHECK(loose <= 0.1);
    CHECK(tight <= 1e-3);
    CHECK(tight < loose);
  }

  TEST_CASE("property: backward is linear in the upstream gradient") {
    const auto c = random_scene(5, {.n = 20});
    const SliceSpec s{16, 16, 0.5, {}};
    const auto buf = rasterize(c, s, sequential(0.95));
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-1, 1);
    std::vector<double> d1(256), d2(256), d12(256);
    for (int i = 0; i < 256; ++i) {
      d1[i] = u(rng);
      d2[i] = u(rng);
      d12[i] = d1[i] + d2[i];
    }
    const auto g1 = backward(c, s, buf, std::span<const double>(d1), sequential(0.95));
    const auto g2 = backward(c, s, buf, std::span<const double>(d2), sequential(0.95));
    const auto g12 = backward(c, s, buf, std::span<const double>(d12), sequential(0.95));
    std::vector<double> a, b, ab;
    for_each_grad(g1, [&](double v) { a.push_back(v); });
    for_each_grad(g2, [&](double v) { b.push_back(v); });
    for_each_grad(g12, [&](double v) { ab.push_back(v); });
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(ab[i] - a[i] - b[i]) <= 1e-9);
  }

  TEST_CASE("property: Gaussians off the slice get zero gradient") {
    auto c = random_scene(6, {.n = 20});
    for (std::size_t i = 10; i < 20; ++i) c.means[3 * i + 2] = 50.0;  // far above the plane
    const SliceSpec s{16, 16, 0.5, {}};
    const auto buf = rasterize(c, s, sequential(0.95));
    std::vector<double> d(256, 1.0);
    const auto g = backward(c, s, buf, std::span<const double>(d), sequential(0.95));
    for (std::size_t i = 10; i < 20; ++i) {
      for (int k = 0; k < 3; ++k) CHECK(g.d_means[3 * i + k] == 0.0);
      for (int k = 0; k < 6; ++k) CHECK(g.d_l_raw[6 * i + k] == 0.0);
      CHECK(g.d_intensity_raw[i] == 0.0);
      CHECK(g.d_opacity_raw[i] == 0.0);
    }
  }

  TEST_CASE("parallel backward matches sequential, float path matches double") {
    const auto c = random_scene(7, {.n = 80, .lateral = 5.0});
    const SliceSpec s{32, 28, 0.35, ProbePose::from_euler_zyx_deg(3, 4, 5, Vec3d::Zero())};
    std::vector<double> d(32 * 28);
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::sin(0.1 * double(i));
    RenderOptions par = sequential(0.95);
    par.execution = Execution::Parallel;
    par.threads = 3;
    const auto buf = rasterize(c, s, sequential(0.95));
    const auto gs = backward(c, s, buf, std::span<const double>(d), sequential(0.95));
    const auto gp = backward(c, s, buf, std::span<const double>(d), par);
    std::vector<double> a, b;
    for_each_grad(gs, [&](double v) { a.push_back(v); });
    for_each_grad(gp, [&](double v) { b.push_back(v); });
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(a[i]).epsilon(1e-9).scale(1e-9));

    const auto cf = c.cast<float>();
    RenderOptions fo = sequential(0.95);
    const auto bf = rasterize(cf, s, fo);
    const std::vector<float> df(d.begin(), d.end());
    const auto gf = backward(cf, s, bf, std::span<const float>(df), fo);
    double scale = 0;
    for (double v : gs.d_means) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < gs.d_means.size(); ++i) CHECK(std::abs(gf.d_means[i] - gs.d_means[i]) <= 1e-3 * scale);
  }

  TEST_CASE("backward rejects buffers from a different cloud") {
    const auto c = random_scene(8, {.n = 10});
    const SliceSpec s{8, 8, 0.5, {}};
    const auto buf = rasterize(c, s, sequential());
    const auto other = random_scene(9, {.n = 12});
    std::vector<double> d(64, 1.0);
    CHECK_THROWS_AS(backward(other, s, buf, std::span<const double>(d), sequential()), ContractViolation);
    std::vector<double> short_d(10, 1.0);
    CHECK_THROWS_AS(backward(c, s, buf, std::span<const double>(short_d), sequential()), ContractViolation);
  }
}
