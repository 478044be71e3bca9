#include <doctest.h>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include "support.hpp"
#include "usplat/model.hpp"

using namespace usplat;
using usplat::testing::random_rotation;

namespace {

TriangularPrecision<double> L_of(std::array<double, 6> raw, double beta = kDefaultBeta) {
  return build_L<double>(std::span<const double, 6>(raw), beta);
}

// Diagonal raw ~ +-U[0.5, 5), off-diagonal ~ U(-5, 5).
std::array<double, 6> wide_raw(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.5, 5.0), o(-5.0, 5.0);
  std::bernoulli_distribution sign;
  std::array<double, 6> r{};
  for (int j = 0; j < 3; ++j) r[j] = (sign(rng) ? -1.0 : 1.0) * d(rng);
  for (int j = 3; j < 6; ++j) r[j] = o(rng);
  return r;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("build_L places raw entries and adds beta to the squared diagonal") {
    const Mat3d a = L_of({1, 1, 1, 0, 0, 0}).matrix();
    CHECK(a.isApprox(Mat3d::Identity() * 1.01, 1e-15));
    const Mat3d z = L_of({0, 0, 0, 0, 0, 0}).matrix();
    CHECK(z.isApprox(Mat3d::Identity() * 0.01, 1e-15));
    const Mat3d g = L_of({2, 3, 4, 5, 6, 7}).matrix();
    CHECK(g(0, 0) == doctest::Approx(4.01));
    CHECK(g(1, 1) == doctest::Approx(9.01));
    CHECK(g(2, 2) == doctest::Approx(16.01));
    CHECK(g(1, 0) == 5);
    CHECK(g(2, 0) == 6);
    CHECK(g(2, 1) == 7);
    CHECK(g(0, 1) == 0);
    CHECK(g(0, 2) == 0);
    CHECK(g(1, 2) == 0);
  }

  TEST_CASE("build_L rejects a non-positive beta") {
    const std::array<double, 6> r{1, 1, 1, 0, 0, 0};
    CHECK_THROWS_AS(build_L<double>(std::span<const double, 6>(r), 0.0), InvalidParameter);
    CHECK_THROWS_AS(build_L<double>(std::span<const double, 6>(r), -1.0), InvalidParameter);
  }

  TEST_CASE("raw 4 on the diagonal gives variance 1/16.01^2") {
    const Mat3d sigma = covariance_from_L(L_of({4, 4, 4, 0, 0, 0}));
    for (int j = 0; j < 3; ++j) CHECK(sigma(j, j) == doctest::Approx(1.0 / (16.01 * 16.01)).epsilon(1e-12));
    CHECK(sigma(0, 0) == doctest::Approx(3.90e-3).epsilon(1e-3));
    CHECK(sigma(0, 0) > 0.0017);
    CHECK(sigma(0, 0) < 0.0043);
  }

  TEST_CASE("raw_from_L inverts build_L") {
    std::mt19937_64 rng(3);
    for (int k = 0; k < 200; ++k) {
      std::array<double, 6> r = wide_raw(rng);
      for (int j = 0; j < 3; ++j) r[j] = std::abs(r[j]);
      const auto back = raw_from_L(L_of(r).matrix(), kDefaultBeta);
      for (int j = 0; j < 6; ++j) CHECK(back[j] == doctest::Approx(r[j]).epsilon(1e-12));
    }
    Mat3d bad = Mat3d::Identity() * 0.001;
    CHECK_THROWS_AS(raw_from_L(bad, kDefaultBeta), InvalidParameter);
  }

  TEST_CASE("invert_lower_triangular matches hand forward substitution") {
    Mat3d l;
    l << 2, 0, 0, 1, 2, 0, 0, 1, 2;
    Mat3d expect;
    expect << 0.5, 0, 0, -0.25, 0.5, 0, 0.125, -0.25, 0.5;
    CHECK((invert_lower_triangular(l) - expect).cwiseAbs().maxCoeff() == 0.0);
    CHECK(invert_lower_triangular(Mat3d(Mat3d::Identity())) == Mat3d::Identity());
    Mat3d singular = l;
    singular(1, 1) = 0;
    CHECK_THROWS_AS(invert_lower_triangular(singular), SingularMatrix);
  }

  TEST_CASE("property: L L^-1 = I within 1e-12 and the inverse stays lower triangular") {
    std::mt19937_64 rng(11);
    double worst = 0;
    for (int k = 0; k < 10000; ++k) {
      const Mat3d l = L_of(wide_raw(rng)).matrix();
      const Mat3d inv = invert_lower_triangular(l);
      worst = std::max(worst, (l * inv - Mat3d::Identity()).cwiseAbs().maxCoeff());
      CHECK(inv(0, 1) == 0);
      CHECK(inv(0, 2) == 0);
      CHECK(inv(1, 2) == 0);
    }
    CHECK(worst <= 1e-12);
  }

  TEST_CASE("property: precision is PD and det(L) >= beta^3 for any raw input") {
    std::mt19937_64 rng(12);
    std::normal_distribution<double> n(0.0, 3.0);
    for (int k = 0; k < 10000; ++k) {
      std::array<double, 6> r{};
      for (double& x : r) x = n(rng);
      if (k % 10 == 0) r[k % 3] = 0.0;
      const auto l = L_of(r);
      Eigen::LLT<Mat3d> llt(l.precision());
      REQUIRE(llt.info() == Eigen::Success);
      CHECK(l.determinant() >= std::pow(kDefaultBeta, 3));
    }
  }

  TEST_CASE("covariance_from_L matches closed forms and a general inverse") {
    CHECK(covariance_from_L(TriangularPrecision<double>(Mat3d::Identity() * 2)).isApprox(Mat3d::Identity() * 0.25));
    CHECK(covariance_from_L(TriangularPrecision<double>(Mat3d::Identity())) == Mat3d::Identity());
    std::mt19937_64 rng(13);
    for (int k = 0; k < 1000; ++k) {
      const auto l = L_of(usplat::testing::random_raw(rng, 0.5, 2.0, 1.0));
      const Mat3d sigma = covariance_from_L(l);
      const Mat3d oracle = l.precision().inverse();
      CHECK((sigma - oracle).cwiseAbs().maxCoeff() <= 1e-9);
      CHECK((sigma * l.precision() - Mat3d::Identity()).cwiseAbs().maxCoeff() <= 1e-9);
      CHECK((sigma - sigma.transpose()).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }

  TEST_CASE("sample_gaussian is affine in z") {
    const Vec3d mu(1, -2, 3);
    const auto l = L_of({1, 2, 3, 0.5, -0.5, 0.25});
    CHECK(sample_gaussian(mu, l, Vec3d::Zero().eval()) == mu);
    const TriangularPrecision<double> two(Mat3d::Identity() * 2);
    CHECK(sample_gaussian(Vec3d::Zero().eval(), two, Vec3d(1, 0, 0)).isApprox(Vec3d(0.5, 0, 0)));
    CHECK(sample_gaussian(Vec3d::Zero().eval(), two, Vec3d(1, 0, 0), 4.0).isApprox(Vec3d(2, 0, 0)));
  }

  TEST_CASE("property: sample covariance converges to covariance_from_L") {
    std::mt19937_64 rng(21);
    std::normal_distribution<double> n(0.0, 1.0);
    for (int trial = 0; trial < 3; ++trial) {
      const auto l = L_of(usplat::testing::random_raw(rng, 0.6, 1.5, 0.6));
      const Mat3d sigma = covariance_from_L(l);
      const int draws = 100000;
      Vec3d sum = Vec3d::Zero();
      Mat3d outer = Mat3d::Zero();
      for (int k = 0; k < draws; ++k) {
        const Vec3d x = sample_gaussian(Vec3d::Zero().eval(), l, Vec3d(n(rng), n(rng), n(rng)));
        sum += x;
        outer += x * x.transpose();
      }
      const Vec3d mean = sum / draws;
      const Mat3d cov = outer / draws - mean * mean.transpose();
      // Relative to the diagonal scale so near-zero off-diagonals do not dominate.
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
          CHECK(std::abs(cov(r, c) - sigma(r, c)) <= 0.05 * std::sqrt(sigma(r, r) * sigma(c, c)));
    }
  }

  TEST_CASE("to_probe_frame: identity and pure translation") {
    const auto l = L_of({1, 2, 3, 0.5, -0.5, 0.25});
    const Vec3d mu(1, 2, 3);
    const auto g = to_probe_frame(mu, l, ProbePose::identity());
    CHECK(g.mean_probe.isApprox(mu));
    CHECK(g.precision_probe.isApprox(l.precision()));
    const auto t = to_probe_frame(mu, l, ProbePose::translation_only(Vec3d(0.5, -1, 2)));
    CHECK(t.mean_probe.isApprox(Vec3d(0.5, 3, 1)));
    CHECK(t.precision_probe.isApprox(l.precision()));
  }

  TEST_CASE("property: rotation preserves the precision spectrum") {
    std::mt19937_64 rng(31);
    for (int k = 0; k < 1000; ++k) {
      const auto l = L_of(wide_raw(rng));
      const ProbePose pose(random_rotation(rng), Vec3d(1, 2, 3));
      const auto g = to_probe_frame(Vec3d(0.1, 0.2, 0.3).eval(), l, pose);
      const Vec3d e0 = Eigen::SelfAdjointEigenSolver<Mat3d>(l.precision()).eigenvalues();
      const Vec3d e1 = Eigen::SelfAdjointEigenSolver<Mat3d>(g.precision_probe).eigenvalues();
      CHECK((e0 - e1).cwiseAbs().maxCoeff() <= 1e-9 * std::max(1.0, e0.maxCoeff()));
    }
  }

  TEST_CASE("evaluate_opacity closed forms") {
    ProbeFrameGaussian<double> g;
    g.mean_probe = Vec3d(0.3, -0.2, 0.0);
    g.precision_probe = Mat3d::Identity() * 3.0;
    CHECK(evaluate_opacity(Vec2<double>(0.3, -0.2), g, 0.7) == 0.7);
    g.mean_probe = Vec3d::Zero();
    g.precision_probe = Mat3d::Identity();
    CHECK(evaluate_opacity(Vec2<double>(1, 0), g, 0.8) == doctest::Approx(0.8 * std::exp(-0.5)).epsilon(1e-15));
    CHECK(evaluate_opacity(Vec2<double>(1, 0), g, 0.8) == doctest::Approx(0.48522).epsilon(1e-5));
    g.mean_probe = Vec3d(0, 0, 10);
    CHECK(evaluate_opacity(Vec2<double>(0, 0), g, 0.8) <= 0.8 * std::exp(-50.0));
  }

  TEST_CASE("property: opacity is bounded by alpha and decreasing in Mahalanobis distance") {
    std::mt19937_64 rng(41);
    for (int k = 0; k < 200; ++k) {
      const auto l = L_of(usplat::testing::random_raw(rng));
      const auto g = to_probe_frame(Vec3d(0, 0, 0.2).eval(), l, ProbePose(random_rotation(rng), Vec3d::Zero()));
      const Vec2<double> dir(std::cos(k), std::sin(k));
      // The in-plane maximum sits at the conditional mean, not the projected mean.
      const Eigen::Matrix2d pxy = g.precision_probe.topLeftCorner<2, 2>();
      const Vec2<double> peak =
          Vec2<double>(g.mean_probe[0], g.mean_probe[1]) +
          pxy.inverse() * g.precision_probe.topRightCorner<2, 1>() * g.mean_probe[2];
      double prev = evaluate_opacity(peak, g, 0.6);
      CHECK(prev <= 0.6);
      for (int s = 1; s < 20; ++s) {
        const Vec2<double> x = peak + 0.1 * s * dir;
        const double a = evaluate_opacity(x, g, 0.6);
        CHECK(a <= prev);
        prev = a;
      }
    }
  }

  TEST_CASE("cloud validation and activations") {
    GaussianCloud c;
    const std::array<float, 6> r{1, 1, 1, 0, 0, 0};
    c.push_back(Vec3<float>(0, 0, 0), std::span<const float, 6>(r), 0.f, 1.f);
    CHECK_NOTHROW(c.validate());
    CHECK(c.alpha(0) == doctest::Approx(0.731).epsilon(5e-4));
    CHECK(c.color(0) == 0.5f);
    CHECK(c.bg_alpha() == doctest::Approx(0.018).epsilon(0.01));
    c.means[1] = std::nanf("");
    CHECK_THROWS_AS(c.validate(), InvalidParameter);
    c.means[1] = 0.f;
    c.opacity_raw.push_back(0.f);
    CHECK_THROWS_AS(c.validate(), InvalidParameter);
  }
}
