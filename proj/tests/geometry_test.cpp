#include <random>

#include <unsupported/Eigen/MatrixFunctions>

#include "doctest.h"
#include "kslam/camera.h"
#include "kslam/reprojection.h"
#include "kslam/se3.h"
#include "kslam/triangulation.h"
#include "oracle.h"

using namespace kslam;
using testing::fd_point_jacobian;
using testing::fd_pose_jacobian;
using testing::random_unit;
using testing::twist_hat;

namespace {

const Intrinsics kKitti{718.856, 718.856, 607.1928, 185.2157, 0.54};

Twist random_twist(std::mt19937_64& rng, double max_angle, double max_trans) {
  std::uniform_real_distribution<double> ua(1e-3, max_angle);
  std::uniform_real_distribution<double> ut(0.0, max_trans);
  Twist xi;
  xi.rotational = random_unit(rng) * ua(rng);
  xi.translational = random_unit(rng) * ut(rng);
  return xi;
}

}  // namespace

TEST_CASE("skew matrix reproduces the cross product") {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 20; ++i) {
    const Eigen::Vector3d v = random_unit(rng) * 3.0;
    const Eigen::Vector3d w = random_unit(rng) * 2.0;
    CHECK((skew(v) * w - v.cross(w)).norm() == doctest::Approx(0.0).epsilon(1e-15));
    CHECK((skew(v) + skew(v).transpose()).norm() == doctest::Approx(0.0));
  }
}

TEST_CASE("se3_exp of the zero twist is the identity") {
  const Pose p = se3_exp(Twist{});
  CHECK((p.rotation() - Eigen::Matrix3d::Identity()).norm() == 0.0);
  CHECK(p.translation().norm() == 0.0);
}

TEST_CASE("se3_exp matches the matrix exponential oracle") {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 100; ++i) {
    const Twist xi = random_twist(rng, 3.1, 5.0);
    const Pose p = se3_exp(xi);
    const Eigen::Matrix4d ref = twist_hat(xi).exp();
    CHECK((p.rotation() - ref.topLeftCorner<3, 3>()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((p.translation() - ref.topRightCorner<3, 1>()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(p.is_valid());
  }
}

TEST_CASE("se3_exp small-angle branch matches the oracle") {
  for (double angle : {1e-12, 1e-9, 5e-8}) {
    Twist xi;
    xi.rotational = Eigen::Vector3d(1, -2, 0.5).normalized() * angle;
    xi.translational = Eigen::Vector3d(0.3, 0.1, -0.2);
    const Pose p = se3_exp(xi);
    const Eigen::Matrix4d ref = twist_hat(xi).exp();
    CHECK((p.rotation() - ref.topLeftCorner<3, 3>()).cwiseAbs().maxCoeff() < 1e-14);
    CHECK((p.translation() - ref.topRightCorner<3, 1>()).cwiseAbs().maxCoeff() < 1e-14);
  }
}

TEST_CASE("se3_log inverts se3_exp") {
  std::mt19937_64 rng(13);
  for (int i = 0; i < 100; ++i) {
    const Twist xi = random_twist(rng, M_PI - 0.05, 4.0);
    const Twist back = se3_log(se3_exp(xi));
    CHECK((back.stacked() - xi.stacked()).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("exp-log roundtrip near the pi singularity") {
  std::mt19937_64 rng(17);
  for (double gap : {1e-3, 1e-5, 1e-7}) {
    for (int i = 0; i < 10; ++i) {
      Twist xi;
      xi.rotational = random_unit(rng) * (M_PI - gap);
      xi.translational = random_unit(rng) * 2.0;
      const Pose p = se3_exp(xi);
      const Pose q = se3_exp(se3_log(p));
      CHECK((p.rotation() - q.rotation()).cwiseAbs().maxCoeff() < 1e-6);
      CHECK((p.translation() - q.translation()).cwiseAbs().maxCoeff() < 1e-5);
    }
  }
}

TEST_CASE("se3_log throws exactly at pi") {
  // R = diag(1, -1, -1) is a rotation by pi about x.
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  r(1, 1) = -1.0;
  r(2, 2) = -1.0;
  CHECK_THROWS_AS(se3_log(Pose(r, Eigen::Vector3d(0.1, 0.2, 0.3))), std::domain_error);
}

TEST_CASE("rotation_angle matches the angle-axis oracle") {
  std::mt19937_64 rng(19);
  for (int i = 0; i < 50; ++i) {
    std::uniform_real_distribution<double> ua(0.0, M_PI);
    const double angle = ua(rng);
    const Eigen::Matrix3d r = Eigen::AngleAxisd(angle, random_unit(rng)).toRotationMatrix();
    CHECK(rotation_angle(r) == doctest::Approx(angle).epsilon(1e-9));
  }
}

TEST_CASE("pose composition, inverse and point action are consistent") {
  std::mt19937_64 rng(23);
  for (int i = 0; i < 20; ++i) {
    const Pose p = se3_exp(random_twist(rng, 2.5, 3.0));
    const Pose q = se3_exp(random_twist(rng, 2.5, 3.0));
    const Eigen::Vector3d x = random_unit(rng) * 4.0;
    CHECK(((p * q) * x - p * (q * x)).norm() < 1e-12);
    const Pose id = p * p.inverse();
    CHECK((id.rotation() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(id.translation().norm() < 1e-12);
    CHECK(p.is_valid());
  }
  Eigen::Matrix3d bad = Eigen::Matrix3d::Identity();
  bad(0, 1) = 1e-3;
  CHECK(!Pose(bad, Eigen::Vector3d::Zero()).is_valid());
  CHECK(Pose(bad, Eigen::Vector3d::Zero()).rotation_defect() > 1e-4);
}

TEST_CASE("pose distance helpers") {
  const Pose a;
  const Pose b = se3_exp(Twist{Eigen::Vector3d(0.2, 0, 0), Eigen::Vector3d(3, 4, 0)});
  CHECK(a.rotation_angle_to(b) == doctest::Approx(0.2).epsilon(1e-12));
  CHECK(a.translation_distance_to(b) == doctest::Approx(b.translation().norm()));
}

TEST_CASE("octave noise variance follows the pyramid scale") {
  CHECK(octave_sigma2(0) == doctest::Approx(1.0));
  CHECK(octave_sigma2(3) == doctest::Approx(std::pow(1.2, 6.0)));
}

TEST_CASE("projection and back-projection invert each other") {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<double> ud(0.5, 40.0);
  for (int i = 0; i < 50; ++i) {
    Eigen::Vector3d xc = random_unit(rng);
    xc.z() = std::abs(xc.z()) + 0.1;
    xc *= ud(rng) / xc.z();

    const Eigen::Vector2d px = project_mono(xc, kKitti);
    CHECK((back_project(px.x(), px.y(), xc.z(), kKitti) - xc).norm() < 1e-9);

    const Eigen::Vector3d uvr = project_stereo(xc, kKitti);
    CHECK(uvr.x() == doctest::Approx(px.x()));
    CHECK(uvr.y() == doctest::Approx(px.y()));
    // The right coordinate agrees with the synthetic formula uR = uL - fx*b/d.
    CHECK(uvr.z() == doctest::Approx(synth_right_coord(uvr.x(), xc.z(), kKitti)).epsilon(1e-12));

    StereoKeypoint kp{uvr.x(), uvr.y(), uvr.z(), 0};
    CHECK(stereo_depth(kp, kKitti) == doctest::Approx(xc.z()).epsilon(1e-12));
    CHECK((back_project_stereo(kp, kKitti) - xc).norm() < 1e-9);
  }
}

TEST_CASE("projection rejects points behind the camera") {
  CHECK_THROWS_AS(project_mono({0, 0, -1}, kKitti), std::domain_error);
  CHECK_THROWS_AS(project_mono({0, 0, 0}, kKitti), std::domain_error);
  CHECK_THROWS_AS(project_stereo({0, 0, -0.5}, kKitti), std::domain_error);
  CHECK_THROWS_AS(synth_right_coord(100.0, 0.0, kKitti), std::domain_error);
  CHECK_THROWS_AS(synth_right_coord(100.0, -2.0, kKitti), std::domain_error);
  CHECK_THROWS_AS(back_project(10, 10, -1.0, kKitti), std::domain_error);
  CHECK_THROWS_AS(stereo_depth(StereoKeypoint{50, 50, 50, 0}, kKitti), std::domain_error);
}

TEST_CASE("intrinsics validation") {
  CHECK_THROWS_AS(Intrinsics{}.validate(), std::invalid_argument);
  CHECK_NOTHROW(kKitti.validate());
}

TEST_CASE("reprojection residual vanishes at the exact projection") {
  const Pose T_cw = se3_exp(Twist{Eigen::Vector3d(0.1, -0.2, 0.05), Eigen::Vector3d(0.4, 0, 1)});
  const Eigen::Vector3d Xw(1.0, -0.5, 6.0);
  const Eigen::Vector3d xc = T_cw * Xw;

  const Eigen::Vector2d px = project_mono(xc, kKitti);
  const MonoKeypoint mk{px.x(), px.y(), 2};
  CHECK(mono_residual(T_cw, Xw, mk, kKitti).residual.norm() < 1e-12);
  CHECK(reproj_chi2(T_cw, Xw, mk, kKitti) < 1e-20);

  const Eigen::Vector3d uvr = project_stereo(xc, kKitti);
  const StereoKeypoint sk{uvr.x(), uvr.y(), uvr.z(), 1};
  CHECK(stereo_residual(T_cw, Xw, sk, kKitti).residual.norm() < 1e-12);
  CHECK(reproj_chi2(T_cw, Xw, sk, kKitti) < 1e-20);
}

TEST_CASE("residual whitening scales with the keypoint octave") {
  const Pose T_cw;
  const Eigen::Vector3d Xw(0.3, -0.2, 8.0);
  const MonoKeypoint base{600.0, 200.0, 0};
  const MonoKeypoint high{600.0, 200.0, 3};
  const auto r0 = mono_residual(T_cw, Xw, base, kKitti);
  const auto r3 = mono_residual(T_cw, Xw, high, kKitti);
  const double scale = std::pow(kPyramidScale, 3.0);
  CHECK((r0.residual / scale - r3.residual).norm() < 1e-12);
  CHECK(reproj_chi2(T_cw, Xw, Keypoint{high}, kKitti) ==
        doctest::Approx(reproj_chi2(T_cw, Xw, Keypoint{base}, kKitti) / (scale * scale)));
}

TEST_CASE("reproj_chi2 is infinite behind the camera") {
  const Pose T_cw;
  CHECK(std::isinf(reproj_chi2(T_cw, {0, 0, -3.0}, MonoKeypoint{10, 10, 0}, kKitti)));
}

TEST_CASE("analytic reprojection Jacobians match central differences") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> ud(2.0, 30.0);
  std::uniform_int_distribution<int> uo(0, 5);
  for (int i = 0; i < 40; ++i) {
    const Pose T_cw = se3_exp(random_twist(rng, 1.0, 2.0));
    Eigen::Vector3d Xw;
    do {
      Xw = T_cw.inverse() * Eigen::Vector3d(random_unit(rng).x() * 3.0,
                                            random_unit(rng).y() * 2.0, ud(rng));
    } while ((T_cw * Xw).z() < 1.0);
    const int octave = uo(rng);

    // Measurements offset from the projection so the residual is nonzero.
    const Eigen::Vector3d uvr = project_stereo(T_cw * Xw, kKitti);
    const MonoKeypoint mk{uvr.x() + 1.5, uvr.y() - 2.0, octave};
    const StereoKeypoint sk{uvr.x() + 1.5, uvr.y() - 2.0, uvr.z() + 0.7, octave};

    const auto rm = mono_residual(T_cw, Xw, mk, kKitti);
    const auto fd_pose_m = fd_pose_jacobian(
        [&](const Pose& T) -> Eigen::VectorXd { return mono_residual(T, Xw, mk, kKitti).residual; },
        T_cw, 2);
    const auto fd_point_m = fd_point_jacobian(
        [&](const Eigen::Vector3d& X) -> Eigen::VectorXd {
          return mono_residual(T_cw, X, mk, kKitti).residual;
        },
        Xw, 2);
    CHECK((rm.d_pose - fd_pose_m).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((rm.d_point - fd_point_m).cwiseAbs().maxCoeff() < 1e-5);

    const auto rs = stereo_residual(T_cw, Xw, sk, kKitti);
    const auto fd_pose_s = fd_pose_jacobian(
        [&](const Pose& T) -> Eigen::VectorXd {
          return stereo_residual(T, Xw, sk, kKitti).residual;
        },
        T_cw, 3);
    const auto fd_point_s = fd_point_jacobian(
        [&](const Eigen::Vector3d& X) -> Eigen::VectorXd {
          return stereo_residual(T_cw, X, sk, kKitti).residual;
        },
        Xw, 3);
    CHECK((rs.d_pose - fd_pose_s).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((rs.d_point - fd_point_s).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("triangulation recovers an exact point from two views") {
  const Pose T_wc_a;  // origin
  const Pose T_wc_b(Eigen::Matrix3d::Identity(), Eigen::Vector3d(1.0, 0, 0));
  const Eigen::Vector3d Xw(0.4, -0.3, 6.0);

  const Eigen::Vector3d uvr_a = project_stereo(T_wc_a.inverse() * Xw, kKitti);
  const Eigen::Vector3d uvr_b = project_stereo(T_wc_b.inverse() * Xw, kKitti);

  SUBCASE("stereo-stereo") {
    const auto X = triangulate(StereoKeypoint{uvr_a.x(), uvr_a.y(), uvr_a.z(), 0}, T_wc_a,
                               StereoKeypoint{uvr_b.x(), uvr_b.y(), uvr_b.z(), 0}, T_wc_b, kKitti);
    REQUIRE(X.has_value());
    CHECK((*X - Xw).norm() < 1e-8);
  }
  SUBCASE("mono-mono") {
    const auto X = triangulate(MonoKeypoint{uvr_a.x(), uvr_a.y(), 0}, T_wc_a,
                               MonoKeypoint{uvr_b.x(), uvr_b.y(), 0}, T_wc_b, kKitti);
    REQUIRE(X.has_value());
    CHECK((*X - Xw).norm() < 1e-8);
  }
}

TEST_CASE("triangulation rejects insufficient parallax") {
  const Pose T_wc_a;
  const Pose T_wc_b(Eigen::Matrix3d::Identity(), Eigen::Vector3d(0.05, 0, 0));
  const Eigen::Vector3d Xw(0.0, 0.0, 50.0);  // ~0.06 deg of parallax
  const Eigen::Vector2d pa = project_mono(T_wc_a.inverse() * Xw, kKitti);
  const Eigen::Vector2d pb = project_mono(T_wc_b.inverse() * Xw, kKitti);
  const auto X = triangulate(MonoKeypoint{pa.x(), pa.y(), 0}, T_wc_a,
                             MonoKeypoint{pb.x(), pb.y(), 0}, T_wc_b, kKitti);
  CHECK(!X.has_value());
}

TEST_CASE("triangulation rejects rays meeting behind the cameras") {
  const Pose T_wc_a;
  const Pose T_wc_b(Eigen::Matrix3d::Identity(), Eigen::Vector3d(2.0, 0, 0));
  // Ray a points along +z; ray b points along (+1, 0, +1): they meet at z < 0.
  const MonoKeypoint obs_a{kKitti.cx, kKitti.cy, 0};
  const MonoKeypoint obs_b{kKitti.cx + kKitti.fx, kKitti.cy, 0};
  CHECK(!triangulate(obs_a, T_wc_a, obs_b, T_wc_b, kKitti).has_value());
}

TEST_CASE("triangulation stays accurate under pixel noise") {
  std::mt19937_64 rng(37);
  std::normal_distribution<double> noise(0.0, 0.5);
  const Pose T_wc_a;
  const Pose T_wc_b(Eigen::AngleAxisd(0.05, Eigen::Vector3d::UnitY()).toRotationMatrix(),
                    Eigen::Vector3d(1.2, 0.1, 0.3));
  for (int i = 0; i < 20; ++i) {
    const Eigen::Vector3d Xw(std::uniform_real_distribution<double>(-2, 2)(rng),
                             std::uniform_real_distribution<double>(-1, 1)(rng),
                             std::uniform_real_distribution<double>(5, 15)(rng));
    const Eigen::Vector3d va = project_stereo(T_wc_a.inverse() * Xw, kKitti);
    const Eigen::Vector3d vb = project_stereo(T_wc_b.inverse() * Xw, kKitti);
    const auto X = triangulate(
        StereoKeypoint{va.x() + noise(rng), va.y() + noise(rng), va.z() + noise(rng), 0}, T_wc_a,
        StereoKeypoint{vb.x() + noise(rng), vb.y() + noise(rng), vb.z() + noise(rng), 0}, T_wc_b,
        kKitti);
    REQUIRE(X.has_value());
    CHECK((*X - Xw).norm() < 0.25);
  }
}
