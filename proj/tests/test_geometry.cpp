// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>

#include "mogen/geometry.hpp"
#include "mogen/rng.hpp"
#include "testutil.hpp"

using namespace mogen;
using geo::Vec6;

namespace {

Vec6 random_rot6d(Rng& rng) {
  Vec6 r;
  for (int i = 0; i < 6; ++i) r(i) = rng.normal();
  return r;
}

Mat3 rot_z(double deg) {
  return Mat3(Eigen::AngleAxisd(deg * M_PI / 180.0, Vec3::UnitZ()));
}

}  // namespace

TEST_CASE("rot6d identity and scale invariance", "[geometry]") {
  Vec6 ident;
  ident << 1, 0, 0, 0, 1, 0;
  REQUIRE(geo::rot6d_to_matrix(ident).isApprox(Mat3::Identity()));

  Vec6 scaled;
  scaled << 2, 0, 0, 0, 3, 0;
  REQUIRE(geo::rot6d_to_matrix(scaled).isApprox(Mat3::Identity()));
}

TEST_CASE("rot6d outputs are proper rotations", "[geometry]") {
  Rng rng(21);
  for (int i = 0; i < 100; ++i) {
    const Mat3 R = geo::rot6d_to_matrix(random_rot6d(rng));
    REQUIRE((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-6);
    REQUIRE(R.determinant() == Catch::Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("rot6d rejects degenerate inputs without NaN", "[geometry]") {
  Vec6 zero_col = Vec6::Zero();
  zero_col(4) = 1.0;
  REQUIRE_THROWS_AS(geo::rot6d_to_matrix(zero_col), DegenerateRotationError);

  Vec6 parallel;
  parallel << 1, 2, 3, 2, 4, 6;
  REQUIRE_THROWS_AS(geo::rot6d_to_matrix(parallel), DegenerateRotationError);

  Vec6 nan = Vec6::Constant(std::nan(""));
  REQUIRE_THROWS_AS(geo::rot6d_to_matrix(nan), ValidationError);
}

TEST_CASE("matrix_to_rot6d takes the first two columns", "[geometry]") {
  Vec6 ident = geo::matrix_to_rot6d(Mat3::Identity());
  REQUIRE(ident(0) == 1.0);
  REQUIRE(ident(4) == 1.0);
  REQUIRE(ident.cwiseAbs().sum() == 2.0);

  // Rz(90): columns (0,1,0) and (-1,0,0).
  Vec6 rz = geo::matrix_to_rot6d(rot_z(90.0));
  Vec6 expect;
  expect << 0, 1, 0, -1, 0, 0;
  REQUIRE((rz - expect).cwiseAbs().maxCoeff() < 1e-12);

  REQUIRE_THROWS_AS(geo::matrix_to_rot6d(Mat3::Constant(0.5)), ValidationError);
}

TEST_CASE("rot6d round trip on random rotations", "[geometry]") {
  Rng rng(22);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Mat3 R = geo::rot6d_to_matrix(random_rot6d(rng));
    const Mat3 back = geo::rot6d_to_matrix(geo::matrix_to_rot6d(R));
    worst = std::max(worst, (back - R).cwiseAbs().maxCoeff());
  }
  REQUIRE(worst < 1e-5);
}

TEST_CASE("default skeleton validates and matches the shipped data file", "[geometry]") {
  const geo::Skeleton builtin = geo::default_skeleton();
  builtin.validate();
  REQUIRE(builtin.njoints() == 16);
  REQUIRE(builtin.rest_height() > 0.0);

  const auto path = std::filesystem::path(MOGEN_SOURCE_DIR) / "data" / "skeleton.json";
  const geo::Skeleton loaded = geo::load_skeleton(path);
  REQUIRE(loaded.njoints() == builtin.njoints());
  for (Eigen::Index j = 0; j < builtin.njoints(); ++j) {
    const auto js = static_cast<std::size_t>(j);
    REQUIRE(loaded.joints[js].name == builtin.joints[js].name);
    REQUIRE(loaded.joints[js].parent == builtin.joints[js].parent);
    REQUIRE(loaded.joints[js].offset == builtin.joints[js].offset);
  }
}

TEST_CASE("skeleton validation rejects malformed trees", "[geometry]") {
  geo::Skeleton s = geo::default_skeleton();
  SECTION("forward parent reference") {
    s.joints[1].parent = 5;
    REQUIRE_THROWS_AS(s.validate(), ValidationError);
  }
  SECTION("duplicate name") {
    s.joints[2].name = "pelvis";
    REQUIRE_THROWS_AS(s.validate(), ValidationError);
  }
  SECTION("flat skeleton has zero height") {
    for (auto& j : s.joints) j.offset.y() = 0.0;
    REQUIRE_THROWS_AS(s.validate(), ValidationError);
  }
}

TEST_CASE("identity pose FK accumulates rest offsets", "[geometry]") {
  const geo::Skeleton s = geo::default_skeleton();
  const auto pos = geo::forward_kinematics(geo::identity_pose(s), s);
  REQUIRE(pos[0] == Vec3::Zero());
  for (Eigen::Index j = 1; j < s.njoints(); ++j) {
    const auto js = static_cast<std::size_t>(j);
    const Vec3 expect =
        pos[static_cast<std::size_t>(s.joints[js].parent)] + s.joints[js].offset;
    REQUIRE((pos[js] - expect).norm() < 1e-12);
  }
}

TEST_CASE("FK hand case: parent rotated 90 degrees about z", "[geometry]") {
  geo::Skeleton chain;
  chain.joints.push_back(geo::Joint{"root", -1, Vec3::Zero()});
  chain.joints.push_back(geo::Joint{"child", 0, Vec3(0, 1, 0)});
  geo::Pose p = geo::identity_pose(chain);
  p.rot6d.row(0) = geo::matrix_to_rot6d(rot_z(90.0)).transpose();
  const auto pos = geo::forward_kinematics(p, chain);
  REQUIRE((pos[1] - Vec3(-1, 0, 0)).norm() < 1e-12);
}

TEST_CASE("FK preserves bone lengths", "[geometry]") {
  const geo::Skeleton s = geo::default_skeleton();
  Rng rng(23);
  geo::Pose p;
  p.rot6d = rng.normal_matrix(s.njoints(), 6);
  const auto pos = geo::forward_kinematics(p, s);
  for (Eigen::Index j = 1; j < s.njoints(); ++j) {
    const auto js = static_cast<std::size_t>(j);
    const double bone = (pos[js] - pos[static_cast<std::size_t>(s.joints[js].parent)]).norm();
    REQUIRE(bone == Catch::Approx(s.joints[js].offset.norm()).margin(1e-6));
  }
}

TEST_CASE("rotating the pelvis rotates every joint position", "[geometry]") {
  const geo::Skeleton s = geo::default_skeleton();
  Rng rng(24);
  geo::Pose p;
  p.rot6d = rng.normal_matrix(s.njoints(), 6);
  const auto base = geo::forward_kinematics(p, s);

  const Mat3 extra = geo::rot6d_to_matrix(random_rot6d(rng));
  geo::Pose rotated = p;
  const Mat3 root = geo::rot6d_to_matrix(p.rot6d.row(0).transpose());
  rotated.rot6d.row(0) = geo::matrix_to_rot6d(extra * root).transpose();
  const auto moved = geo::forward_kinematics(rotated, s);
  for (std::size_t j = 0; j < base.size(); ++j) {
    REQUIRE((moved[j] - extra * base[j]).norm() < 1e-9);
  }
}

TEST_CASE("FK shape mismatch is a validation error", "[geometry]") {
  const geo::Skeleton s = geo::default_skeleton();
  geo::Pose p;
  p.rot6d = Mat::Zero(4, 6);
  REQUIRE_THROWS_AS(geo::forward_kinematics(p, s), ValidationError);
}

TEST_CASE("project_views emits the default five cameras", "[geometry]") {
  const geo::Skeleton s = geo::default_skeleton();
  const auto pos = geo::forward_kinematics(geo::identity_pose(s), s);
  const auto views = geo::project_views(pos, geo::default_azimuths());
  REQUIRE(views.size() == 5);
  REQUIRE(views[0].azimuth_deg == 120.0);
  REQUIRE(views[1].azimuth_deg == 150.0);
  REQUIRE(views[2].azimuth_deg == 180.0);
  REQUIRE(views[3].azimuth_deg == 210.0);
  REQUIRE(views[4].azimuth_deg == 240.0);
  for (const auto& v : views) REQUIRE(v.points2d.size() == 16);
}

TEST_CASE("projection is invariant to global translation", "[geometry]") {
  const geo::Skeleton s = geo::default_skeleton();
  Rng rng(25);
  geo::Pose p;
  p.rot6d = rng.normal_matrix(s.njoints(), 6);
  auto pos = geo::forward_kinematics(p, s);
  auto moved = pos;
  for (auto& q : moved) q += Vec3(3.0, -2.0, 7.5);
  const auto a = geo::project_views(pos, geo::default_azimuths());
  const auto b = geo::project_views(moved, geo::default_azimuths());
  for (std::size_t v = 0; v < a.size(); ++v) {
    for (std::size_t j = 0; j < a[v].points2d.size(); ++j) {
      REQUIRE((a[v].points2d[j] - b[v].points2d[j]).norm() < 1e-12);
    }
  }
}

TEST_CASE("projection hand case at azimuth 180", "[geometry]") {
  // Camera on the -x axis looking at the origin: screen right is +z and
  // screen up is +y, so x components vanish.
  geo::JointPositions pts{Vec3::Zero(), Vec3(1, 0, 0), Vec3(0, 0, 1), Vec3(0, 1, 0)};
  const auto v = geo::project_view(pts, 180.0);
  REQUIRE(v.points2d[1].norm() < 1e-12);
  REQUIRE((v.points2d[2] - geo::Vec2(1, 0)).norm() < 1e-12);
  REQUIRE((v.points2d[3] - geo::Vec2(0, 1)).norm() < 1e-12);
}

TEST_CASE("empty azimuth list is rejected", "[geometry]") {
  geo::JointPositions pts{Vec3::Zero()};
  REQUIRE_THROWS_AS(geo::project_views(pts, {}), ValidationError);
}

TEST_CASE("stickfigure render writes one ordered file per frame", "[geometry]") {
  const geo::Skeleton s = geo::default_skeleton();
  geo::Motion m;
  m.fps = 30.0;
  m.frames = geo::flatten_pose(geo::identity_pose(s)).replicate(8, 1);
  auto dir = testutil::scratch_dir("stick_basic");
  geo::render_stickfigure(m, s, dir / "a");

  std::set<std::string> names;
  for (const auto& e : std::filesystem::directory_iterator(dir / "a")) {
    names.insert(e.path().filename().string());
  }
  REQUIRE(names.size() == 8);
  REQUIRE(*names.begin() == "frame_0000.svg");
  REQUIRE(*names.rbegin() == "frame_0007.svg");

  geo::render_stickfigure(m, s, dir / "b");
  for (int f = 0; f < 8; ++f) {
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04d.svg", f);
    REQUIRE(read_text_file(dir / "a" / name) == read_text_file(dir / "b" / name));
  }
}

TEST_CASE("zero-length motion fails to render", "[geometry]") {
  const geo::Skeleton s = geo::default_skeleton();
  geo::Motion m;
  m.fps = 30.0;
  m.frames = Mat::Zero(0, s.njoints() * 6);
  auto dir = testutil::scratch_dir("stick_empty");
  REQUIRE_THROWS_AS(geo::render_stickfigure(m, s, dir), ValidationError);
}

TEST_CASE("differentiable FK matches the plain implementation", "[geometry]") {
  const geo::Skeleton s = geo::default_skeleton();
  Rng rng(26);
  const Eigen::Index N = 3;
  Mat poses = rng.normal_matrix(N, s.njoints() * 6);

  ad::Tape t;
  Mat out = t.val(geo::ad_forward_kinematics(t, t.leaf(poses), s));
  REQUIRE(out.rows() == N);
  REQUIRE(out.cols() == s.njoints() * 3);
  for (Eigen::Index n = 0; n < N; ++n) {
    const auto pos = geo::forward_kinematics(geo::pose_from_row(poses, n, s.njoints()), s);
    for (Eigen::Index j = 0; j < s.njoints(); ++j) {
      const Vec3 got(out(n, 3 * j), out(n, 3 * j + 1), out(n, 3 * j + 2));
      REQUIRE((got - pos[static_cast<std::size_t>(j)]).norm() < 1e-9);
    }
  }
}

TEST_CASE("FK gradients match finite differences", "[geometry][gradcheck]") {
  const geo::Skeleton s = geo::default_skeleton();
  Rng rng(27);
  Mat pose = rng.normal_matrix(1, s.njoints() * 6);
  Mat target = rng.normal_matrix(1, s.njoints() * 3, 0.3);

  auto build = [&](ad::Tape& t, const std::vector<ad::Var>& v) {
    ad::Var d = t.sub(geo::ad_forward_kinematics(t, v[0], s), t.leaf(target));
    return t.mean(t.square(d));
  };
  auto res = ad::finite_diff_check(build, {pose});
  INFO("max_rel_err=" << res.max_rel_err);
  REQUIRE(res.max_rel_err < 1e-3);
}
