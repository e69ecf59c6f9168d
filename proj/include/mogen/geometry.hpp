// Copyright 2026 The Mogen Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "mogen/ad.hpp"
#include "mogen/common.hpp"

namespace mogen::geo {

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Vec2 = Eigen::Vector2d;

inline constexpr double kDegenerateTol = 1e-8;

// 6D rotation: the first two columns of a rotation matrix, stored
// [c1x c1y c1z c2x c2y c2z]. Orthonormalized on decode.
inline Mat3 rot6d_to_matrix(const Vec6& r) {
  check(r.allFinite(), "rot6d_to_matrix: non-finite input");
  const Vec3 a1 = r.head<3>();
  const Vec3 a2 = r.tail<3>();
  const double n1 = a1.norm();
  if (n1 <= kDegenerateTol) {
    throw DegenerateRotationError("rot6d_to_matrix: first column is zero");
  }
  const Vec3 b1 = a1 / n1;
  const Vec3 a2p = a2 - b1.dot(a2) * b1;
  const double n2 = a2p.norm();
  if (n2 <= kDegenerateTol) {
    throw DegenerateRotationError(
        "rot6d_to_matrix: columns are parallel or second column is zero");
  }
  const Vec3 b2 = a2p / n2;
  Mat3 out;
  out.col(0) = b1;
  out.col(1) = b2;
  out.col(2) = b1.cross(b2);
  return out;
}

inline Vec6 matrix_to_rot6d(const Mat3& R) {
  check(R.allFinite(), "matrix_to_rot6d: non-finite input");
  check((R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() <= 1e-4 &&
            R.determinant() > 0.0,
        "matrix_to_rot6d: input is not a rotation");
  Vec6 r;
  r.head<3>() = R.col(0);
  r.tail<3>() = R.col(1);
  return r;
}

inline Vec6 identity_rot6d() {
  Vec6 r;
  r << 1, 0, 0, 0, 1, 0;
  return r;
}

struct Joint {
  std::string name;
  int parent = -1;
  Vec3 offset = Vec3::Zero();
};

struct Skeleton {
  std::vector<Joint> joints;

  Eigen::Index njoints() const { return static_cast<Eigen::Index>(joints.size()); }

  void validate() const {
    check(!joints.empty(), "skeleton: no joints");
    check(joints[0].parent < 0, "skeleton: first joint must be the root");
    for (std::size_t j = 0; j < joints.size(); ++j) {
      const Joint& jt = joints[j];
      check(!jt.name.empty(), "skeleton: empty joint name");
      check(jt.offset.allFinite(), "skeleton: non-finite offset");
      if (j > 0) {
        check(jt.parent >= 0 && jt.parent < static_cast<int>(j),
              "skeleton: parent of '" + jt.name + "' must come earlier");
      }
      for (std::size_t k = 0; k < j; ++k) {
        check(joints[k].name != jt.name, "skeleton: duplicate joint name " + jt.name);
      }
    }
    check(rest_height() > 0.0, "skeleton: rest height must be positive");
  }

  // Height of the rest configuration, max minus min y over the joints.
  double rest_height() const {
    double lo = 0.0, hi = 0.0;
    std::vector<Vec3> pos(joints.size());
    for (std::size_t j = 0; j < joints.size(); ++j) {
      pos[j] = joints[j].parent < 0
                   ? Vec3::Zero()
                   : Vec3(pos[static_cast<std::size_t>(joints[j].parent)] + joints[j].offset);
      lo = std::min(lo, pos[j].y());
      hi = std::max(hi, pos[j].y());
    }
    return hi - lo;
  }
};

// The stand-in body: 16 joints, torso and limbs only.
inline Skeleton default_skeleton() {
  Skeleton s;
  auto add = [&s](const char* name, int parent, double x, double y, double z) {
    s.joints.push_back(Joint{name, parent, Vec3(x, y, z)});
  };
  add("pelvis", -1, 0.0, 0.0, 0.0);
  add("spine1", 0, 0.0, 0.22, 0.0);
  add("spine2", 1, 0.0, 0.22, 0.0);
  add("neck", 2, 0.0, 0.25, 0.0);
  add("l_shoulder", 2, 0.20, 0.18, 0.0);
  add("l_elbow", 4, 0.0, -0.28, 0.0);
  add("l_wrist", 5, 0.0, -0.26, 0.0);
  add("r_shoulder", 2, -0.20, 0.18, 0.0);
  add("r_elbow", 7, 0.0, -0.28, 0.0);
  add("r_wrist", 8, 0.0, -0.26, 0.0);
  add("l_hip", 0, 0.10, -0.09, 0.0);
  add("l_knee", 10, 0.0, -0.40, 0.0);
  add("l_ankle", 11, 0.0, -0.40, 0.0);
  add("r_hip", 0, -0.10, -0.09, 0.0);
  add("r_knee", 13, 0.0, -0.40, 0.0);
  add("r_ankle", 14, 0.0, -0.40, 0.0);
  return s;
}

// Skeleton definition file, schema_version 1:
// {"schema_version":1,"joints":[{"name":..,"parent":..,"offset":[x,y,z]},..]}
inline Skeleton load_skeleton(const std::filesystem::path& path) {
  nlohmann::json doc = nlohmann::json::parse(read_text_file(path), nullptr, false);
  check_io(!doc.is_discarded(), "skeleton: invalid JSON in " + path.string());
  check_io(doc.value("schema_version", 0) == 1,
           "skeleton: unsupported schema_version in " + path.string());
  check_io(doc.contains("joints") && doc["joints"].is_array(),
           "skeleton: missing joints array in " + path.string());
  Skeleton s;
  for (const auto& j : doc["joints"]) {
    Joint jt;
    jt.name = j.at("name").get<std::string>();
    jt.parent = j.at("parent").get<int>();
    const auto& off = j.at("offset");
    check_io(off.is_array() && off.size() == 3, "skeleton: offset must have 3 entries");
    jt.offset = Vec3(off[0].get<double>(), off[1].get<double>(), off[2].get<double>());
    s.joints.push_back(std::move(jt));
  }
  s.validate();
  return s;
}

inline void save_skeleton(const std::filesystem::path& path, const Skeleton& s) {
  nlohmann::json joints = nlohmann::json::array();
  for (const Joint& j : s.joints) {
    joints.push_back({{"name", j.name},
                      {"parent", j.parent},
                      {"offset", {j.offset.x(), j.offset.y(), j.offset.z()}}});
  }
  nlohmann::json doc{{"schema_version", 1}, {"joints", joints}};
  write_text_file(path, doc.dump(2) + "\n");
}

// Per-joint 6D rotations, J x 6. Global orientation is not modeled; the row
// for the pelvis rotates the whole body in place.
struct Pose {
  Mat rot6d;
};

inline Pose identity_pose(const Skeleton& s) {
  Pose p;
  p.rot6d = Mat::Zero(s.njoints(), 6);
  for (Eigen::Index j = 0; j < s.njoints(); ++j) {
    p.rot6d.row(j) = identity_rot6d().transpose();
  }
  return p;
}

inline void validate_pose(const Pose& p, const Skeleton& s) {
  check(p.rot6d.rows() == s.njoints() && p.rot6d.cols() == 6,
        "pose: expected " + std::to_string(s.njoints()) + "x6 rotations");
  check(p.rot6d.allFinite(), "pose: non-finite entries");
}

using JointPositions = std::vector<Vec3>;

inline JointPositions forward_kinematics(const Pose& p, const Skeleton& s) {
  validate_pose(p, s);
  const Eigen::Index J = s.njoints();
  std::vector<Mat3> global(static_cast<std::size_t>(J));
  JointPositions pos(static_cast<std::size_t>(J));
  for (Eigen::Index j = 0; j < J; ++j) {
    const Mat3 local = rot6d_to_matrix(p.rot6d.row(j).transpose());
    const int parent = s.joints[static_cast<std::size_t>(j)].parent;
    if (parent < 0) {
      global[static_cast<std::size_t>(j)] = local;
      pos[static_cast<std::size_t>(j)] = Vec3::Zero();
    } else {
      const auto pi = static_cast<std::size_t>(parent);
      global[static_cast<std::size_t>(j)] = global[pi] * local;
      pos[static_cast<std::size_t>(j)] =
          pos[pi] + global[pi] * s.joints[static_cast<std::size_t>(j)].offset;
    }
  }
  return pos;
}

struct ViewDescriptor {
  double azimuth_deg = 0.0;
  std::vector<Vec2> points2d;
};

inline std::vector<double> default_azimuths() {
  return {120.0, 150.0, 180.0, 210.0, 240.0};
}

// Orthographic look-at projection. The camera sits on the horizontal circle
// at the given azimuth (measured from +x toward +z, elevation 0), looking at
// the pelvis; 2D axes are screen right and screen up.
inline ViewDescriptor project_view(const JointPositions& joints, double azimuth_deg) {
  check(!joints.empty(), "project_view: no joints");
  const double a = azimuth_deg * M_PI / 180.0;
  const Vec3 cam_dir(std::cos(a), 0.0, std::sin(a));
  const Vec3 forward = -cam_dir;
  const Vec3 up(0.0, 1.0, 0.0);
  const Vec3 right = forward.cross(up).normalized();
  const Vec3 screen_up = right.cross(forward);
  ViewDescriptor v;
  v.azimuth_deg = azimuth_deg;
  v.points2d.reserve(joints.size());
  const Vec3 center = joints[0];
  for (const Vec3& p : joints) {
    const Vec3 q = p - center;
    v.points2d.emplace_back(q.dot(right), q.dot(screen_up));
  }
  return v;
}

inline std::vector<ViewDescriptor> project_views(const JointPositions& joints,
                                                 const std::vector<double>& azimuths) {
  check(!azimuths.empty(), "project_views: azimuth list is empty");
  std::vector<ViewDescriptor> out;
  out.reserve(azimuths.size());
  for (double a : azimuths) out.push_back(project_view(joints, a));
  return out;
}

// A fixed-length clip; each row of frames is one flattened pose (J*6 values).
struct Motion {
  Mat frames;
  double fps = 30.0;
};

inline void validate_motion(const Motion& m, const Skeleton& s) {
  check(m.frames.rows() > 0, "motion: no frames");
  check(m.frames.cols() == s.njoints() * 6, "motion: frame width must be J*6");
  check(m.frames.allFinite(), "motion: non-finite entries");
  check(m.fps > 0.0, "motion: fps must be positive");
}

inline Pose pose_from_row(const Mat& frames, Eigen::Index row, Eigen::Index J) {
  Pose p;
  p.rot6d.resize(J, 6);
  for (Eigen::Index j = 0; j < J; ++j) {
    p.rot6d.row(j) = frames.block(row, j * 6, 1, 6);
  }
  return p;
}

inline Eigen::RowVectorXd flatten_pose(const Pose& p) {
  Eigen::RowVectorXd row(p.rot6d.rows() * 6);
  for (Eigen::Index j = 0; j < p.rot6d.rows(); ++j) {
    row.segment(j * 6, 6) = p.rot6d.row(j);
  }
  return row;
}

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.5f", v);
  return buf;
}

}  // namespace detail

// Writes one SVG per frame (frame_0000.svg, ...) with bones as line segments,
// seen from the 180-degree camera. Output is byte-deterministic.
inline void render_stickfigure(const Motion& m, const Skeleton& s,
                               const std::filesystem::path& dir) {
  validate_motion(m, s);
  std::filesystem::create_directories(dir);
  const Eigen::Index J = s.njoints();
  for (Eigen::Index f = 0; f < m.frames.rows(); ++f) {
    const JointPositions pos = forward_kinematics(pose_from_row(m.frames, f, J), s);
    const ViewDescriptor view = project_view(pos, 180.0);
    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"400\" height=\"400\" "
           "viewBox=\"-1.2 -1.2 2.4 2.4\">\n";
    svg += "<rect x=\"-1.2\" y=\"-1.2\" width=\"2.4\" height=\"2.4\" fill=\"white\"/>\n";
    for (Eigen::Index j = 1; j < J; ++j) {
      const auto& a = view.points2d[static_cast<std::size_t>(s.joints[static_cast<std::size_t>(j)].parent)];
      const auto& b = view.points2d[static_cast<std::size_t>(j)];
      svg += "<line x1=\"" + detail::fmt(a.x()) + "\" y1=\"" + detail::fmt(-a.y()) +
             "\" x2=\"" + detail::fmt(b.x()) + "\" y2=\"" + detail::fmt(-b.y()) +
             "\" stroke=\"black\" stroke-width=\"0.03\"/>\n";
    }
    for (const auto& p : view.points2d) {
      svg += "<circle cx=\"" + detail::fmt(p.x()) + "\" cy=\"" + detail::fmt(-p.y()) +
             "\" r=\"0.035\" fill=\"#c0392b\"/>\n";
    }
    svg += "</svg>\n";
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%04d.svg", static_cast<int>(f));
    write_text_file(dir / name, svg);
  }
}

// ---- differentiable counterparts used by training losses ----

// N x 6 rows to N x 9 row-major rotation matrices via the same Gram-Schmidt
// construction as rot6d_to_matrix. Valid (non-degenerate) rows assumed.
inline ad::Var ad_rot6d_to_rot9(ad::Tape& t, ad::Var x6) {
  check(t.val(x6).cols() == 6, "ad_rot6d_to_rot9: input must be Nx6");
  ad::Var a1 = t.cols(x6, 0, 3);
  ad::Var a2 = t.cols(x6, 3, 3);
  ad::Var b1 = t.normalize_rows(a1);
  ad::Var proj = t.rowwise_sum(t.mul(b1, a2));
  ad::Var b2 = t.normalize_rows(t.sub(a2, t.rowwise_mul(b1, proj)));
  ad::Var b3 = t.cross3_rows(b1, b2);
  auto c = [&t](ad::Var v, Eigen::Index k) { return t.cols(v, k, 1); };
  return t.hstack({c(b1, 0), c(b2, 0), c(b3, 0),
                   c(b1, 1), c(b2, 1), c(b3, 1),
                   c(b1, 2), c(b2, 2), c(b3, 2)});
}

// Batched FK: poses is N x (J*6); result is N x (J*3) with joint j's position
// in columns [3j, 3j+3).
inline ad::Var ad_forward_kinematics(ad::Tape& t, ad::Var poses, const Skeleton& s) {
  const Eigen::Index J = s.njoints();
  check(t.val(poses).cols() == J * 6, "ad_forward_kinematics: pose width must be J*6");
  const Eigen::Index N = t.val(poses).rows();
  std::vector<ad::Var> global(static_cast<std::size_t>(J));
  std::vector<ad::Var> pos(static_cast<std::size_t>(J));
  for (Eigen::Index j = 0; j < J; ++j) {
    ad::Var local = ad_rot6d_to_rot9(t, t.cols(poses, j * 6, 6));
    const int parent = s.joints[static_cast<std::size_t>(j)].parent;
    if (parent < 0) {
      global[static_cast<std::size_t>(j)] = local;
      pos[static_cast<std::size_t>(j)] = t.leaf(Mat::Zero(N, 3));
    } else {
      const auto pi = static_cast<std::size_t>(parent);
      global[static_cast<std::size_t>(j)] = t.matmul3_rows(global[pi], local);
      pos[static_cast<std::size_t>(j)] =
          t.add(pos[pi], t.rot3_apply_const(global[pi], s.joints[static_cast<std::size_t>(j)].offset));
    }
  }
  return t.hstack(pos);
}

}  // namespace mogen::geo
