#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "motok/common.hpp"

// Motion representation and forward kinematics. One pose frame packs
// [root velocity (3) | root rotation 6D (6) | root rotation velocity 6D (6) |
//  22 joint rotations 6D (132) | 22 joint rotation velocities 6D (132)] = 279
// channels. Rotation-velocity channels are forward differences stored at
// frame t (the last frame repeats t-1); the root translation velocity is the
// step into frame t (frame 0 repeats frame 1). All quantities live in the
// sequence-local frame; initial_root_{position,rotation} place that frame in
// the world.

namespace motok::kin {

inline constexpr int kJointCount = 23;
inline constexpr int kNonRootJoints = 22;
inline constexpr int kFrameDim = 279;

inline constexpr int kRootVelOffset = 0;
inline constexpr int kRootRotOffset = 3;
inline constexpr int kRootRotVelOffset = 9;
inline constexpr int kJointRotOffset = 15;
inline constexpr int kJointRotVelOffset = 147;

template <typename S> using Vec3 = Eigen::Matrix<S, 3, 1>;
template <typename S> using Vec6 = Eigen::Matrix<S, 6, 1>;
template <typename S> using Mat3 = Eigen::Matrix<S, 3, 3>;

template <typename S>
struct SkeletonT {
  std::vector<std::string> joint_names;   // root first
  std::vector<int> parent_index;          // -1 for root; parents precede children
  std::vector<Vec3<S>> bone_offset;       // rest-pose offset from parent, meters

  int joint_count() const { return static_cast<int>(joint_names.size()); }

  void validate() const {
    if (joint_count() != kJointCount)
      fail_domain("SkeletonMismatch", "expected 23 joints, got " + std::to_string(joint_count()));
    if (parent_index.size() != joint_names.size() || bone_offset.size() != joint_names.size())
      fail_domain("SkeletonMismatch", "field lengths disagree");
    if (parent_index[0] != -1) fail_domain("SkeletonMismatch", "joint 0 must be the root");
    for (int j = 1; j < joint_count(); ++j) {
      if (parent_index[j] < 0 || parent_index[j] >= j)
        fail_domain("SkeletonMismatch", "parents must precede children (joint " + std::to_string(j) + ")");
    }
    for (const auto& o : bone_offset)
      if (!o.allFinite()) fail_domain("SkeletonMismatch", "non-finite bone offset");
  }
};

/// Rest-pose joint tree used throughout: spine chain up from the pelvis,
/// arms along +/-y, legs down -z. Offsets in meters.
template <typename S = double>
SkeletonT<S> canonical_skeleton() {
  SkeletonT<S> sk;
  auto add = [&](const char* name, int parent, double x, double y, double z) {
    sk.joint_names.emplace_back(name);
    sk.parent_index.push_back(parent);
    sk.bone_offset.push_back(Vec3<S>(S(x), S(y), S(z)));
  };
  add("root", -1, 0, 0, 0);
  add("spine1", 0, 0, 0, 0.10);
  add("spine2", 1, 0, 0, 0.10);
  add("spine3", 2, 0, 0, 0.10);
  add("chest", 3, 0, 0, 0.10);
  add("neck", 4, 0, 0, 0.10);
  add("head", 5, 0, 0, 0.12);
  add("l_collar", 4, 0, 0.08, 0.05);
  add("l_shoulder", 7, 0, 0.10, 0);
  add("l_elbow", 8, 0, 0.26, 0);
  add("l_wrist", 9, 0, 0.25, 0);
  add("r_collar", 4, 0, -0.08, 0.05);
  add("r_shoulder", 11, 0, -0.10, 0);
  add("r_elbow", 12, 0, -0.26, 0);
  add("r_wrist", 13, 0, -0.25, 0);
  add("l_hip", 0, 0, 0.09, -0.05);
  add("l_knee", 15, 0, 0, -0.42);
  add("l_ankle", 16, 0, 0, -0.41);
  add("l_toe", 17, 0.14, 0, -0.06);
  add("r_hip", 0, 0, -0.09, -0.05);
  add("r_knee", 19, 0, 0, -0.42);
  add("r_ankle", 20, 0, 0, -0.41);
  add("r_toe", 21, 0.14, 0, -0.06);
  return sk;
}

template <typename S>
struct MotionSequenceT {
  using FrameMatrix = Eigen::Matrix<S, Eigen::Dynamic, kFrameDim, Eigen::RowMajor>;

  FrameMatrix frames;  // T x 279
  S fps{S(60)};
  std::string skeleton_ref{"canonical23"};
  Vec3<S> initial_root_position = Vec3<S>::Zero();
  Mat3<S> initial_root_rotation = Mat3<S>::Identity();

  int64_t frame_count() const { return frames.rows(); }

  auto root_vel(int64_t t) { return frames.row(t).template segment<3>(kRootVelOffset); }
  auto root_vel(int64_t t) const { return frames.row(t).template segment<3>(kRootVelOffset); }
  auto root_rot(int64_t t) { return frames.row(t).template segment<6>(kRootRotOffset); }
  auto root_rot(int64_t t) const { return frames.row(t).template segment<6>(kRootRotOffset); }
  auto root_rot_vel(int64_t t) { return frames.row(t).template segment<6>(kRootRotVelOffset); }
  auto root_rot_vel(int64_t t) const { return frames.row(t).template segment<6>(kRootRotVelOffset); }
  auto joint_rot(int64_t t, int j) { return frames.row(t).template segment<6>(kJointRotOffset + 6 * j); }
  auto joint_rot(int64_t t, int j) const { return frames.row(t).template segment<6>(kJointRotOffset + 6 * j); }
  auto joint_rot_vel(int64_t t, int j) { return frames.row(t).template segment<6>(kJointRotVelOffset + 6 * j); }
  auto joint_rot_vel(int64_t t, int j) const { return frames.row(t).template segment<6>(kJointRotVelOffset + 6 * j); }

  void validate() const {
    if (frame_count() < 1) fail_domain("EmptySequence", "motion needs at least one frame");
    if (!(fps > S(0))) fail_domain("BadFps", "fps must be positive");
    if (!frames.allFinite()) fail_domain("NonFinite", "non-finite pose channel");
    if (!initial_root_position.allFinite()) fail_domain("NonFinite", "non-finite initial position");
    Mat3<S> e = initial_root_rotation.transpose() * initial_root_rotation - Mat3<S>::Identity();
    if (e.cwiseAbs().maxCoeff() >= S(1e-5))
      fail_domain("NotARotation", "initial root rotation not orthonormal");
  }
};

template <typename S>
struct JointPositionsT {
  Eigen::Matrix<S, Eigen::Dynamic, 3> p;  // (T*23) x 3, world frame, meters
  int64_t frames = 0;

  auto joint(int64_t t, int j) { return p.row(t * kJointCount + j); }
  auto joint(int64_t t, int j) const { return p.row(t * kJointCount + j); }
};

/// Per-frame absolute pose: world root placement plus parent-relative joint
/// rotation matrices, the form the procedural generators work in.
template <typename S>
struct AbsolutePoseT {
  Vec3<S> root_position = Vec3<S>::Zero();
  Mat3<S> root_rotation = Mat3<S>::Identity();
  std::array<Mat3<S>, kNonRootJoints> joint_rotations;

  AbsolutePoseT() { joint_rotations.fill(Mat3<S>::Identity()); }
};

// Gram-Schmidt recovery of a rotation from its first two stored columns.
template <typename S>
Mat3<S> rot6d_to_matrix(const Vec6<S>& r) {
  Vec3<S> a0 = r.template head<3>();
  Vec3<S> b0 = r.template tail<3>();
  S na = a0.norm();
  if (!(na > S(1e-8))) fail_domain("DegenerateInput", "first 6D column near zero");
  Vec3<S> a = a0 / na;
  Vec3<S> b1 = b0 - a.dot(b0) * a;
  S nb = b1.norm();
  if (!(nb > S(1e-8))) fail_domain("DegenerateInput", "6D columns near parallel");
  Vec3<S> b = b1 / nb;
  Mat3<S> m;
  m.col(0) = a;
  m.col(1) = b;
  m.col(2) = a.cross(b);
  return m;
}

template <typename S>
Vec6<S> matrix_to_rot6d(const Mat3<S>& m) {
  Mat3<S> e = m.transpose() * m - Mat3<S>::Identity();
  if (e.cwiseAbs().maxCoeff() >= S(1e-4) || m.determinant() <= S(0))
    fail_domain("NotARotation", "matrix is not a proper rotation");
  Vec6<S> r;
  r.template head<3>() = m.col(0);
  r.template tail<3>() = m.col(1);
  return r;
}

template <typename S>
Vec6<S> identity_rot6d() {
  Vec6<S> r;
  r << S(1), S(0), S(0), S(0), S(1), S(0);
  return r;
}

template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, 3> integrate_root_velocity(const MotionSequenceT<S>& m) {
  const int64_t t_count = m.frame_count();
  Eigen::Matrix<S, Eigen::Dynamic, 3> pos(t_count, 3);
  pos.row(0) = m.initial_root_position.transpose();
  for (int64_t t = 1; t < t_count; ++t) {
    Vec3<S> step = m.initial_root_rotation * Vec3<S>(m.root_vel(t).transpose());
    pos.row(t) = pos.row(t - 1) + step.transpose();
  }
  return pos;
}

template <typename S>
JointPositionsT<S> forward_kinematics(const MotionSequenceT<S>& m, const SkeletonT<S>& sk) {
  sk.validate();
  m.validate();
  const int64_t t_count = m.frame_count();
  auto root_pos = integrate_root_velocity(m);

  JointPositionsT<S> out;
  out.frames = t_count;
  out.p.resize(t_count * kJointCount, 3);

  std::array<Mat3<S>, kJointCount> g;
  std::array<Vec3<S>, kJointCount> p;
  for (int64_t t = 0; t < t_count; ++t) {
    g[0] = m.initial_root_rotation * rot6d_to_matrix<S>(m.root_rot(t).transpose());
    p[0] = root_pos.row(t).transpose();
    for (int j = 1; j < kJointCount; ++j) {
      const int pi = sk.parent_index[j];
      g[j] = g[pi] * rot6d_to_matrix<S>(m.joint_rot(t, j - 1).transpose());
      p[j] = p[pi] + g[pi] * sk.bone_offset[j];
    }
    for (int j = 0; j < kJointCount; ++j) out.p.row(t * kJointCount + j) = p[j].transpose();
  }
  return out;
}

/// World root rotation per frame (initial rotation composed with the local
/// root rotation channel).
template <typename S>
Mat3<S> world_root_rotation(const MotionSequenceT<S>& m, int64_t t) {
  return m.initial_root_rotation * rot6d_to_matrix<S>(Vec6<S>(m.root_rot(t).transpose()));
}

/// Accumulated world rotation of one joint (root = joint 0).
template <typename S>
Mat3<S> world_joint_rotation(const MotionSequenceT<S>& m, const SkeletonT<S>& sk, int64_t t, int joint) {
  Mat3<S> g = world_root_rotation(m, t);
  // walk root->joint along the parent chain
  std::array<int, kJointCount> chain{};
  int n = 0;
  for (int j = joint; j != 0; j = sk.parent_index[j]) chain[n++] = j;
  for (int i = n - 1; i >= 0; --i)
    g = g * rot6d_to_matrix<S>(Vec6<S>(m.joint_rot(t, chain[i] - 1).transpose()));
  return g;
}

template <typename S>
MotionSequenceT<S> derive_representation(const std::vector<AbsolutePoseT<S>>& abs, S fps,
                                         const std::string& skeleton_ref = "canonical23") {
  const int64_t t_count = static_cast<int64_t>(abs.size());
  if (t_count < 2) fail_domain("TooShort", "need at least two absolute frames");

  MotionSequenceT<S> m;
  m.fps = fps;
  m.skeleton_ref = skeleton_ref;
  m.initial_root_position = abs[0].root_position;
  m.initial_root_rotation = abs[0].root_rotation;
  m.frames.resize(t_count, kFrameDim);

  const Mat3<S> q0_inv = abs[0].root_rotation.transpose();
  for (int64_t t = 0; t < t_count; ++t) {
    m.root_rot(t) = matrix_to_rot6d<S>(Mat3<S>(q0_inv * abs[t].root_rotation)).transpose();
    for (int j = 0; j < kNonRootJoints; ++j)
      m.joint_rot(t, j) = matrix_to_rot6d<S>(abs[t].joint_rotations[j]).transpose();
  }
  // translation velocity: step into frame t, frame 0 repeats frame 1
  for (int64_t t = 1; t < t_count; ++t) {
    Vec3<S> step = q0_inv * (abs[t].root_position - abs[t - 1].root_position);
    m.root_vel(t) = step.transpose();
  }
  m.root_vel(0) = m.root_vel(1);
  // rotation velocities: forward difference at t, last frame repeats
  for (int64_t t = 0; t + 1 < t_count; ++t) {
    Mat3<S> rv = abs[t].root_rotation.transpose() * abs[t + 1].root_rotation;
    m.root_rot_vel(t) = matrix_to_rot6d<S>(rv).transpose();
    for (int j = 0; j < kNonRootJoints; ++j) {
      Mat3<S> jv = abs[t].joint_rotations[j].transpose() * abs[t + 1].joint_rotations[j];
      m.joint_rot_vel(t, j) = matrix_to_rot6d<S>(jv).transpose();
    }
  }
  m.root_rot_vel(t_count - 1) = m.root_rot_vel(t_count - 2);
  for (int j = 0; j < kNonRootJoints; ++j)
    m.joint_rot_vel(t_count - 1, j) = m.joint_rot_vel(t_count - 2, j);
  return m;
}

/// Inverse of derive_representation on the absolute channels (velocity
/// channels are dropped).
template <typename S>
std::vector<AbsolutePoseT<S>> absolute_poses(const MotionSequenceT<S>& m) {
  const int64_t t_count = m.frame_count();
  auto root_pos = integrate_root_velocity(m);
  std::vector<AbsolutePoseT<S>> abs(t_count);
  for (int64_t t = 0; t < t_count; ++t) {
    abs[t].root_position = root_pos.row(t).transpose();
    abs[t].root_rotation = world_root_rotation(m, t);
    for (int j = 0; j < kNonRootJoints; ++j)
      abs[t].joint_rotations[j] = rot6d_to_matrix<S>(Vec6<S>(m.joint_rot(t, j).transpose()));
  }
  return abs;
}

template <typename S>
Mat3<S> yaw_matrix(S angle) {
  const S c = std::cos(angle), s = std::sin(angle);
  Mat3<S> r;
  r << c, -s, S(0), s, c, S(0), S(0), S(0), S(1);
  return r;
}

/// Rigid yaw of the whole sequence about the world vertical axis. Frames are
/// untouched: channels are stored in the sequence-local frame, so rotating
/// the initial placement rotates every world-frame quantity with it.
template <typename S>
MotionSequenceT<S> yaw_augment(const MotionSequenceT<S>& m, S angle) {
  MotionSequenceT<S> out = m;
  Mat3<S> r = yaw_matrix(angle);
  out.initial_root_position = r * m.initial_root_position;
  out.initial_root_rotation = r * m.initial_root_rotation;
  return out;
}

template <typename S>
MotionSequenceT<S> random_rotation_augment(const MotionSequenceT<S>& m, uint64_t seed) {
  Rng rng(seed);
  return yaw_augment(m, S(rng.uniform(0.0, 2.0 * M_PI)));
}

using Skeleton = SkeletonT<double>;
using MotionSequence = MotionSequenceT<double>;
using JointPositions = JointPositionsT<double>;
using AbsolutePose = AbsolutePoseT<double>;

}  // namespace motok::kin
