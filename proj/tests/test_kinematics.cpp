#include <doctest.h>

#include <Eigen/Geometry>
#include <cmath>
#include <vector>

#include "motok/kinematics.hpp"

using namespace motok;
using namespace motok::kin;

namespace {

Mat3<double> random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

Vec6<double> pack6(double a, double b, double c, double d, double e, double f) {
  Vec6<double> v;
  v << a, b, c, d, e, f;
  return v;
}

MotionSequence rest_sequence(int frames) {
  MotionSequence m;
  m.frames.setZero(frames, kFrameDim);
  for (int t = 0; t < frames; ++t) {
    m.root_rot(t) = identity_rot6d<double>().transpose();
    m.root_rot_vel(t) = identity_rot6d<double>().transpose();
    for (int j = 0; j < kNonRootJoints; ++j) {
      m.joint_rot(t, j) = identity_rot6d<double>().transpose();
      m.joint_rot_vel(t, j) = identity_rot6d<double>().transpose();
    }
  }
  return m;
}

std::vector<AbsolutePose> random_absolute(Rng& rng, int frames) {
  std::vector<AbsolutePose> abs(frames);
  Mat3<double> root = random_rotation(rng);
  std::array<Mat3<double>, kNonRootJoints> joints;
  for (auto& j : joints) j = random_rotation(rng);
  Vec3<double> pos(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 1.5));
  for (int t = 0; t < frames; ++t) {
    // small random increments keep the motion smooth and rotations valid
    Eigen::AngleAxisd droot(rng.uniform(-0.05, 0.05),
                            Vec3<double>(rng.normal(), rng.normal(), rng.normal()).normalized());
    root = root * droot.toRotationMatrix();
    pos += Vec3<double>(rng.normal(), rng.normal(), rng.normal()) * 0.01;
    abs[t].root_position = pos;
    abs[t].root_rotation = root;
    for (int j = 0; j < kNonRootJoints; ++j) {
      Eigen::AngleAxisd dj(rng.uniform(-0.05, 0.05),
                           Vec3<double>(rng.normal(), rng.normal(), rng.normal()).normalized());
      joints[j] = joints[j] * dj.toRotationMatrix();
      abs[t].joint_rotations[j] = joints[j];
    }
  }
  return abs;
}

// Independent FK oracle built from explicit 4x4 homogeneous transforms.
Eigen::Matrix<double, Eigen::Dynamic, 3> fk_oracle(const MotionSequence& m, const Skeleton& sk) {
  auto root_pos = integrate_root_velocity(m);
  const int64_t t_count = m.frame_count();
  Eigen::Matrix<double, Eigen::Dynamic, 3> out(t_count * kJointCount, 3);
  for (int64_t t = 0; t < t_count; ++t) {
    std::vector<Eigen::Matrix4d> h(kJointCount);
    h[0] = Eigen::Matrix4d::Identity();
    h[0].topLeftCorner<3, 3>() =
        m.initial_root_rotation * rot6d_to_matrix<double>(Vec6<double>(m.root_rot(t).transpose()));
    h[0].topRightCorner<3, 1>() = root_pos.row(t).transpose();
    for (int j = 1; j < kJointCount; ++j) {
      Eigen::Matrix4d local = Eigen::Matrix4d::Identity();
      local.topLeftCorner<3, 3>() =
          rot6d_to_matrix<double>(Vec6<double>(m.joint_rot(t, j - 1).transpose()));
      local.topRightCorner<3, 1>() = sk.bone_offset[j];
      h[j] = h[sk.parent_index[j]] * local;
    }
    for (int j = 0; j < kJointCount; ++j)
      out.row(t * kJointCount + j) = h[j].topRightCorner<3, 1>().transpose();
  }
  return out;
}

}  // namespace

TEST_CASE("rot6d identity") {
  Mat3<double> m = rot6d_to_matrix<double>(pack6(1, 0, 0, 0, 1, 0));
  CHECK((m - Mat3<double>::Identity()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rot6d 90 degree z rotation") {
  Mat3<double> m = rot6d_to_matrix<double>(pack6(0, 1, 0, -1, 0, 0));
  Mat3<double> want;
  want << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  CHECK((m - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rot6d orthonormalizes unnormalized inputs") {
  Mat3<double> m = rot6d_to_matrix<double>(pack6(2, 0, 0, 1, 3, 0));
  CHECK((m - Mat3<double>::Identity()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("rot6d scale invariance after orthonormalization") {
  Rng rng(17);
  for (int i = 0; i < 50; ++i) {
    Vec6<double> r = matrix_to_rot6d<double>(random_rotation(rng));
    Vec6<double> scaled = r;
    scaled.head<3>() *= rng.uniform(0.1, 5.0);
    scaled.tail<3>() *= rng.uniform(0.1, 5.0);
    Mat3<double> diff = rot6d_to_matrix<double>(r) - rot6d_to_matrix<double>(scaled);
    CHECK(diff.cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("rot6d degenerate inputs rejected") {
  CHECK_THROWS_WITH_AS(rot6d_to_matrix<double>(pack6(0, 0, 0, 0, 1, 0)),
                       doctest::Contains("near zero"), Error);
  CHECK_THROWS_AS(rot6d_to_matrix<double>(pack6(1, 0, 0, 2, 0, 0)), Error);
  try {
    rot6d_to_matrix<double>(pack6(1, 0, 0, 2, 0, 0));
  } catch (const Error& e) {
    CHECK(e.code() == "DegenerateInput");
  }
}

TEST_CASE("matrix_to_rot6d known values") {
  CHECK((matrix_to_rot6d<double>(Mat3<double>::Identity()) - pack6(1, 0, 0, 0, 1, 0)).norm() <
        1e-12);
  Mat3<double> flip;  // 180 degrees about x
  flip << 1, 0, 0, 0, -1, 0, 0, 0, -1;
  CHECK((matrix_to_rot6d<double>(flip) - pack6(1, 0, 0, 0, -1, 0)).norm() < 1e-12);
}

TEST_CASE("matrix_to_rot6d rejects non-rotations") {
  Mat3<double> bad = Mat3<double>::Identity() * 1.01;
  try {
    matrix_to_rot6d<double>(bad);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "NotARotation");
  }
  Mat3<double> reflect = Mat3<double>::Identity();
  reflect(2, 2) = -1;  // orthonormal but determinant -1
  CHECK_THROWS_AS(matrix_to_rot6d<double>(reflect), Error);
}

TEST_CASE("6d round trip over 1000 sampled rotations") {
  Rng rng(123);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    Mat3<double> r = random_rotation(rng);
    Mat3<double> back = rot6d_to_matrix<double>(matrix_to_rot6d<double>(r));
    worst = std::max(worst, (back - r).norm());
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("canonical skeleton shape") {
  Skeleton sk = canonical_skeleton();
  sk.validate();
  CHECK(sk.joint_count() == 23);
  CHECK(sk.joint_names[0] == "root");
  CHECK(sk.joint_names[6] == "head");
  CHECK(sk.joint_names[22] == "r_toe");
  CHECK(sk.parent_index[15] == 0);  // l_hip hangs off the root
}

TEST_CASE("skeleton validation rejects malformed trees") {
  Skeleton sk = canonical_skeleton();
  sk.parent_index[5] = 9;  // child before parent
  try {
    sk.validate();
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "SkeletonMismatch");
  }
  Skeleton small = canonical_skeleton();
  small.joint_names.pop_back();
  small.parent_index.pop_back();
  small.bone_offset.pop_back();
  CHECK_THROWS_AS(small.validate(), Error);
}

TEST_CASE("fk rest pose stacks bone offsets") {
  Skeleton sk = canonical_skeleton();
  MotionSequence m = rest_sequence(3);
  JointPositions jp = forward_kinematics(m, sk);
  Vec3<double> head(0, 0, 0.62);
  Vec3<double> l_wrist(0, 0.69, 0.45);  // collar hangs off the chest at z=0.40
  for (int t = 0; t < 3; ++t) {
    CHECK((jp.joint(t, 6).transpose() - head).norm() < 1e-12);
    CHECK((jp.joint(t, 10).transpose() - l_wrist).norm() < 1e-12);
    CHECK(jp.joint(t, 0).norm() < 1e-12);
  }
}

TEST_CASE("fk rotates child offsets by the accumulated parent rotation") {
  Skeleton sk = canonical_skeleton();
  MotionSequence m = rest_sequence(1);
  m.root_rot(0) = pack6(0, 1, 0, -1, 0, 0).transpose();  // 90 degrees about z
  JointPositions jp = forward_kinematics(m, sk);
  // l_wrist rest position (0,0.69,0.45) swings to (-0.69,0,0.45)
  CHECK((jp.joint(0, 10).transpose() - Vec3<double>(-0.69, 0, 0.45)).norm() < 1e-12);
}

TEST_CASE("fk matches homogeneous-transform oracle") {
  Skeleton sk = canonical_skeleton();
  Rng rng(31);
  for (int rep = 0; rep < 5; ++rep) {
    auto abs = random_absolute(rng, 60);
    MotionSequence m = derive_representation<double>(abs, 60.0);
    JointPositions jp = forward_kinematics(m, sk);
    auto oracle = fk_oracle(m, sk);
    CHECK((jp.p - oracle).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("integrate zero velocity holds position") {
  MotionSequence m = rest_sequence(10);
  m.initial_root_position = Vec3<double>(1, 2, 3);
  auto pos = integrate_root_velocity(m);
  for (int t = 0; t < 10; ++t)
    CHECK((pos.row(t).transpose() - Vec3<double>(1, 2, 3)).norm() < 1e-12);
}

TEST_CASE("integrate constant velocity accumulates one step per frame after the first") {
  MotionSequence m = rest_sequence(60);
  for (int t = 0; t < 60; ++t) m.root_vel(t) = Eigen::RowVector3d(0.01, 0, 0);
  auto pos = integrate_root_velocity(m);
  // frame 0 is the anchor, frames 1..59 each add one step
  CHECK(pos(59, 0) == doctest::Approx(0.59).epsilon(1e-12));
  CHECK(pos(0, 0) == doctest::Approx(0.0));
}

TEST_CASE("integrate applies the initial frame rotation to stored velocities") {
  MotionSequence m = rest_sequence(2);
  m.initial_root_rotation = rot6d_to_matrix<double>(pack6(0, 1, 0, -1, 0, 0));
  m.root_vel(1) = Eigen::RowVector3d(1, 0, 0);
  auto pos = integrate_root_velocity(m);
  CHECK((pos.row(1).transpose() - Vec3<double>(0, 1, 0)).norm() < 1e-12);
}

TEST_CASE("derive constant pose gives identity velocity channels") {
  Rng rng(5);
  std::vector<AbsolutePose> abs(4);
  Mat3<double> root = random_rotation(rng);
  for (auto& a : abs) {
    a.root_position = Vec3<double>(0.5, 0.25, 1.0);
    a.root_rotation = root;
    for (int j = 0; j < kNonRootJoints; ++j) a.joint_rotations[j] = Mat3<double>::Identity();
  }
  MotionSequence m = derive_representation<double>(abs, 30.0);
  for (int t = 0; t < 4; ++t) {
    CHECK(m.root_vel(t).norm() < 1e-12);
    CHECK((m.root_rot_vel(t).transpose() - identity_rot6d<double>()).norm() < 1e-12);
    for (int j = 0; j < kNonRootJoints; ++j)
      CHECK((m.joint_rot_vel(t, j).transpose() - identity_rot6d<double>()).norm() < 1e-12);
  }
}

TEST_CASE("derive uniform spin stores the per-frame increment in every velocity slot") {
  const double step = M_PI / 180.0;  // one degree per frame
  std::vector<AbsolutePose> abs(20);
  for (int t = 0; t < 20; ++t) {
    abs[t].root_position = Vec3<double>::Zero();
    abs[t].root_rotation = Mat3<double>::Identity();
    for (int j = 0; j < kNonRootJoints; ++j) abs[t].joint_rotations[j] = Mat3<double>::Identity();
    abs[t].joint_rotations[3] =
        Eigen::AngleAxisd(step * t, Vec3<double>::UnitY()).toRotationMatrix();
  }
  MotionSequence m = derive_representation<double>(abs, 60.0);
  Vec6<double> want =
      matrix_to_rot6d<double>(Eigen::AngleAxisd(step, Vec3<double>::UnitY()).toRotationMatrix());
  for (int t = 0; t < 20; ++t)
    CHECK((m.joint_rot_vel(t, 3).transpose() - want).norm() < 1e-10);
}

TEST_CASE("derive then reconstruct reproduces absolute poses") {
  Rng rng(77);
  auto abs = random_absolute(rng, 40);
  MotionSequence m = derive_representation<double>(abs, 60.0);
  auto back = absolute_poses(m);
  REQUIRE(back.size() == abs.size());
  double worst = 0;
  for (size_t t = 0; t < abs.size(); ++t) {
    worst = std::max(worst, (back[t].root_position - abs[t].root_position).norm());
    worst = std::max(worst, (back[t].root_rotation - abs[t].root_rotation).norm());
    for (int j = 0; j < kNonRootJoints; ++j)
      worst = std::max(worst, (back[t].joint_rotations[j] - abs[t].joint_rotations[j]).norm());
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("derive rejects single-frame input") {
  std::vector<AbsolutePose> abs(1);
  try {
    derive_representation<double>(abs, 60.0);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "TooShort");
  }
}

TEST_CASE("yaw augment by zero is the identity") {
  Rng rng(9);
  auto abs = random_absolute(rng, 8);
  MotionSequence m = derive_representation<double>(abs, 60.0);
  MotionSequence m2 = yaw_augment(m, 0.0);
  CHECK((m2.frames - m.frames).cwiseAbs().maxCoeff() == 0.0);
  CHECK((m2.initial_root_rotation - m.initial_root_rotation).norm() < 1e-15);
}

TEST_CASE("fk commutes with yaw augmentation") {
  Skeleton sk = canonical_skeleton();
  Rng rng(13);
  auto abs = random_absolute(rng, 30);
  MotionSequence m = derive_representation<double>(abs, 60.0);
  const double angle = M_PI / 2;
  JointPositions before = forward_kinematics(m, sk);
  JointPositions after = forward_kinematics(yaw_augment(m, angle), sk);
  Mat3<double> rz = yaw_matrix(angle);
  double worst = 0;
  for (int64_t i = 0; i < before.p.rows(); ++i) {
    Vec3<double> rotated = rz * before.p.row(i).transpose();
    worst = std::max(worst, (after.p.row(i).transpose() - rotated).norm());
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("random rotation augment is deterministic in the seed") {
  Rng rng(21);
  auto abs = random_absolute(rng, 6);
  MotionSequence m = derive_representation<double>(abs, 60.0);
  MotionSequence a = random_rotation_augment(m, 404);
  MotionSequence b = random_rotation_augment(m, 404);
  CHECK((a.initial_root_rotation - b.initial_root_rotation).norm() == 0.0);
  MotionSequence c = random_rotation_augment(m, 405);
  CHECK((a.initial_root_rotation - c.initial_root_rotation).norm() > 1e-6);
}

TEST_CASE("sequence validation rejects bad metadata") {
  MotionSequence empty;
  empty.frames.resize(0, kFrameDim);
  CHECK_THROWS_AS(empty.validate(), Error);
  MotionSequence m = rest_sequence(2);
  m.fps = 0;
  CHECK_THROWS_AS(m.validate(), Error);
  MotionSequence m2 = rest_sequence(2);
  m2.initial_root_rotation *= 1.01;
  try {
    m2.validate();
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "NotARotation");
  }
}
