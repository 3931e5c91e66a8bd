#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "motok/io.hpp"

using namespace motok;

namespace {

std::filesystem::path tmp_path(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / "motok_io_test";
  std::filesystem::create_directories(dir);
  return dir / name;
}

kin::MotionSequenceT<float> sample_motion(int frames, uint64_t seed) {
  Rng rng(seed);
  kin::MotionSequenceT<float> m;
  m.frames.resize(frames, kin::kFrameDim);
  for (int t = 0; t < frames; ++t)
    for (int c = 0; c < kin::kFrameDim; ++c) m.frames(t, c) = float(rng.normal());
  m.fps = 60.0f;
  m.initial_root_position = Eigen::Vector3f(0.1f, -0.2f, 0.9f);
  m.initial_root_rotation = Eigen::Matrix3f::Identity();
  return m;
}

}  // namespace

TEST_CASE("motion round trip is bit exact") {
  auto m = sample_motion(17, 5);
  auto path = tmp_path("a.mseq");
  io::write_motion(path.string(), m);
  auto back = io::read_motion(path.string());
  CHECK(back.frame_count() == 17);
  CHECK(back.fps == m.fps);
  CHECK((back.frames - m.frames).cwiseAbs().maxCoeff() == 0.0f);
  CHECK((back.initial_root_position - m.initial_root_position).norm() == 0.0f);
  CHECK((back.initial_root_rotation - m.initial_root_rotation).norm() == 0.0f);
}

TEST_CASE("motion reader rejects bad magic and truncation") {
  auto path = tmp_path("bad.mseq");
  io::write_text_file(path.string(), "XXXXXjunk");
  CHECK_THROWS_AS(io::read_motion(path.string()), Error);

  auto m = sample_motion(4, 2);
  auto good = tmp_path("trunc.mseq");
  io::write_motion(good.string(), m);
  auto bytes = io::read_text_file(good.string());
  io::write_text_file(good.string(), bytes.substr(0, bytes.size() / 2));
  try {
    io::read_motion(good.string());
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kIo);
  }
}

TEST_CASE("token stream round trip") {
  TokenStream ts;
  ts.codebook_count = 2;
  ts.codebook_size = 256;
  ts.downsample = 4;
  ts.source_fps = 60.0f;
  ts.tokens = {5, 250, 0, 1, 17, 255};
  auto path = tmp_path("a.mtok");
  io::write_tokens(path.string(), ts);
  auto back = io::read_tokens(path.string());
  CHECK(back.codebook_count == 2);
  CHECK(back.codebook_size == 256);
  CHECK(back.downsample == 4);
  CHECK(back.tokens == ts.tokens);
  CHECK(back.frame_count() == 3);
  CHECK(back.at(1, 1) == 1);
}

TEST_CASE("token stream validation") {
  TokenStream ts;
  ts.codebook_count = 2;
  ts.codebook_size = 16;
  ts.downsample = 4;
  ts.tokens = {1, 2, 3};  // not a multiple of N
  CHECK_THROWS_AS(ts.validate(), Error);
  ts.tokens = {1, 99};  // out of range
  CHECK_THROWS_AS(ts.validate(), Error);
}

TEST_CASE("video track round trip") {
  io::VideoTrack v;
  v.dim = 8;
  v.embeddings.resize(5, 8);
  Rng rng(3);
  for (int i = 0; i < v.embeddings.rows(); ++i)
    for (int j = 0; j < 8; ++j) v.embeddings(i, j) = float(rng.normal());
  auto path = tmp_path("a.vemb");
  io::write_video_track(path.string(), v);
  auto back = io::read_video_track(path.string());
  CHECK(back.dim == 8);
  CHECK(back.frame_count() == 5);
  CHECK((back.embeddings - v.embeddings).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("skeleton text round trip") {
  auto sk = kin::canonical_skeleton();
  auto path = tmp_path("a.skel");
  io::write_skeleton(path.string(), sk);
  auto back = io::read_skeleton(path.string());
  CHECK(back.joint_names == sk.joint_names);
  CHECK(back.parent_index == sk.parent_index);
  for (int j = 0; j < sk.joint_count(); ++j)
    CHECK((back.bone_offset[j] - sk.bone_offset[j]).norm() == 0.0);
}

TEST_CASE("missing file raises an io error") {
  try {
    io::read_motion("/nonexistent/nope.mseq");
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kIo);
  }
}
