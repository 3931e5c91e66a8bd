#pragma once

#include <string>
#include <vector>

#include <Eigen/Dense>

#include "motok/kinematics.hpp"
#include "motok/token_stream.hpp"

// Little-endian binary containers for motion sequences (.mseq), token
// streams (.mtok), and video embedding tracks (.vemb), plus the plain-text
// skeleton format (one "name parent ox oy oz" line per joint).

namespace motok::io {

void write_motion(const std::string& path, const kin::MotionSequenceT<float>& m);
kin::MotionSequenceT<float> read_motion(const std::string& path);

void write_tokens(const std::string& path, const TokenStream& ts);
TokenStream read_tokens(const std::string& path);

struct VideoTrack {
  int dim = 0;
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> embeddings;  // frames x dim
  int64_t frame_count() const { return embeddings.rows(); }
};

void write_video_track(const std::string& path, const VideoTrack& v);
VideoTrack read_video_track(const std::string& path);

void write_skeleton(const std::string& path, const kin::SkeletonT<double>& sk);
kin::SkeletonT<double> read_skeleton(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

template <typename S>
kin::MotionSequenceT<float> to_float(const kin::MotionSequenceT<S>& m) {
  kin::MotionSequenceT<float> out;
  out.frames = m.frames.template cast<float>();
  out.fps = static_cast<float>(m.fps);
  out.skeleton_ref = m.skeleton_ref;
  out.initial_root_position = m.initial_root_position.template cast<float>();
  out.initial_root_rotation = m.initial_root_rotation.template cast<float>();
  return out;
}

template <typename S>
kin::MotionSequenceT<double> to_double(const kin::MotionSequenceT<S>& m) {
  kin::MotionSequenceT<double> out;
  out.frames = m.frames.template cast<double>();
  out.fps = static_cast<double>(m.fps);
  out.skeleton_ref = m.skeleton_ref;
  out.initial_root_position = m.initial_root_position.template cast<double>();
  out.initial_root_rotation = m.initial_root_rotation.template cast<double>();
  return out;
}

}  // namespace motok::io
