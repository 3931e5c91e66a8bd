#pragma once

#include <string>
#include <utility>
#include <vector>

#include "motok/io.hpp"
#include "motok/kinematics.hpp"

// Procedural clip generator: six labeled motion classes with templated
// narrations, scene-anchored video embedding stubs, and manifest plumbing.

namespace motok::corpus {

enum class MotionClass { kWalk = 0, kSquat, kSit, kWave, kBend, kReach };
inline constexpr int kClassCount = 6;

const char* class_name(MotionClass cls);
MotionClass parse_class(const std::string& name);
const char* scene_name(MotionClass cls);

struct ClipParams {
  double cadence = 1.0;    // Hz; cycle or descent rate
  double amplitude = 1.0;  // action depth scale, 0 stands still
  double turn_rate = 0.0;  // rad/s heading drift, walking only
};

struct Clip {
  kin::MotionSequenceT<float> motion;
  std::string narration;
  std::string scene;
  MotionClass label = MotionClass::kWalk;
};

/// Deterministic per seed. Frames must be a positive multiple of four so
/// clips line up with the token rate.
Clip generate_clip(MotionClass cls, const ClipParams& p, int frames, double fps, uint64_t seed);

/// Sit and squat built from one seed: root and upper-body channels (and so
/// the derived sensor streams) are bitwise identical, only the legs differ.
std::pair<Clip, Clip> ambiguous_pair(const ClipParams& p, int frames, double fps, uint64_t seed);

/// Unit-norm embedding anchor hashed from the scene label.
Eigen::VectorXf scene_anchor(const std::string& scene, int dim);

io::VideoTrack make_video_track(const std::string& scene, int rows, int dim, uint64_t seed);

struct ManifestRow {
  std::string task;
  std::string cls;
  std::string scene;
  std::string sensor;
  std::string motion_path;  // relative to the corpus root
  std::string video_path;
  std::string narration;
};

std::string manifest_line(const ManifestRow& row);
ManifestRow parse_manifest_line(const std::string& line);
void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows);
std::vector<ManifestRow> read_manifest(const std::string& path);

struct CorpusConfig {
  std::string root;
  int train_clips = 256;
  int test_clips = 64;
  int frames = 60;
  double fps = 60.0;
  int downsample = 4;  // video rows per clip = frames / downsample
  int video_dim = 512;
  uint64_t seed = 1;

  void validate() const;
};

struct BuildResult {
  std::string train_manifest, test_manifest;
  int train_count = 0, test_count = 0;
};

/// Writes .mseq/.vemb/.txt files plus one manifest per split. Splits take
/// disjoint seed ranges; classes and tasks rotate round-robin.
BuildResult build_corpus(const CorpusConfig& cfg);

}  // namespace motok::corpus
