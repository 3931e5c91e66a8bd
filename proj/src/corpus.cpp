#include "motok/corpus.hpp"

#include <Eigen/Geometry>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "motok/instruct.hpp"

namespace motok::corpus {

namespace {

constexpr double kHipHeight = 0.95;

// joint_rotations channel indices (skeleton joint minus one)
constexpr int kSpine1 = 0, kSpine2 = 1, kSpine3 = 2, kNeck = 4;
constexpr int kLShoulder = 7, kRShoulder = 11, kRElbow = 12;
constexpr int kLHip = 14, kLKnee = 15, kLAnkle = 16;
constexpr int kRHip = 18, kRKnee = 19, kRAnkle = 20;

double deg(double d) { return d * M_PI / 180.0; }

kin::Mat3<double> rx(double a) {
  return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitX()).toRotationMatrix();
}
kin::Mat3<double> ry(double a) {
  return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitY()).toRotationMatrix();
}
kin::Mat3<double> rz(double a) {
  return Eigen::AngleAxisd(a, Eigen::Vector3d::UnitZ()).toRotationMatrix();
}

double smoothstep(double u) {
  u = std::clamp(u, 0.0, 1.0);
  return u * u * (3.0 - 2.0 * u);
}

// Every template opens with "a person" and names the scene, so candidate
// and reference narrations for one clip always share enough low-order
// n-grams for smoothed BLEU orders to stay monotone.
const char* const kNarrations[kClassCount][3] = {
    {"a person walks forward through the corridor at a steady pace",
     "a person strolls along the corridor swinging their arms",
     "a person paces down the corridor with even steps"},
    {"a person performs a deep squat in the gym",
     "a person bends their knees into a low squat at the gym",
     "a person squats down in the gym and holds the position"},
    {"a person sits down on a chair in the office",
     "a person lowers themselves onto an office chair",
     "a person takes a seat at the office desk"},
    {"a person waves their right hand by the doorway",
     "a person stands at the doorway waving hello",
     "a person greets with a friendly wave near the doorway"},
    {"a person bends forward at the waist in the workshop",
     "a person leans down to inspect the workshop floor",
     "a person stoops forward over the workshop bench"},
    {"a person reaches up toward a high shelf",
     "a person stretches their right arm to the top shelf",
     "a person extends an arm to grab something from the shelf"}};

void check_params(const ClipParams& p, int frames, double fps) {
  if (frames < 8 || frames % 4 != 0)
    fail_domain("BadParams", "frames must be a multiple of 4, at least 8");
  if (!(fps > 0)) fail_domain("BadParams", "fps must be positive");
  if (!(p.cadence > 0) || p.cadence > 4) fail_domain("BadParams", "cadence out of (0, 4]");
  if (p.amplitude < 0 || p.amplitude > 1.5) fail_domain("BadParams", "amplitude out of [0, 1.5]");
  if (std::abs(p.turn_rate) > 2) fail_domain("BadParams", "turn rate out of [-2, 2]");
}

/// Sit and squat share this builder so everything except the leg channels
/// comes out identical for a given seed.
void crouch_pose(kin::AbsolutePoseT<double>& a, double s, double amp, bool sitting) {
  a.root_position.z() = kHipHeight - 0.25 * amp * s;
  for (int sp : {kSpine1, kSpine2, kSpine3}) a.joint_rotations[sp] = ry(-deg(8) * amp * s);
  a.joint_rotations[kLShoulder] = ry(-deg(25) * amp * s);
  a.joint_rotations[kRShoulder] = ry(-deg(25) * amp * s);
  if (sitting) {
    for (int h : {kLHip, kRHip}) a.joint_rotations[h] = ry(-deg(85) * amp * s);
    for (int k : {kLKnee, kRKnee}) a.joint_rotations[k] = ry(deg(85) * amp * s);
  } else {
    for (int h : {kLHip, kRHip}) a.joint_rotations[h] = ry(-deg(50) * amp * s);
    for (int k : {kLKnee, kRKnee}) a.joint_rotations[k] = ry(deg(100) * amp * s);
    for (int an : {kLAnkle, kRAnkle}) a.joint_rotations[an] = ry(-deg(50) * amp * s);
  }
}

std::vector<kin::AbsolutePose> build_poses(MotionClass cls, const ClipParams& p, int frames,
                                           double fps, double phase, double amp) {
  std::vector<kin::AbsolutePose> abs(frames);
  double walk_x = 0;
  double walk_y = 0;
  for (int t = 0; t < frames; ++t) {
    auto& a = abs[t];
    a.root_position = kin::Vec3<double>(0, 0, kHipHeight);
    const double tt = double(t) / fps;
    const double phi = 2.0 * M_PI * p.cadence * tt + phase;
    switch (cls) {
      case MotionClass::kWalk: {
        const double heading = p.turn_rate * tt;
        if (t > 0) {
          walk_x += 0.7 * amp / fps * std::cos(heading);
          walk_y += 0.7 * amp / fps * std::sin(heading);
        }
        a.root_position = kin::Vec3<double>(walk_x, walk_y,
                                            kHipHeight + 0.03 * amp * std::sin(phi));
        a.root_rotation = rz(heading);
        a.joint_rotations[kLHip] = ry(-0.5 * amp * std::sin(phi));
        a.joint_rotations[kRHip] = ry(0.5 * amp * std::sin(phi));
        a.joint_rotations[kLKnee] = ry(0.3 * amp * (1.0 - std::cos(phi)));
        a.joint_rotations[kRKnee] = ry(0.3 * amp * (1.0 + std::cos(phi)));
        a.joint_rotations[kLAnkle] = ry(0.2 * amp * std::sin(phi));
        a.joint_rotations[kRAnkle] = ry(-0.2 * amp * std::sin(phi));
        a.joint_rotations[kLShoulder] = ry(0.4 * amp * std::sin(phi));
        a.joint_rotations[kRShoulder] = ry(-0.4 * amp * std::sin(phi));
        break;
      }
      case MotionClass::kSquat:
      case MotionClass::kSit:
        crouch_pose(a, smoothstep(2.0 * p.cadence * tt), amp, cls == MotionClass::kSit);
        break;
      case MotionClass::kWave:
        a.joint_rotations[kRShoulder] = rx(-deg(110) * amp);
        a.joint_rotations[kRElbow] = rz(deg(25) * amp * std::sin(phi));
        a.joint_rotations[kSpine2] = rz(deg(3) * amp * std::sin(phi));
        break;
      case MotionClass::kBend: {
        const double s = (1.0 - std::cos(2.0 * M_PI * std::min(p.cadence * tt, 1.0))) / 2.0;
        a.root_position.z() = kHipHeight - 0.05 * amp * s;
        for (int sp : {kSpine1, kSpine2, kSpine3}) a.joint_rotations[sp] = ry(-deg(20) * amp * s);
        a.joint_rotations[kNeck] = ry(-deg(10) * amp * s);
        a.joint_rotations[kLShoulder] = ry(-deg(15) * amp * s);
        a.joint_rotations[kRShoulder] = ry(-deg(15) * amp * s);
        break;
      }
      case MotionClass::kReach: {
        const double s = smoothstep(2.0 * p.cadence * tt);
        a.root_position.z() = kHipHeight + 0.02 * amp * s;
        a.joint_rotations[kRShoulder] = rx(-deg(120) * amp * s);
        a.joint_rotations[kRElbow] = rx(-deg(10) * amp * s);
        a.joint_rotations[kSpine3] = rz(deg(10) * amp * s);
        break;
      }
    }
  }
  return abs;
}

uint64_t sub_seed(uint64_t seed, std::string_view tag) { return fnv1a64(seed, fnv1a64(tag)); }

void check_narration(const std::string& n) {
  if (n.empty()) fail_domain("BadManifest", "empty narration");
  if (n.find('\t') != std::string::npos || n.find('\n') != std::string::npos)
    fail_domain("BadManifest", "narration must not contain tabs or newlines");
}

}  // namespace

const char* class_name(MotionClass cls) {
  switch (cls) {
    case MotionClass::kWalk: return "walk";
    case MotionClass::kSquat: return "squat";
    case MotionClass::kSit: return "sit";
    case MotionClass::kWave: return "wave";
    case MotionClass::kBend: return "bend";
    case MotionClass::kReach: return "reach";
  }
  fail(ErrorKind::kConfig, "ConfigInvalid", "unknown motion class");
}

MotionClass parse_class(const std::string& name) {
  for (int i = 0; i < kClassCount; ++i)
    if (name == class_name(static_cast<MotionClass>(i))) return static_cast<MotionClass>(i);
  fail(ErrorKind::kConfig, "ConfigInvalid", "unknown motion class: " + name);
}

const char* scene_name(MotionClass cls) {
  switch (cls) {
    case MotionClass::kWalk: return "corridor";
    case MotionClass::kSquat: return "gym";
    case MotionClass::kSit: return "office";
    case MotionClass::kWave: return "doorway";
    case MotionClass::kBend: return "workshop";
    case MotionClass::kReach: return "shelf";
  }
  fail(ErrorKind::kConfig, "ConfigInvalid", "unknown motion class");
}

Clip generate_clip(MotionClass cls, const ClipParams& p, int frames, double fps, uint64_t seed) {
  check_params(p, frames, fps);
  Rng rng(seed);
  const double yaw0 = rng.uniform(-M_PI, M_PI);
  const double x0 = rng.uniform(-2.0, 2.0);
  const double y0 = rng.uniform(-2.0, 2.0);
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const double amp = p.amplitude * rng.uniform(0.9, 1.1);
  const int tmpl = static_cast<int>(rng.uniform_int(0, 2));

  auto abs = build_poses(cls, p, frames, fps, phase, amp);
  const kin::Mat3<double> place = rz(yaw0);
  const kin::Vec3<double> origin(x0, y0, 0.0);
  for (auto& a : abs) {
    a.root_position = origin + place * a.root_position;
    a.root_rotation = place * a.root_rotation;
  }

  Clip clip;
  clip.motion = io::to_float(kin::derive_representation(abs, fps));
  clip.narration = kNarrations[static_cast<int>(cls)][tmpl];
  clip.scene = scene_name(cls);
  clip.label = cls;
  return clip;
}

std::pair<Clip, Clip> ambiguous_pair(const ClipParams& p, int frames, double fps, uint64_t seed) {
  return {generate_clip(MotionClass::kSit, p, frames, fps, seed),
          generate_clip(MotionClass::kSquat, p, frames, fps, seed)};
}

Eigen::VectorXf scene_anchor(const std::string& scene, int dim) {
  if (dim < 1) fail(ErrorKind::kConfig, "ConfigInvalid", "anchor dim must be positive");
  Rng rng(fnv1a64(scene));
  Eigen::VectorXf a(dim);
  for (int i = 0; i < dim; ++i) a[i] = float(rng.normal());
  a.normalize();
  return a;
}

io::VideoTrack make_video_track(const std::string& scene, int rows, int dim, uint64_t seed) {
  if (rows < 1) fail(ErrorKind::kConfig, "ConfigInvalid", "video track needs at least one row");
  Eigen::VectorXf anchor = scene_anchor(scene, dim);
  Rng rng(seed);
  io::VideoTrack v;
  v.dim = dim;
  v.embeddings.resize(rows, dim);
  for (int t = 0; t < rows; ++t)
    for (int i = 0; i < dim; ++i) v.embeddings(t, i) = anchor[i] + float(rng.normal(0.0, 0.05));
  return v;
}

std::string manifest_line(const ManifestRow& row) {
  check_narration(row.narration);
  for (const std::string* f : {&row.task, &row.cls, &row.scene, &row.sensor, &row.motion_path,
                               &row.video_path})
    if (f->empty() || f->find('\t') != std::string::npos || f->find('\n') != std::string::npos)
      fail_domain("BadManifest", "manifest fields must be non-empty and tab-free");
  std::ostringstream os;
  os << row.task << '\t' << row.cls << '\t' << row.scene << '\t' << row.sensor << '\t'
     << row.motion_path << '\t' << row.video_path << '\t' << row.narration;
  return os.str();
}

ManifestRow parse_manifest_line(const std::string& line) {
  std::vector<std::string> fields;
  size_t start = 0;
  while (true) {
    size_t tab = line.find('\t', start);
    fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  if (fields.size() != 7)
    fail(ErrorKind::kIo, "BadManifest",
         "expected 7 tab-separated fields, got " + std::to_string(fields.size()));
  ManifestRow row;
  row.task = fields[0];
  row.cls = fields[1];
  row.scene = fields[2];
  row.sensor = fields[3];
  row.motion_path = fields[4];
  row.video_path = fields[5];
  row.narration = fields[6];
  if (row.narration.empty()) fail(ErrorKind::kIo, "BadManifest", "empty narration field");
  return row;
}

void write_manifest(const std::string& path, const std::vector<ManifestRow>& rows) {
  std::ostringstream os;
  for (const auto& row : rows) os << manifest_line(row) << '\n';
  io::write_text_file(path, os.str());
}

std::vector<ManifestRow> read_manifest(const std::string& path) {
  std::istringstream is(io::read_text_file(path));
  std::vector<ManifestRow> rows;
  std::string line;
  while (std::getline(is, line))
    if (!line.empty()) rows.push_back(parse_manifest_line(line));
  return rows;
}

void CorpusConfig::validate() const {
  if (root.empty()) fail(ErrorKind::kConfig, "ConfigInvalid", "corpus root must be set");
  if (train_clips < 1 || test_clips < 0)
    fail(ErrorKind::kConfig, "ConfigInvalid", "clip counts must be positive");
  if (frames < 8 || frames % 4 != 0)
    fail(ErrorKind::kConfig, "ConfigInvalid", "frames must be a multiple of 4, at least 8");
  if (!(fps > 0)) fail(ErrorKind::kConfig, "ConfigInvalid", "fps must be positive");
  if (downsample < 1 || frames % downsample != 0)
    fail(ErrorKind::kConfig, "ConfigInvalid", "downsample must divide frames");
  if (video_dim < 1) fail(ErrorKind::kConfig, "ConfigInvalid", "video dim must be positive");
}

BuildResult build_corpus(const CorpusConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  BuildResult out;
  out.train_count = cfg.train_clips;
  out.test_count = cfg.test_clips;

  for (int split = 0; split < 2; ++split) {
    const bool train = split == 0;
    const int count = train ? cfg.train_clips : cfg.test_clips;
    const std::string split_name = train ? "train" : "test";
    fs::create_directories(fs::path(cfg.root) / split_name);

    std::vector<ManifestRow> rows;
    for (int i = 0; i < count; ++i) {
      const uint64_t clip_seed = cfg.seed + uint64_t(train ? i : cfg.train_clips + i);
      const auto cls = static_cast<MotionClass>(i % kClassCount);

      Rng pr(sub_seed(clip_seed, "params"));
      ClipParams p;
      p.cadence = pr.uniform(0.8, 1.3);
      p.amplitude = pr.uniform(0.7, 1.2);
      p.turn_rate = cls == MotionClass::kWalk ? pr.uniform(-0.5, 0.5) : 0.0;

      Clip clip = generate_clip(cls, p, cfg.frames, cfg.fps, clip_seed);
      io::VideoTrack video = make_video_track(clip.scene, cfg.frames / cfg.downsample,
                                              cfg.video_dim, sub_seed(clip_seed, "video"));

      char stem[32];
      std::snprintf(stem, sizeof stem, "clip_%05d", i);
      const std::string rel = split_name + "/" + stem;
      io::write_motion(cfg.root + "/" + rel + ".mseq", clip.motion);
      io::write_video_track(cfg.root + "/" + rel + ".vemb", video);
      io::write_text_file(cfg.root + "/" + rel + ".txt", clip.narration + "\n");

      ManifestRow row;
      row.task = instruct::task_name(static_cast<instruct::Task>(i % instruct::kTaskCount));
      row.cls = class_name(cls);
      row.scene = clip.scene;
      row.sensor = i % 4 == 3 ? "one_point" : "three_points";
      row.motion_path = rel + ".mseq";
      row.video_path = rel + ".vemb";
      row.narration = clip.narration;
      rows.push_back(std::move(row));
    }

    const std::string manifest = cfg.root + "/" + split_name + "_manifest.txt";
    write_manifest(manifest, rows);
    (train ? out.train_manifest : out.test_manifest) = manifest;
  }
  return out;
}

}  // namespace motok::corpus
