#include "motok/io.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace motok::io {
namespace {

void io_fail(const std::string& path, const std::string& what) {
  throw Error(ErrorKind::kIo, "IoFailure", path + ": " + what);
}

struct Writer {
  std::ofstream f;
  std::string path;
  explicit Writer(const std::string& p) : f(p, std::ios::binary), path(p) {
    if (!f) io_fail(p, "cannot open for writing");
  }
  void bytes(const void* p, size_t n) { f.write(static_cast<const char*>(p), n); }
  void u32(uint32_t v) { bytes(&v, 4); }
  void f32(float v) { bytes(&v, 4); }
  void magic(const char* m) { bytes(m, 5); }
  void close() {
    f.close();
    if (!f) io_fail(path, "write failed");
  }
};

struct Reader {
  std::ifstream f;
  std::string path;
  explicit Reader(const std::string& p) : f(p, std::ios::binary), path(p) {
    if (!f) io_fail(p, "cannot open for reading");
  }
  void bytes(void* p, size_t n) {
    f.read(static_cast<char*>(p), n);
    if (static_cast<size_t>(f.gcount()) != n) io_fail(path, "truncated file");
  }
  uint32_t u32() {
    uint32_t v;
    bytes(&v, 4);
    return v;
  }
  float f32() {
    float v;
    bytes(&v, 4);
    return v;
  }
  void expect_magic(const char* m) {
    char got[5];
    bytes(got, 5);
    if (std::memcmp(got, m, 5) != 0) io_fail(path, std::string("bad magic, expected ") + m);
  }
};

}  // namespace

void write_motion(const std::string& path, const kin::MotionSequenceT<float>& m) {
  m.validate();
  Writer w(path);
  w.magic("MSEQ1");
  w.u32(static_cast<uint32_t>(kin::kJointCount));
  w.u32(static_cast<uint32_t>(m.frame_count()));
  w.f32(m.fps);
  for (int i = 0; i < 3; ++i) w.f32(m.initial_root_position[i]);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) w.f32(m.initial_root_rotation(r, c));
  w.bytes(m.frames.data(), sizeof(float) * m.frames.size());
  w.close();
}

kin::MotionSequenceT<float> read_motion(const std::string& path) {
  Reader r(path);
  r.expect_magic("MSEQ1");
  const uint32_t joints = r.u32();
  if (joints != kin::kJointCount) io_fail(path, "unsupported joint count");
  const uint32_t frames = r.u32();
  if (frames < 1) io_fail(path, "empty sequence");
  kin::MotionSequenceT<float> m;
  m.fps = r.f32();
  for (int i = 0; i < 3; ++i) m.initial_root_position[i] = r.f32();
  for (int rr = 0; rr < 3; ++rr)
    for (int c = 0; c < 3; ++c) m.initial_root_rotation(rr, c) = r.f32();
  m.frames.resize(frames, kin::kFrameDim);
  r.bytes(m.frames.data(), sizeof(float) * m.frames.size());
  m.validate();
  return m;
}

void write_tokens(const std::string& path, const TokenStream& ts) {
  ts.validate();
  Writer w(path);
  w.magic("MTOK1");
  w.u32(static_cast<uint32_t>(ts.codebook_count));
  w.u32(static_cast<uint32_t>(ts.codebook_size));
  w.u32(static_cast<uint32_t>(ts.downsample));
  w.u32(static_cast<uint32_t>(ts.tokens.size()));
  w.f32(ts.source_fps);
  w.bytes(ts.tokens.data(), sizeof(uint32_t) * ts.tokens.size());
  w.close();
}

TokenStream read_tokens(const std::string& path) {
  Reader r(path);
  r.expect_magic("MTOK1");
  TokenStream ts;
  ts.codebook_count = static_cast<int>(r.u32());
  ts.codebook_size = static_cast<int>(r.u32());
  ts.downsample = static_cast<int>(r.u32());
  const uint32_t count = r.u32();
  ts.source_fps = r.f32();
  ts.tokens.resize(count);
  if (count) r.bytes(ts.tokens.data(), sizeof(uint32_t) * count);
  ts.validate();
  return ts;
}

void write_video_track(const std::string& path, const VideoTrack& v) {
  if (v.dim < 1 || v.embeddings.cols() != v.dim)
    fail_domain("BadVideoTrack", "dim mismatch");
  Writer w(path);
  w.magic("VEMB1");
  w.u32(static_cast<uint32_t>(v.dim));
  w.u32(static_cast<uint32_t>(v.embeddings.rows()));
  w.bytes(v.embeddings.data(), sizeof(float) * v.embeddings.size());
  w.close();
}

VideoTrack read_video_track(const std::string& path) {
  Reader r(path);
  r.expect_magic("VEMB1");
  VideoTrack v;
  v.dim = static_cast<int>(r.u32());
  const uint32_t frames = r.u32();
  if (v.dim < 1) io_fail(path, "bad embedding dim");
  v.embeddings.resize(frames, v.dim);
  r.bytes(v.embeddings.data(), sizeof(float) * v.embeddings.size());
  return v;
}

void write_skeleton(const std::string& path, const kin::SkeletonT<double>& sk) {
  sk.validate();
  std::ofstream f(path);
  if (!f) io_fail(path, "cannot open for writing");
  f.precision(17);
  for (int j = 0; j < sk.joint_count(); ++j) {
    f << sk.joint_names[j] << ' ' << sk.parent_index[j] << ' ' << sk.bone_offset[j][0] << ' '
      << sk.bone_offset[j][1] << ' ' << sk.bone_offset[j][2] << '\n';
  }
  if (!f) io_fail(path, "write failed");
}

kin::SkeletonT<double> read_skeleton(const std::string& path) {
  std::ifstream f(path);
  if (!f) io_fail(path, "cannot open for reading");
  kin::SkeletonT<double> sk;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string name;
    int parent;
    double x, y, z;
    if (!(ss >> name >> parent >> x >> y >> z)) io_fail(path, "malformed skeleton line: " + line);
    sk.joint_names.push_back(name);
    sk.parent_index.push_back(parent);
    sk.bone_offset.push_back(kin::Vec3<double>(x, y, z));
  }
  sk.validate();
  return sk;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) io_fail(path, "cannot open for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) io_fail(path, "cannot open for writing");
  f << content;
  if (!f) io_fail(path, "write failed");
}

}  // namespace motok::io
