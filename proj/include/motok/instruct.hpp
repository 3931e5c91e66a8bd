#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "motok/io.hpp"
#include "motok/kinematics.hpp"
#include "motok/lm.hpp"
#include "motok/tensor.hpp"

// Multimodal instruction tuning. Sensor and video conditions are encoded to
// language-model width and spliced between text tokens as soft positions;
// supervision covers the output span only. Four tasks share one model:
// tracking, understanding, motion-to-text, and text-to-motion.

namespace motok::instruct {

enum class Task { kTracking, kUnderstanding, kM2t, kT2m };
inline constexpr int kTaskCount = 4;
const char* task_name(Task t);
Task parse_task(const std::string& name);

enum class SensorKind { kThreePoints, kOnePoint };
const char* sensor_kind_name(SensorKind k);
SensorKind parse_sensor_kind(const std::string& name);

/// Per tracked point and frame: position(3), velocity(3), rotation 6D(6),
/// angular velocity 6D(6). Three-points order is head, l_wrist, r_wrist.
struct SensorStream {
  SensorKind kind = SensorKind::kThreePoints;
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> frames;  // T x width
  float fps = 60.0f;

  int point_count() const { return kind == SensorKind::kThreePoints ? 3 : 1; }
  int width() const { return 18 * point_count(); }
  int64_t frame_count() const { return frames.rows(); }

  SensorStream slice(int64_t begin, int64_t count) const;
  void validate() const;
};

/// 6-DoF tracks of the tracked joints from FK. Position velocity is the step
/// into frame t (frame 0 repeats frame 1); the angular channel stores the
/// forward-difference relative rotation as a 6D offset from identity, so a
/// static pose has all-zero velocity channels.
SensorStream derive_sensors(const kin::MotionSequenceT<float>& m,
                            const kin::SkeletonT<double>& sk, SensorKind kind);

struct InstructionSegment {
  enum class Kind { kText, kSensor, kVideo, kMotion };
  Kind kind = Kind::kText;
  bool is_output = false;
  std::string text;
  SensorStream sensor;
  io::VideoTrack video;
  TokenStream motion;
};

/// Ordered segments following the task template; the single output segment
/// is always last. Output payloads may be left empty for prompt-only use.
struct InstructionSample {
  Task task = Task::kTracking;
  std::vector<InstructionSegment> segments;
  void validate() const;
};

std::string instruction_text(Task task, SensorKind kind, bool with_video);

InstructionSample make_tracking_sample(const SensorStream& sensor, const io::VideoTrack* video,
                                       const TokenStream& target);
InstructionSample make_understanding_sample(const SensorStream& sensor,
                                            const io::VideoTrack* video,
                                            const std::string& narration);
InstructionSample make_m2t_sample(const TokenStream& motion, const std::string& narration);
InstructionSample make_t2m_sample(const std::string& prompt, const TokenStream& target);

struct EncoderConfig {
  int hidden = 64;      // sensor conv channels
  int downsample = 4;   // r; sensor features land at the motion token rate
  int video_dim = 512;  // E

  void validate() const;
};

/// Registers sensor encoders (both kinds) and the video projection beside
/// the language model's parameters, so one optimizer step and one
/// checkpoint cover the whole stage.
void add_encoder_params(lm::LmModel& model, const EncoderConfig& cfg, uint64_t seed);
bool has_encoder_params(const lm::LmModel& model);

/// Conv features [1, T/r, D]; strict rejects T % r != 0, otherwise the tail
/// is padded by repeating the last frame.
ad::Tensor encode_sensor(lm::LmModel& model, const EncoderConfig& cfg, const SensorStream& s,
                         bool strict = true);
/// Framewise linear map to model width: [1, frames, D].
ad::Tensor project_video(lm::LmModel& model, const EncoderConfig& cfg, const io::VideoTrack& v);

struct Assembled {
  ad::Tensor embeddings;         // [1, L, D], graph-connected to the encoders
  std::vector<int32_t> ids;      // length L; -1 at soft positions
  std::vector<int32_t> targets;  // next-token targets; <pad> where unsupervised
  std::vector<float> mask;       // 1 where the shifted target is supervised
  int64_t length = 0;
  int64_t output_begin = 0;  // position of the first output-span token
  int64_t output_end = 0;    // one past the last
};

/// Full training sequence: <bos>, template segments, output span. Motion
/// outputs are delimited by <mot> and </mot>; text outputs end with <eos>;
/// the whole delimited span is supervised.
Assembled assemble(lm::LmModel& model, const lm::Vocabulary& vocab, const EncoderConfig& cfg,
                   const InstructionSample& sample);

/// Everything before the output tokens; motion outputs also get the opening
/// <mot>. The output payload may be empty.
ad::Tensor assemble_prompt(lm::LmModel& model, const lm::Vocabulary& vocab,
                           const EncoderConfig& cfg, const InstructionSample& sample);

/// Mean masked NLL of one sample; per_position (length L-1) carries each
/// supervised target's loss and zero elsewhere.
double sample_nll(lm::LmModel& model, const lm::Vocabulary& vocab, const EncoderConfig& cfg,
                  const InstructionSample& sample, std::vector<float>* per_position = nullptr);

struct InstructTrainConfig {
  std::vector<Task> tasks{Task::kTracking, Task::kUnderstanding, Task::kM2t, Task::kT2m};
  int steps = 400;
  int batch = 4;
  float lr = 1e-4f;
  float beta1 = 0.9f, beta2 = 0.999f, adam_eps = 1e-8f;
};

struct InstructStep {
  float loss = 0.0f;
  std::array<int, kTaskCount> task_count{};
  std::array<float, kTaskCount> task_loss{};
};

/// One update (or evaluation when cfg is null) over an explicit batch; the
/// loss is the mean of per-sample masked NLLs, returned before the update.
InstructStep instruct_step(lm::LmModel& model, const lm::Vocabulary& vocab,
                           const EncoderConfig& ecfg,
                           const std::vector<const InstructionSample*>& batch,
                           const InstructTrainConfig* cfg);

struct InstructTrainResult {
  std::vector<InstructStep> trace;
};

/// Batches mix the enabled tasks uniformly; every enabled task must have at
/// least one corpus sample.
InstructTrainResult instruct_train(lm::LmModel& model, const lm::Vocabulary& vocab,
                                   const EncoderConfig& ecfg,
                                   const std::vector<InstructionSample>& corpus,
                                   const InstructTrainConfig& cfg, Rng& rng,
                                   const std::function<void(int, const InstructStep&)>& on_step = {});

}  // namespace motok::instruct
