#include "motok/instruct.hpp"

#include <algorithm>
#include <cmath>

namespace motok::instruct {

using ad::Tensor;

const char* task_name(Task t) {
  switch (t) {
    case Task::kTracking: return "tracking";
    case Task::kUnderstanding: return "understanding";
    case Task::kM2t: return "m2t";
    case Task::kT2m: return "t2m";
  }
  return "?";
}

Task parse_task(const std::string& name) {
  for (int i = 0; i < kTaskCount; ++i)
    if (name == task_name(static_cast<Task>(i))) return static_cast<Task>(i);
  fail(ErrorKind::kConfig, "ConfigInvalid", "unknown task: " + name);
}

const char* sensor_kind_name(SensorKind k) {
  return k == SensorKind::kThreePoints ? "three_points" : "one_point";
}

SensorKind parse_sensor_kind(const std::string& name) {
  if (name == "three_points") return SensorKind::kThreePoints;
  if (name == "one_point") return SensorKind::kOnePoint;
  fail(ErrorKind::kConfig, "ConfigInvalid", "unknown sensor kind: " + name);
}

SensorStream SensorStream::slice(int64_t begin, int64_t count) const {
  if (begin < 0 || count < 0 || begin + count > frame_count())
    fail_domain("ShapeMismatch", "sensor slice out of range");
  SensorStream out;
  out.kind = kind;
  out.fps = fps;
  out.frames = frames.block(begin, 0, count, frames.cols());
  return out;
}

void SensorStream::validate() const {
  if (frames.cols() != width())
    fail_domain("ShapeMismatch", "sensor width disagrees with the point count");
  if (frame_count() < 1) fail_domain("EmptySequence", "sensor stream needs frames");
  if (!(fps > 0.0f)) fail_domain("BadFps", "fps must be positive");
  if (!frames.allFinite()) fail_domain("NonFinite", "non-finite sensor channel");
}

namespace {

int joint_by_name(const kin::SkeletonT<double>& sk, const std::string& name) {
  for (int j = 0; j < sk.joint_count(); ++j)
    if (sk.joint_names[j] == name) return j;
  fail_domain("SkeletonMismatch", "skeleton lacks joint " + name);
}

}  // namespace

SensorStream derive_sensors(const kin::MotionSequenceT<float>& m,
                            const kin::SkeletonT<double>& sk, SensorKind kind) {
  kin::MotionSequenceT<double> md = io::to_double(m);
  auto fk = kin::forward_kinematics(md, sk);
  const int64_t t_count = md.frame_count();

  std::vector<int> joints{joint_by_name(sk, "head")};
  if (kind == SensorKind::kThreePoints) {
    joints.push_back(joint_by_name(sk, "l_wrist"));
    joints.push_back(joint_by_name(sk, "r_wrist"));
  }

  SensorStream out;
  out.kind = kind;
  out.fps = m.fps;
  out.frames.setZero(t_count, out.width());
  const kin::Vec6<double> id6 = kin::identity_rot6d<double>();

  for (size_t p = 0; p < joints.size(); ++p) {
    const int j = joints[p];
    const int64_t base = static_cast<int64_t>(p) * 18;
    std::vector<kin::Mat3<double>> rot(t_count);
    for (int64_t t = 0; t < t_count; ++t) rot[t] = kin::world_joint_rotation(md, sk, t, j);

    for (int64_t t = 0; t < t_count; ++t) {
      out.frames.row(t).segment<3>(base) = fk.joint(t, j).cast<float>();
      out.frames.row(t).segment<6>(base + 6) =
          kin::matrix_to_rot6d<double>(rot[t]).cast<float>().transpose();
    }
    for (int64_t t = 1; t < t_count; ++t)
      out.frames.row(t).segment<3>(base + 3) =
          (fk.joint(t, j) - fk.joint(t - 1, j)).cast<float>();
    if (t_count > 1) out.frames.row(0).segment<3>(base + 3) = out.frames.row(1).segment<3>(base + 3);
    for (int64_t t = 0; t + 1 < t_count; ++t) {
      kin::Vec6<double> rel = kin::matrix_to_rot6d<double>(
          kin::Mat3<double>(rot[t].transpose() * rot[t + 1]));
      out.frames.row(t).segment<6>(base + 12) = (rel - id6).cast<float>().transpose();
    }
    if (t_count > 1)
      out.frames.row(t_count - 1).segment<6>(base + 12) =
          out.frames.row(t_count - 2).segment<6>(base + 12);
  }
  return out;
}

void InstructionSample::validate() const {
  if (segments.empty()) fail_domain("EmptyOutputSegment", "sample has no segments");
  int outputs = 0;
  for (const auto& s : segments) outputs += s.is_output ? 1 : 0;
  if (outputs != 1) fail_domain("EmptyOutputSegment", "sample needs exactly one output segment");
  if (!segments.back().is_output)
    fail_domain("EmptyOutputSegment", "the output segment must come last");
  using K = InstructionSegment::Kind;
  const K out_kind = segments.back().kind;
  if (out_kind != K::kText && out_kind != K::kMotion)
    fail_domain("EmptyOutputSegment", "outputs are text or motion");
}

std::string instruction_text(Task task, SensorKind kind, bool with_video) {
  const std::string sensor = kind == SensorKind::kThreePoints ? "three-points" : "one-point";
  switch (task) {
    case Task::kTracking:
      return with_video
                 ? "Perform motion tracking based on the given " + sensor + " and CLIP embeddings."
                 : "Perform motion tracking based on the given " + sensor + ".";
    case Task::kUnderstanding:
      return with_video ? "Describe the human motion based on the given " + sensor +
                              " and CLIP embeddings."
                        : "Describe the human motion based on the given " + sensor + ".";
    case Task::kM2t:
      return "Describe the human motion based on the given motion tokens.";
    case Task::kT2m:
      return "Generate the human motion based on the given description.";
  }
  return "";
}

namespace {

std::string sensor_input_prefix(SensorKind kind) {
  return std::string("Input ") + (kind == SensorKind::kThreePoints ? "three-points" : "one-point") +
         " feature: ";
}

InstructionSegment text_segment(std::string text) {
  InstructionSegment s;
  s.kind = InstructionSegment::Kind::kText;
  s.text = std::move(text);
  return s;
}

std::vector<InstructionSegment> condition_segments(Task task, const SensorStream& sensor,
                                                   const io::VideoTrack* video) {
  std::vector<InstructionSegment> segs;
  std::string head = instruction_text(task, sensor.kind, video != nullptr) + " ";
  if (video != nullptr) {
    segs.push_back(text_segment(head + "Input CLIP embeddings: "));
    InstructionSegment v;
    v.kind = InstructionSegment::Kind::kVideo;
    v.video = *video;
    segs.push_back(std::move(v));
    segs.push_back(text_segment(". " + sensor_input_prefix(sensor.kind)));
  } else {
    segs.push_back(text_segment(head + sensor_input_prefix(sensor.kind)));
  }
  InstructionSegment s;
  s.kind = InstructionSegment::Kind::kSensor;
  s.sensor = sensor;
  segs.push_back(std::move(s));
  return segs;
}

}  // namespace

InstructionSample make_tracking_sample(const SensorStream& sensor, const io::VideoTrack* video,
                                       const TokenStream& target) {
  InstructionSample sample;
  sample.task = Task::kTracking;
  sample.segments = condition_segments(Task::kTracking, sensor, video);
  InstructionSegment out;
  out.kind = InstructionSegment::Kind::kMotion;
  out.is_output = true;
  out.motion = target;
  sample.segments.push_back(std::move(out));
  return sample;
}

InstructionSample make_understanding_sample(const SensorStream& sensor,
                                            const io::VideoTrack* video,
                                            const std::string& narration) {
  InstructionSample sample;
  sample.task = Task::kUnderstanding;
  sample.segments = condition_segments(Task::kUnderstanding, sensor, video);
  InstructionSegment out;
  out.is_output = true;
  out.text = narration;
  sample.segments.push_back(std::move(out));
  return sample;
}

InstructionSample make_m2t_sample(const TokenStream& motion, const std::string& narration) {
  InstructionSample sample;
  sample.task = Task::kM2t;
  sample.segments.push_back(text_segment(
      instruction_text(Task::kM2t, SensorKind::kThreePoints, false) + " Input motion: "));
  InstructionSegment m;
  m.kind = InstructionSegment::Kind::kMotion;
  m.motion = motion;
  sample.segments.push_back(std::move(m));
  InstructionSegment out;
  out.is_output = true;
  out.text = narration;
  sample.segments.push_back(std::move(out));
  return sample;
}

InstructionSample make_t2m_sample(const std::string& prompt, const TokenStream& target) {
  InstructionSample sample;
  sample.task = Task::kT2m;
  sample.segments.push_back(text_segment(
      instruction_text(Task::kT2m, SensorKind::kThreePoints, false) + " Input description: " +
      prompt));
  InstructionSegment out;
  out.kind = InstructionSegment::Kind::kMotion;
  out.is_output = true;
  out.motion = target;
  sample.segments.push_back(std::move(out));
  return sample;
}

void EncoderConfig::validate() const {
  if (hidden < 1 || video_dim < 1)
    fail(ErrorKind::kConfig, "ConfigInvalid", "encoder widths must be positive");
  if (downsample < 1 || (downsample & (downsample - 1)) != 0)
    fail(ErrorKind::kConfig, "ConfigInvalid", "down-sample rate must be a power of two");
}

namespace {

struct Conv {
  Tensor w, b;
  int stride = 1, pad = 0;
  Tensor operator()(const Tensor& x) const { return ad::conv1d(x, w, b, stride, pad); }
};

void make_conv(ad::ParameterStore& ps, const std::string& name, int cin, int cout, int k,
               Rng& rng) {
  const float std_w = std::sqrt(2.0f / static_cast<float>(cin * k));
  Eigen::ArrayXf wdata(static_cast<int64_t>(cout) * cin * k);
  for (int64_t i = 0; i < wdata.size(); ++i) wdata[i] = float(rng.normal()) * std_w;
  ps.add(name + ".w", Tensor::param({cout, cin, k}, wdata));
  ps.add(name + ".b", Tensor::param({cout}, Eigen::ArrayXf::Zero(cout)));
}

Conv conv_ref(ad::ParameterStore& ps, const std::string& name, int stride, int pad) {
  return {ps.get(name + ".w"), ps.get(name + ".b"), stride, pad};
}

int stage_count(int downsample) {
  int s = 0;
  for (int d = downsample; d > 1; d /= 2) ++s;
  return s;
}

void make_sensor_stack(ad::ParameterStore& ps, const std::string& prefix, int width, int hidden,
                       int out_dim, int stages, Rng& rng) {
  make_conv(ps, prefix + "in", width, hidden, 3, rng);
  for (int s = 0; s <= stages; ++s) {
    make_conv(ps, prefix + "res" + std::to_string(s) + ".c1", hidden, hidden, 3, rng);
    make_conv(ps, prefix + "res" + std::to_string(s) + ".c2", hidden, hidden, 3, rng);
  }
  for (int s = 0; s < stages; ++s)
    make_conv(ps, prefix + "down" + std::to_string(s), hidden, hidden, 3, rng);
  make_conv(ps, prefix + "out", hidden, out_dim, 1, rng);
}

Tensor sensor_stack_forward(ad::ParameterStore& ps, const std::string& prefix, int stages,
                            const Tensor& x_bct) {
  auto res = [&](int s, const Tensor& x) {
    Conv c1 = conv_ref(ps, prefix + "res" + std::to_string(s) + ".c1", 1, 1);
    Conv c2 = conv_ref(ps, prefix + "res" + std::to_string(s) + ".c2", 1, 1);
    return ad::relu(ad::add(x, c2(ad::relu(c1(x)))));
  };
  Tensor x = ad::relu(conv_ref(ps, prefix + "in", 1, 1)(x_bct));
  for (int s = 0; s < stages; ++s) {
    x = res(s, x);
    x = ad::relu(conv_ref(ps, prefix + "down" + std::to_string(s), 2, 1)(x));
  }
  x = res(stages, x);
  return conv_ref(ps, prefix + "out", 1, 0)(x);
}

std::string sensor_prefix(SensorKind kind) {
  return kind == SensorKind::kThreePoints ? "sens3." : "sens1.";
}

}  // namespace

void add_encoder_params(lm::LmModel& model, const EncoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  if (has_encoder_params(model))
    fail_domain("AlreadyRegistered", "encoder weights were already added");
  Rng rng(seed);
  const int d = model.config().dim;
  const int stages = stage_count(cfg.downsample);
  make_sensor_stack(model.params(), "sens3.", 54, cfg.hidden, d, stages, rng);
  make_sensor_stack(model.params(), "sens1.", 18, cfg.hidden, d, stages, rng);
  Eigen::ArrayXf proj(static_cast<int64_t>(cfg.video_dim) * d);
  for (int64_t i = 0; i < proj.size(); ++i) proj[i] = float(rng.normal()) * 0.02f;
  model.params().add("vid.proj.w", Tensor::param({cfg.video_dim, d}, std::move(proj)));
  model.params().add("vid.proj.b", Tensor::param({d}, Eigen::ArrayXf::Zero(d)));
}

bool has_encoder_params(const lm::LmModel& model) {
  return const_cast<lm::LmModel&>(model).params().has("vid.proj.w");
}

ad::Tensor encode_sensor(lm::LmModel& model, const EncoderConfig& cfg, const SensorStream& s,
                         bool strict) {
  cfg.validate();
  s.validate();
  if (!has_encoder_params(model))
    fail_domain("MissingEncoder", "encoder weights not registered");
  const int64_t t = s.frame_count();
  const int64_t w = s.width();
  int64_t padded = (t + cfg.downsample - 1) / cfg.downsample * cfg.downsample;
  if (padded != t && strict)
    fail_domain("LengthNotDivisible", "frame count not a multiple of the down-sample rate");

  Eigen::ArrayXf data(w * padded);
  for (int64_t ch = 0; ch < w; ++ch)
    for (int64_t i = 0; i < padded; ++i)
      data[ch * padded + i] = s.frames(std::min(i, t - 1), ch);
  Tensor x = Tensor::constant({1, w, padded}, std::move(data));
  Tensor f = sensor_stack_forward(model.params(), sensor_prefix(s.kind),
                                  stage_count(cfg.downsample), x);
  return ad::permute(f, {0, 2, 1});  // [1, T/r, D]
}

ad::Tensor project_video(lm::LmModel& model, const EncoderConfig& cfg, const io::VideoTrack& v) {
  cfg.validate();
  if (!has_encoder_params(model))
    fail_domain("MissingEncoder", "encoder weights not registered");
  if (v.dim != cfg.video_dim || v.embeddings.cols() != v.dim)
    fail_domain("DimMismatch", "video embedding width disagrees with the config");
  if (v.frame_count() < 1) fail_domain("DimMismatch", "video track needs frames");
  if (!v.embeddings.allFinite()) fail_domain("NonFinite", "non-finite video embedding");
  const int64_t rows = v.frame_count();
  Eigen::ArrayXf data = Eigen::Map<const Eigen::ArrayXf>(v.embeddings.data(), rows * v.dim);
  Tensor x = Tensor::constant({rows, v.dim}, std::move(data));
  Tensor y = ad::add(ad::matmul(x, model.params().get("vid.proj.w")),
                     model.params().get("vid.proj.b"));
  return ad::reshape(y, {1, rows, model.config().dim});
}

namespace {

enum class BuildMode { kFull, kPrompt };

Assembled build_sequence(lm::LmModel& model, const lm::Vocabulary& vocab,
                         const EncoderConfig& cfg, const InstructionSample& sample,
                         BuildMode mode) {
  sample.validate();
  if (vocab.total_size() != model.config().vocab_size)
    fail_domain("VocabMismatch", "vocabulary size disagrees with the model");
  const int64_t d = model.config().dim;

  Assembled out;
  std::vector<Tensor> pieces;
  std::vector<int32_t> run;
  auto flush = [&] {
    if (run.empty()) return;
    Tensor emb = ad::embedding(model.params().get("tok_emb"), run);
    pieces.push_back(ad::reshape(emb, {1, static_cast<int64_t>(run.size()), d}));
    run.clear();
  };
  auto push_id = [&](int32_t id) {
    run.push_back(id);
    out.ids.push_back(id);
  };
  auto push_soft = [&](const Tensor& t) {
    flush();
    pieces.push_back(t);
    out.ids.insert(out.ids.end(), static_cast<size_t>(t.dim(1)), -1);
  };

  push_id(static_cast<int32_t>(vocab.bos()));
  using K = InstructionSegment::Kind;
  for (const auto& seg : sample.segments) {
    if (seg.is_output) {
      out.output_begin = static_cast<int64_t>(out.ids.size());
      if (mode == BuildMode::kPrompt) {
        if (seg.kind == K::kMotion) push_id(static_cast<int32_t>(vocab.mot_open()));
        break;
      }
      if (seg.kind == K::kMotion) {
        if (seg.motion.length() == 0)
          fail_domain("EmptyOutputSegment", "motion output has no tokens");
        for (int32_t id : vocab.wrap_stream(seg.motion)) push_id(id);
      } else {
        if (seg.text.empty()) fail_domain("EmptyOutputSegment", "text output is empty");
        for (int32_t id : vocab.encode_text(seg.text)) push_id(id);
        push_id(static_cast<int32_t>(vocab.eos()));
      }
      out.output_end = static_cast<int64_t>(out.ids.size());
      continue;
    }
    switch (seg.kind) {
      case K::kText:
        for (int32_t id : vocab.encode_text(seg.text)) push_id(id);
        break;
      case K::kSensor:
        push_soft(encode_sensor(model, cfg, seg.sensor));
        break;
      case K::kVideo:
        push_soft(project_video(model, cfg, seg.video));
        break;
      case K::kMotion:
        for (int32_t id : vocab.wrap_stream(seg.motion)) push_id(id);
        break;
    }
  }
  flush();

  out.length = static_cast<int64_t>(out.ids.size());
  if (out.length > model.config().max_len)
    fail_domain("ContextOverflow", "assembled sample exceeds max_len");
  out.embeddings = pieces.size() == 1 ? pieces[0] : ad::concat(pieces, 1);

  if (mode == BuildMode::kFull) {
    out.targets.assign(out.length, static_cast<int32_t>(vocab.pad()));
    out.mask.assign(out.length, 0.0f);
    for (int64_t p = 0; p + 1 < out.length; ++p) {
      if (p + 1 >= out.output_begin && p + 1 < out.output_end) {
        out.targets[p] = out.ids[p + 1];
        out.mask[p] = 1.0f;
      }
    }
  }
  return out;
}

}  // namespace

Assembled assemble(lm::LmModel& model, const lm::Vocabulary& vocab, const EncoderConfig& cfg,
                   const InstructionSample& sample) {
  return build_sequence(model, vocab, cfg, sample, BuildMode::kFull);
}

ad::Tensor assemble_prompt(lm::LmModel& model, const lm::Vocabulary& vocab,
                           const EncoderConfig& cfg, const InstructionSample& sample) {
  return build_sequence(model, vocab, cfg, sample, BuildMode::kPrompt).embeddings;
}

namespace {

Tensor masked_loss_graph(lm::LmModel& model, const Assembled& a, int vocab_size,
                         std::vector<float>* per_row) {
  Tensor logits = model.forward_from_embeddings(a.embeddings);
  return ad::cross_entropy(ad::reshape(logits, {a.length, vocab_size}), a.targets, a.mask,
                           per_row);
}

}  // namespace

double sample_nll(lm::LmModel& model, const lm::Vocabulary& vocab, const EncoderConfig& cfg,
                  const InstructionSample& sample, std::vector<float>* per_position) {
  Assembled a = assemble(model, vocab, cfg, sample);
  std::vector<float> rows;
  Tensor loss = masked_loss_graph(model, a, model.config().vocab_size,
                                  per_position ? &rows : nullptr);
  if (per_position) {
    per_position->assign(a.length - 1, 0.0f);
    for (int64_t p = 0; p + 1 < a.length; ++p) (*per_position)[p] = rows[p] * a.mask[p];
  }
  return static_cast<double>(loss.item());
}

InstructStep instruct_step(lm::LmModel& model, const lm::Vocabulary& vocab,
                           const EncoderConfig& ecfg,
                           const std::vector<const InstructionSample*>& batch,
                           const InstructTrainConfig* cfg) {
  if (batch.empty()) fail_domain("EmptyBatch", "instruct step needs at least one sample");
  InstructStep log;
  std::array<double, kTaskCount> task_sum{};
  Tensor total;
  for (size_t i = 0; i < batch.size(); ++i) {
    Assembled a = assemble(model, vocab, ecfg, *batch[i]);
    Tensor loss = masked_loss_graph(model, a, model.config().vocab_size, nullptr);
    const int ti = static_cast<int>(batch[i]->task);
    log.task_count[ti] += 1;
    task_sum[ti] += static_cast<double>(loss.item());
    total = i == 0 ? loss : ad::add(total, loss);
  }
  total = ad::scale(total, 1.0f / static_cast<float>(batch.size()));
  log.loss = total.item();
  for (int t = 0; t < kTaskCount; ++t)
    if (log.task_count[t] > 0) log.task_loss[t] = static_cast<float>(task_sum[t] / log.task_count[t]);
  if (cfg) {
    model.params().ensure_zero_grads();
    ad::backward(total);
    ad::adam_step(model.params(), cfg->lr, cfg->beta1, cfg->beta2, cfg->adam_eps);
  }
  return log;
}

InstructTrainResult instruct_train(lm::LmModel& model, const lm::Vocabulary& vocab,
                                   const EncoderConfig& ecfg,
                                   const std::vector<InstructionSample>& corpus,
                                   const InstructTrainConfig& cfg, Rng& rng,
                                   const std::function<void(int, const InstructStep&)>& on_step) {
  if (cfg.steps < 0 || cfg.batch < 1 || cfg.tasks.empty())
    fail(ErrorKind::kConfig, "ConfigInvalid", "bad instruct training settings");
  std::array<std::vector<const InstructionSample*>, kTaskCount> by_task;
  for (const auto& s : corpus) by_task[static_cast<int>(s.task)].push_back(&s);
  for (Task t : cfg.tasks)
    if (by_task[static_cast<int>(t)].empty())
      fail(ErrorKind::kConfig, "ConfigInvalid",
           std::string("no samples for enabled task ") + task_name(t));

  InstructTrainResult result;
  result.trace.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<const InstructionSample*> batch(cfg.batch);
    for (int i = 0; i < cfg.batch; ++i) {
      const auto& bucket =
          by_task[static_cast<int>(cfg.tasks[rng.uniform_int(0, cfg.tasks.size() - 1)])];
      batch[i] = bucket[rng.uniform_int(0, bucket.size() - 1)];
    }
    InstructStep log = instruct_step(model, vocab, ecfg, batch, &cfg);
    if (on_step) on_step(step, log);
    result.trace.push_back(log);
  }
  return result;
}

}  // namespace motok::instruct
