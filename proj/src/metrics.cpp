#include "motok/metrics.hpp"

#include <Eigen/Geometry>

#include "motok/io.hpp"
#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace motok::eval {

namespace {

constexpr int kHeadJoint = 6;

void check_shapes(const kin::JointPositions& gt, const kin::JointPositions& pred) {
  if (gt.frames != pred.frames)
    fail_domain("ShapeMismatch", "frame counts differ: " + std::to_string(gt.frames) + " vs " +
                                     std::to_string(pred.frames));
  if (gt.frames < 1) fail_domain("EmptySequence", "no frames to score");
  if (gt.p.rows() != gt.frames * kin::kJointCount || pred.p.rows() != pred.frames * kin::kJointCount)
    fail_domain("ShapeMismatch", "joint rows disagree with frame count");
}

Eigen::Matrix3Xd frame_points(const kin::JointPositions& jp, int64_t t) {
  Eigen::Matrix3Xd pts(3, kin::kJointCount);
  for (int j = 0; j < kin::kJointCount; ++j) pts.col(j) = jp.joint(t, j).transpose();
  return pts;
}

void check_nondegenerate(const Eigen::Matrix3Xd& pts) {
  Eigen::Matrix3Xd centered = pts.colwise() - Eigen::Vector3d(pts.rowwise().mean());
  Eigen::Matrix3d scatter = centered * centered.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(scatter);
  const auto& ev = es.eigenvalues();  // ascending
  if (ev(2) <= 1e-18 || ev(1) <= 1e-12 * ev(2))
    fail_domain("DegenerateConfiguration", "alignment needs three non-collinear joints");
}

double geodesic_deg(const kin::Mat3<double>& a, const kin::Mat3<double>& b) {
  double c = ((a.transpose() * b).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / M_PI;
}

kin::Vec6<double> rot6d_of(const kin::MotionSequenceT<float>& m, int64_t t, int channel_joint) {
  Eigen::Matrix<float, 6, 1> r = channel_joint < 0 ? m.root_rot(t).transpose()
                                                   : m.joint_rot(t, channel_joint).transpose();
  return r.cast<double>();
}

std::string ngram_key(const std::vector<std::string>& toks, size_t start, int k) {
  std::string key = toks[start];
  for (int i = 1; i < k; ++i) {
    key.push_back('\x1f');
    key += toks[start + i];
  }
  return key;
}

std::unordered_map<std::string, int> ngram_counts(const std::vector<std::string>& toks, int k) {
  std::unordered_map<std::string, int> counts;
  if (static_cast<int>(toks.size()) >= k)
    for (size_t i = 0; i + k <= toks.size(); ++i) ++counts[ngram_key(toks, i, k)];
  return counts;
}

std::string format_value(double v) {
  std::ostringstream os;
  os.precision(6);
  os << std::fixed << v;
  return os.str();
}

}  // namespace

const std::vector<int>& subset_joints(JointSubset subset) {
  static const std::vector<int> full = [] {
    std::vector<int> v(kin::kJointCount);
    std::iota(v.begin(), v.end(), 0);
    return v;
  }();
  static const std::vector<int> upper{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14};
  static const std::vector<int> lower{15, 16, 17, 18, 19, 20, 21, 22};
  switch (subset) {
    case JointSubset::kFull: return full;
    case JointSubset::kUpper: return upper;
    case JointSubset::kLower: return lower;
  }
  fail_domain("ConfigInvalid", "unknown joint subset");
}

double mpjpe_head_aligned(const kin::JointPositions& gt, const kin::JointPositions& pred,
                          JointSubset subset) {
  check_shapes(gt, pred);
  const auto& joints = subset_joints(subset);
  double total = 0;
  for (int64_t t = 0; t < gt.frames; ++t) {
    Eigen::RowVector3d offset = gt.joint(t, kHeadJoint) - pred.joint(t, kHeadJoint);
    for (int j : joints) total += (pred.joint(t, j) + offset - gt.joint(t, j)).norm();
  }
  return total / double(gt.frames * joints.size()) * 1000.0;
}

double pa_mpjpe(const kin::JointPositions& gt, const kin::JointPositions& pred, bool with_scale) {
  check_shapes(gt, pred);
  double total = 0;
  for (int64_t t = 0; t < gt.frames; ++t) {
    Eigen::Matrix3Xd src = frame_points(pred, t);
    Eigen::Matrix3Xd dst = frame_points(gt, t);
    check_nondegenerate(src);
    check_nondegenerate(dst);
    Eigen::Matrix4d tf = Eigen::umeyama(src, dst, with_scale);
    Eigen::Matrix3Xd aligned = (tf.topLeftCorner<3, 3>() * src).colwise() +
                               Eigen::Vector3d(tf.topRightCorner<3, 1>());
    total += (aligned - dst).colwise().norm().mean();
  }
  return total / double(gt.frames) * 1000.0;
}

double accel_error(const kin::JointPositions& gt, const kin::JointPositions& pred) {
  check_shapes(gt, pred);
  if (gt.frames < 3) fail_domain("TooShort", "acceleration needs at least three frames");
  double total = 0;
  for (int64_t t = 1; t + 1 < gt.frames; ++t) {
    for (int j = 0; j < kin::kJointCount; ++j) {
      Eigen::RowVector3d ag = gt.joint(t + 1, j) - 2.0 * gt.joint(t, j) + gt.joint(t - 1, j);
      Eigen::RowVector3d ap = pred.joint(t + 1, j) - 2.0 * pred.joint(t, j) + pred.joint(t - 1, j);
      total += (ag - ap).norm();
    }
  }
  return total / double((gt.frames - 2) * kin::kJointCount) * 1000.0;
}

double joint_angle_error(const kin::MotionSequenceT<float>& gt,
                         const kin::MotionSequenceT<float>& pred, AngleScope scope) {
  if (gt.frame_count() != pred.frame_count())
    fail_domain("ShapeMismatch", "frame counts differ: " + std::to_string(gt.frame_count()) +
                                     " vs " + std::to_string(pred.frame_count()));
  if (gt.frame_count() < 1) fail_domain("EmptySequence", "no frames to score");
  double total = 0;
  int64_t count = 0;
  for (int64_t t = 0; t < gt.frame_count(); ++t) {
    if (scope == AngleScope::kRoot) {
      total += geodesic_deg(kin::rot6d_to_matrix<double>(rot6d_of(gt, t, -1)),
                            kin::rot6d_to_matrix<double>(rot6d_of(pred, t, -1)));
      ++count;
    } else {
      for (int j = 0; j < kin::kNonRootJoints; ++j) {
        total += geodesic_deg(kin::rot6d_to_matrix<double>(rot6d_of(gt, t, j)),
                              kin::rot6d_to_matrix<double>(rot6d_of(pred, t, j)));
        ++count;
      }
    }
  }
  return total / double(count);
}

std::vector<std::string> tokenize_text(const std::string& text) {
  std::vector<std::string> toks;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(char(std::tolower(c)));
    } else if (!cur.empty()) {
      toks.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) toks.push_back(std::move(cur));
  return toks;
}

double bleu(const std::string& candidate, const std::vector<std::string>& references, int order) {
  if (order < 1) fail(ErrorKind::kConfig, "ConfigInvalid", "n-gram order must be positive");
  std::vector<std::vector<std::string>> refs;
  for (const auto& r : references) {
    auto toks = tokenize_text(r);
    if (!toks.empty()) refs.push_back(std::move(toks));
  }
  if (refs.empty()) fail_domain("EmptyReference", "BLEU needs a non-empty reference");
  auto cand = tokenize_text(candidate);
  if (cand.empty()) return 0;

  double log_sum = 0;
  for (int k = 1; k <= order; ++k) {
    auto cand_counts = ngram_counts(cand, k);
    int64_t total = std::max<int64_t>(0, int64_t(cand.size()) - k + 1);
    int64_t matched = 0;
    for (const auto& [key, count] : cand_counts) {
      int best = 0;
      for (const auto& ref : refs) {
        auto ref_counts = ngram_counts(ref, k);
        auto it = ref_counts.find(key);
        if (it != ref_counts.end()) best = std::max(best, it->second);
      }
      matched += std::min<int64_t>(count, best);
    }
    double p = k == 1 ? (total > 0 ? double(matched) / double(total) : 0.0)
                      : double(matched + 1) / double(total + 1);
    if (p <= 0) return 0;
    log_sum += std::log(p);
  }

  int64_t closest = int64_t(refs[0].size());
  for (const auto& ref : refs) {
    int64_t len = int64_t(ref.size());
    int64_t gap = std::abs(len - int64_t(cand.size()));
    int64_t best_gap = std::abs(closest - int64_t(cand.size()));
    if (gap < best_gap || (gap == best_gap && len < closest)) closest = len;
  }
  double bp = int64_t(cand.size()) >= closest
                  ? 1.0
                  : std::exp(1.0 - double(closest) / double(cand.size()));
  return 100.0 * bp * std::exp(log_sum / double(order));
}

double rouge_l(const std::string& candidate, const std::string& reference) {
  auto ref = tokenize_text(reference);
  if (ref.empty()) fail_domain("EmptyReference", "ROUGE needs a non-empty reference");
  auto cand = tokenize_text(candidate);
  if (cand.empty()) return 0;

  std::vector<std::vector<int>> lcs(cand.size() + 1, std::vector<int>(ref.size() + 1, 0));
  for (size_t i = 1; i <= cand.size(); ++i)
    for (size_t j = 1; j <= ref.size(); ++j)
      lcs[i][j] = cand[i - 1] == ref[j - 1] ? lcs[i - 1][j - 1] + 1
                                            : std::max(lcs[i - 1][j], lcs[i][j - 1]);
  double l = lcs[cand.size()][ref.size()];
  if (l <= 0) return 0;
  double p = l / double(cand.size());
  double r = l / double(ref.size());
  return 100.0 * 2.0 * p * r / (p + r);
}

TrackingReport evaluate_tracking(const std::vector<TrackedPair>& pairs,
                                 const kin::SkeletonT<double>& sk) {
  if (pairs.empty()) fail_domain("EmptySequence", "no sequences to evaluate");
  TrackingReport report;
  for (const auto& pair : pairs) {
    kin::MotionSequence gt = io::to_double(pair.gt);
    kin::MotionSequence pred = io::to_double(pair.pred);
    gt.initial_root_position.setZero();
    gt.initial_root_rotation.setIdentity();
    pred.initial_root_position.setZero();
    pred.initial_root_rotation.setIdentity();
    auto gt_p = kin::forward_kinematics(gt, sk);
    auto pred_p = kin::forward_kinematics(pred, sk);

    TrackingRow row;
    row.id = pair.id;
    row.full = mpjpe_head_aligned(gt_p, pred_p, JointSubset::kFull);
    row.upper = mpjpe_head_aligned(gt_p, pred_p, JointSubset::kUpper);
    row.lower = mpjpe_head_aligned(gt_p, pred_p, JointSubset::kLower);
    row.pa = pa_mpjpe(gt_p, pred_p);
    row.accel = accel_error(gt_p, pred_p);
    row.angle_full = joint_angle_error(pair.gt, pair.pred, AngleScope::kFull);
    row.angle_root = joint_angle_error(pair.gt, pair.pred, AngleScope::kRoot);
    report.rows.push_back(std::move(row));
  }
  auto& agg = report.aggregate;
  agg.id = "aggregate";
  for (const auto& row : report.rows) {
    agg.full += row.full;
    agg.upper += row.upper;
    agg.lower += row.lower;
    agg.pa += row.pa;
    agg.accel += row.accel;
    agg.angle_full += row.angle_full;
    agg.angle_root += row.angle_root;
  }
  const double n = double(report.rows.size());
  agg.full /= n;
  agg.upper /= n;
  agg.lower /= n;
  agg.pa /= n;
  agg.accel /= n;
  agg.angle_full /= n;
  agg.angle_root /= n;
  return report;
}

NlpReport evaluate_nlp(const std::vector<NlpPair>& pairs) {
  if (pairs.empty()) fail_domain("EmptySequence", "no pairs to evaluate");
  NlpReport report;
  for (const auto& pair : pairs) {
    NlpRow row;
    row.id = pair.id;
    row.bleu1 = bleu(pair.candidate, {pair.reference}, 1);
    row.bleu4 = bleu(pair.candidate, {pair.reference}, 4);
    row.rouge_l = rouge_l(pair.candidate, pair.reference);
    report.rows.push_back(std::move(row));
  }
  auto& agg = report.aggregate;
  agg.id = "aggregate";
  for (const auto& row : report.rows) {
    agg.bleu1 += row.bleu1;
    agg.bleu4 += row.bleu4;
    agg.rouge_l += row.rouge_l;
  }
  const double n = double(report.rows.size());
  agg.bleu1 /= n;
  agg.bleu4 /= n;
  agg.rouge_l /= n;
  return report;
}

std::string tracking_report_text(const TrackingReport& report) {
  std::ostringstream os;
  os << "sequences=" << report.rows.size() << "\n";
  os << "mpjpe_full_mm=" << format_value(report.aggregate.full) << "\n";
  os << "mpjpe_upper_mm=" << format_value(report.aggregate.upper) << "\n";
  os << "mpjpe_lower_mm=" << format_value(report.aggregate.lower) << "\n";
  os << "pa_mpjpe_mm=" << format_value(report.aggregate.pa) << "\n";
  os << "accel_mm=" << format_value(report.aggregate.accel) << "\n";
  os << "angle_full_deg=" << format_value(report.aggregate.angle_full) << "\n";
  os << "angle_root_deg=" << format_value(report.aggregate.angle_root) << "\n";
  return os.str();
}

std::string tracking_report_csv(const TrackingReport& report) {
  std::ostringstream os;
  os << "id,mpjpe_full_mm,mpjpe_upper_mm,mpjpe_lower_mm,pa_mpjpe_mm,accel_mm,"
        "angle_full_deg,angle_root_deg\n";
  auto emit = [&](const TrackingRow& row) {
    os << row.id << ',' << format_value(row.full) << ',' << format_value(row.upper) << ','
       << format_value(row.lower) << ',' << format_value(row.pa) << ',' << format_value(row.accel)
       << ',' << format_value(row.angle_full) << ',' << format_value(row.angle_root) << "\n";
  };
  for (const auto& row : report.rows) emit(row);
  emit(report.aggregate);
  return os.str();
}

std::string nlp_report_text(const NlpReport& report) {
  std::ostringstream os;
  os << "pairs=" << report.rows.size() << "\n";
  os << "bleu1=" << format_value(report.aggregate.bleu1) << "\n";
  os << "bleu4=" << format_value(report.aggregate.bleu4) << "\n";
  os << "rouge_l=" << format_value(report.aggregate.rouge_l) << "\n";
  os << "bert=unavailable\n";
  return os.str();
}

std::string nlp_report_csv(const NlpReport& report) {
  std::ostringstream os;
  os << "id,bleu1,bleu4,rouge_l\n";
  auto emit = [&](const NlpRow& row) {
    os << row.id << ',' << format_value(row.bleu1) << ',' << format_value(row.bleu4) << ','
       << format_value(row.rouge_l) << "\n";
  };
  for (const auto& row : report.rows) emit(row);
  emit(report.aggregate);
  return os.str();
}

}  // namespace motok::eval
