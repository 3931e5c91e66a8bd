#pragma once

#include <string>
#include <utility>
#include <vector>

#include "motok/kinematics.hpp"

// Tracking and language metrics. Position errors are millimeters, angle
// errors degrees, text scores in [0, 100].

namespace motok::eval {

enum class JointSubset { kFull, kUpper, kLower };
enum class AngleScope { kFull, kRoot };

const std::vector<int>& subset_joints(JointSubset subset);

/// Translates each predicted frame so its head lands on the ground-truth
/// head, then means the joint position error over the subset.
double mpjpe_head_aligned(const kin::JointPositions& gt, const kin::JointPositions& pred,
                          JointSubset subset = JointSubset::kFull);

/// Per-frame optimal similarity alignment (rotation, translation, and scale
/// unless disabled) before the mean joint error.
double pa_mpjpe(const kin::JointPositions& gt, const kin::JointPositions& pred,
                bool with_scale = true);

/// Mean norm of the difference of second finite differences, mm per frame^2.
double accel_error(const kin::JointPositions& gt, const kin::JointPositions& pred);

/// Geodesic angle of R_gt^T R_pred over local joint rotations (root scope
/// uses the root channel), averaged, in degrees.
double joint_angle_error(const kin::MotionSequenceT<float>& gt,
                         const kin::MotionSequenceT<float>& pred, AngleScope scope);

/// Lowercase, strip punctuation, split on whitespace.
std::vector<std::string> tokenize_text(const std::string& text);

/// Corpus BLEU up to n-grams of the given order with brevity penalty;
/// higher-order precisions take add-one smoothing so short sentences do not
/// zero out, unigram precision stays raw.
double bleu(const std::string& candidate, const std::vector<std::string>& references, int order);

/// Longest-common-subsequence F-measure.
double rouge_l(const std::string& candidate, const std::string& reference);

struct TrackingRow {
  std::string id;
  double full = 0, upper = 0, lower = 0;  // mm
  double pa = 0;                          // mm
  double accel = 0;                       // mm / frame^2
  double angle_full = 0, angle_root = 0;  // degrees
};

struct TrackingReport {
  std::vector<TrackingRow> rows;
  TrackingRow aggregate;
};

struct TrackedPair {
  std::string id;
  kin::MotionSequenceT<float> gt, pred;
};

/// FK runs with both initial placements reset, so sequences are compared in
/// the shared local frame the tokenizer works in.
TrackingReport evaluate_tracking(const std::vector<TrackedPair>& pairs,
                                 const kin::SkeletonT<double>& sk);

struct NlpRow {
  std::string id;
  double bleu1 = 0, bleu4 = 0, rouge_l = 0;
};

struct NlpReport {
  std::vector<NlpRow> rows;
  NlpRow aggregate;
};

struct NlpPair {
  std::string id;
  std::string candidate, reference;
};

NlpReport evaluate_nlp(const std::vector<NlpPair>& pairs);

std::string tracking_report_text(const TrackingReport& report);
std::string tracking_report_csv(const TrackingReport& report);
std::string nlp_report_text(const NlpReport& report);
std::string nlp_report_csv(const NlpReport& report);

}  // namespace motok::eval
