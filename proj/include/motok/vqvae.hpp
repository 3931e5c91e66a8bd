#pragma once

#include <functional>
#include <vector>

#include "motok/kinematics.hpp"
#include "motok/optimizer.hpp"
#include "motok/tensor.hpp"
#include "motok/token_stream.hpp"

// Motion tokenizer: fully convolutional encoder/decoder over the 279-channel
// pose representation with product quantization across N codebooks, EMA
// codebook learning, and dead-entry reset from batch latents.

namespace motok::vq {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct VqConfig {
  int codebook_count = 2;   // N
  int codebook_size = 256;  // K
  int code_dim = 16;        // per-trunk width; latent c = N * code_dim
  int downsample = 4;       // r: one stride-2 stage per factor of 2
  int hidden = 64;          // conv channels

  float lambda_c = 0.25f;
  float lambda_r = 1.0f;
  float lambda_m = 1.0f;
  float lambda_j = 1.0f;
  float lambda_v = 0.5f;
  float smooth_beta = 1.0f;

  float ema_gamma = 0.99f;
  float ema_eps = 1e-5f;
  float reset_threshold = 1.0f;
  int reset_interval = 100;

  int latent_width() const { return codebook_count * code_dim; }
  void validate() const;
};

struct VqLossReport {
  float total = 0, commitment = 0, reconstruction = 0;
  float l_m = 0, l_j = 0, l_v = 0;
  float lambda_c = 0, lambda_r = 0, lambda_m = 0, lambda_j = 0, lambda_v = 0;
};

class CodebookSet {
 public:
  CodebookSet() = default;
  CodebookSet(const VqConfig& cfg, Rng& rng);

  int trunk_count() const { return n_; }
  int entry_count() const { return k_; }
  int entry_dim() const { return dim_; }

  MatRM& entries(int trunk) { return entries_[trunk]; }
  const MatRM& entries(int trunk) const { return entries_[trunk]; }
  Eigen::ArrayXf& ema_cluster_size(int trunk) { return ema_size_[trunk]; }
  MatRM& ema_embed_sum(int trunk) { return ema_sum_[trunk]; }
  Eigen::ArrayXd& usage_count(int trunk) { return usage_[trunk]; }

  /// Nearest entry per trunk in f64 arithmetic; ties take the lowest index.
  void nearest(const float* trunk_vec, int trunk, int* index, double* dist_sq) const;

  void ema_update(const std::vector<std::vector<int>>& assignments, const MatRM& latents,
                  float gamma, float eps);
  /// Entries whose EMA mass fell below the threshold adopt a random latent
  /// row from the batch. Returns the number of resets.
  int reset_dead(const MatRM& latents, float threshold, float eps, Rng& rng);

  double usage_perplexity(int trunk) const;

 private:
  int n_ = 0, k_ = 0, dim_ = 0;
  std::vector<MatRM> entries_, ema_sum_;
  std::vector<Eigen::ArrayXf> ema_size_;
  std::vector<Eigen::ArrayXd> usage_;
};

struct QuantizeResult {
  TokenStream tokens;
  MatRM quantized;   // rows match the latent rows
  MatRM distances;   // [rows, N] squared distances
  std::vector<std::vector<int>> assignments;  // per trunk, per row
};

QuantizeResult quantize(const MatRM& latents, const CodebookSet& cb, int downsample, float fps);

// In-graph rotation utilities shared with the loss.
/// Gram-Schmidt on packed 6D rows: [G,6] -> transposed rotations [G,3,3]
/// (row i of each 3x3 block is column i of the rotation).
ad::Tensor rot6d_to_matrix_t_graph(const ad::Tensor& r6);
/// FK over local-frame channels: frames [B,T,279] -> positions [B*T, 23*3],
/// first-frame pose pinned to the identity.
ad::Tensor fk_positions_graph(const ad::Tensor& frames_bt, const kin::SkeletonT<double>& sk,
                              int64_t batch, int64_t frames);

struct VqLossTensors {
  ad::Tensor total, commitment, l_m, l_j, l_v;
  VqLossReport report;
};

class MotionVqVae {
 public:
  MotionVqVae(const VqConfig& cfg, const kin::SkeletonT<double>& sk, uint64_t seed);

  const VqConfig& config() const { return cfg_; }
  const kin::SkeletonT<double>& skeleton() const { return sk_; }
  ad::ParameterStore& params() { return params_; }
  CodebookSet& codebooks() { return codebooks_; }
  const CodebookSet& codebooks() const { return codebooks_; }

  ad::Tensor encoder_forward(const ad::Tensor& x_bct);
  ad::Tensor decoder_forward(const ad::Tensor& f_bcl);

  /// Latents [T/r, c] for one sequence. strict rejects T % r != 0; otherwise
  /// the tail is padded by repeating the last frame.
  MatRM encode_window(const kin::MotionSequenceT<float>& m, bool strict = false);
  TokenStream encode_tokens(const kin::MotionSequenceT<float>& m, bool strict = false);
  /// Frames come back at (L_W/N)*r; pass original_frames to drop pad frames.
  kin::MotionSequenceT<float> decode_tokens(const TokenStream& ts, int64_t original_frames = -1);
  kin::MotionSequenceT<float> decode_latents(const MatRM& quantized, float fps);

  /// Loss graph over a batch: m_hat and m as [B,T,279].
  VqLossTensors loss_graph(const ad::Tensor& m_hat_bt, const MatRM& target_frames,
                           const ad::Tensor& f_flat, const MatRM& f_quantized, int64_t batch,
                           int64_t frames);

  /// Joint L1 report between a sequence and its reconstruction (no training).
  VqLossReport evaluate_loss(const kin::MotionSequenceT<float>& m);
  double reconstruction_mpjpe_mm(const kin::MotionSequenceT<float>& m);

 private:
  VqConfig cfg_;
  kin::SkeletonT<double> sk_;
  ad::ParameterStore params_;
  CodebookSet codebooks_;
};

struct VqTrainConfig {
  int steps = 2000;
  int batch = 8;
  float lr = 1e-3f;
  float adam_beta1 = 0.9f, adam_beta2 = 0.999f, adam_eps = 1e-8f;
};

struct VqTrainStep {
  VqLossReport report;
  int resets = 0;
};

VqTrainStep vq_train_step(MotionVqVae& model, const std::vector<const MatRM*>& batch_frames,
                          const VqTrainConfig& tcfg, Rng& rng, bool allow_reset);

struct VqTrainResult {
  std::vector<VqLossReport> trace;
  int total_resets = 0;
};

/// Windows must share a frame count divisible by the down-sample rate.
VqTrainResult train_vqvae(MotionVqVae& model, const std::vector<kin::MotionSequenceT<float>>& windows,
                          const VqTrainConfig& tcfg, Rng& rng,
                          const std::function<void(int, const VqLossReport&)>& on_step = {});

}  // namespace motok::vq
