#include "motok/vqvae.hpp"

#include <cmath>

#include "motok/io.hpp"

namespace motok::vq {

using ad::Tensor;

void VqConfig::validate() const {
  if (codebook_count < 1 || codebook_size < 1 || code_dim < 1)
    fail(ErrorKind::kConfig, "ConfigInvalid", "codebook dimensions must be positive");
  if (downsample != 1 && downsample != 2 && downsample != 4 && downsample != 8)
    fail(ErrorKind::kConfig, "ConfigInvalid", "downsample must be a power of two up to 8");
  if (hidden < 4) fail(ErrorKind::kConfig, "ConfigInvalid", "hidden width too small");
  if (!(ema_gamma > 0.0f && ema_gamma < 1.0f))
    fail(ErrorKind::kConfig, "ConfigInvalid", "ema decay must sit in (0,1)");
  if (!(smooth_beta > 0.0f)) fail(ErrorKind::kConfig, "ConfigInvalid", "smooth_beta must be positive");
}

CodebookSet::CodebookSet(const VqConfig& cfg, Rng& rng)
    : n_(cfg.codebook_count), k_(cfg.codebook_size), dim_(cfg.code_dim) {
  for (int n = 0; n < n_; ++n) {
    MatRM e(k_, dim_);
    for (int k = 0; k < k_; ++k)
      for (int d = 0; d < dim_; ++d) e(k, d) = float(rng.normal()) * 0.1f;
    entries_.push_back(e);
    ema_sum_.push_back(e);  // consistent with unit mass so idle entries hold still
    ema_size_.push_back(Eigen::ArrayXf::Constant(k_, 1.0f));
    usage_.push_back(Eigen::ArrayXd::Zero(k_));
  }
}

void CodebookSet::nearest(const float* trunk_vec, int trunk, int* index, double* dist_sq) const {
  const MatRM& e = entries_[trunk];
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < k_; ++k) {
    double d = 0.0;
    const float* row = e.data() + static_cast<int64_t>(k) * dim_;
    for (int j = 0; j < dim_; ++j) {
      const double diff = static_cast<double>(trunk_vec[j]) - static_cast<double>(row[j]);
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  *index = best;
  *dist_sq = best_d;
}

void CodebookSet::ema_update(const std::vector<std::vector<int>>& assignments, const MatRM& latents,
                             float gamma, float eps) {
  const int64_t rows = latents.rows();
  for (int n = 0; n < n_; ++n) {
    Eigen::ArrayXf counts = Eigen::ArrayXf::Zero(k_);
    MatRM sums = MatRM::Zero(k_, dim_);
    for (int64_t r = 0; r < rows; ++r) {
      const int a = assignments[n][r];
      counts[a] += 1.0f;
      sums.row(a) += latents.row(r).segment(static_cast<int64_t>(n) * dim_, dim_);
      usage_[n][a] += 1.0;
    }
    ema_size_[n] = gamma * ema_size_[n] + (1.0f - gamma) * counts;
    ema_sum_[n] = gamma * ema_sum_[n] + (1.0f - gamma) * sums;
    for (int k = 0; k < k_; ++k)
      entries_[n].row(k) = ema_sum_[n].row(k) / (ema_size_[n][k] + eps);
  }
}

int CodebookSet::reset_dead(const MatRM& latents, float threshold, float eps, Rng& rng) {
  if (latents.rows() == 0) fail_domain("EmptyBatch", "codebook reset needs batch latents");
  int resets = 0;
  for (int n = 0; n < n_; ++n) {
    for (int k = 0; k < k_; ++k) {
      if (ema_size_[n][k] >= threshold) continue;
      const int64_t r = rng.uniform_int(0, latents.rows() - 1);
      auto latent = latents.row(r).segment(static_cast<int64_t>(n) * dim_, dim_);
      entries_[n].row(k) = latent;
      ema_sum_[n].row(k) = latent * (1.0f + eps);
      ema_size_[n][k] = 1.0f;
      ++resets;
    }
  }
  return resets;
}

double CodebookSet::usage_perplexity(int trunk) const {
  const double total = usage_[trunk].sum();
  if (total <= 0.0) return 0.0;
  double h = 0.0;
  for (int k = 0; k < k_; ++k) {
    const double p = usage_[trunk][k] / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::exp(h);
}

QuantizeResult quantize(const MatRM& latents, const CodebookSet& cb, int downsample, float fps) {
  const int n = cb.trunk_count(), dim = cb.entry_dim();
  if (latents.cols() != static_cast<int64_t>(n) * dim)
    fail_domain("ShapeMismatch", "latent width disagrees with codebook layout");
  const int64_t rows = latents.rows();
  QuantizeResult qr;
  qr.tokens.codebook_count = n;
  qr.tokens.codebook_size = cb.entry_count();
  qr.tokens.downsample = downsample;
  qr.tokens.source_fps = fps;
  qr.tokens.tokens.resize(rows * n);
  qr.quantized.resize(rows, latents.cols());
  qr.distances.resize(rows, n);
  qr.assignments.assign(n, std::vector<int>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    for (int t = 0; t < n; ++t) {
      int idx;
      double d2;
      cb.nearest(latents.row(r).data() + static_cast<int64_t>(t) * dim, t, &idx, &d2);
      qr.tokens.tokens[r * n + t] = static_cast<uint32_t>(idx);
      qr.assignments[t][r] = idx;
      qr.distances(r, t) = static_cast<float>(d2);
      qr.quantized.row(r).segment(static_cast<int64_t>(t) * dim, dim) = cb.entries(t).row(idx);
    }
  }
  return qr;
}

namespace {

struct Conv {
  Tensor w, b;
  int stride = 1, pad = 0;
  Tensor operator()(const Tensor& x) const { return ad::conv1d(x, w, b, stride, pad); }
};

Conv make_conv(ad::ParameterStore& ps, const std::string& name, int cin, int cout, int k,
               int stride, int pad, Rng& rng, float wstd = -1.0f) {
  const float std_w = wstd > 0.0f ? wstd : std::sqrt(2.0f / static_cast<float>(cin * k));
  Eigen::ArrayXf wdata(static_cast<int64_t>(cout) * cin * k);
  for (int64_t i = 0; i < wdata.size(); ++i) wdata[i] = float(rng.normal()) * std_w;
  Conv c;
  c.w = ps.add(name + ".w", Tensor::param({cout, cin, k}, wdata));
  c.b = ps.add(name + ".b", Tensor::param({cout}, Eigen::ArrayXf::Zero(cout)));
  c.stride = stride;
  c.pad = pad;
  return c;
}

struct ResBlock {
  Conv c1, c2;
  Tensor operator()(const Tensor& x) const {
    return ad::relu(ad::add(x, c2(ad::relu(c1(x)))));
  }
};

ResBlock make_res(ad::ParameterStore& ps, const std::string& name, int ch, Rng& rng) {
  return {make_conv(ps, name + ".c1", ch, ch, 3, 1, 1, rng),
          make_conv(ps, name + ".c2", ch, ch, 3, 1, 1, rng)};
}

int stage_count(int downsample) {
  int s = 0;
  for (int d = downsample; d > 1; d /= 2) ++s;
  return s;
}

// layer handles are rebuilt from the store on demand so the model object
// stays cheap to copy around
struct VqNet {
  Conv enc_in, enc_out, dec_in, dec_out;
  std::vector<ResBlock> enc_res, dec_res;
  std::vector<Conv> enc_down, dec_up;
};

Conv conv_ref(ad::ParameterStore& ps, const std::string& name, int stride, int pad) {
  return {ps.get(name + ".w"), ps.get(name + ".b"), stride, pad};
}

VqNet net_from_store(ad::ParameterStore& ps, const VqConfig& cfg) {
  VqNet n;
  const int stages = stage_count(cfg.downsample);
  n.enc_in = conv_ref(ps, "enc.in", 1, 1);
  n.enc_out = conv_ref(ps, "enc.out", 1, 0);
  n.dec_in = conv_ref(ps, "dec.in", 1, 0);
  n.dec_out = conv_ref(ps, "dec.out", 1, 1);
  for (int s = 0; s <= stages; ++s) {
    n.enc_res.push_back({conv_ref(ps, "enc.res" + std::to_string(s) + ".c1", 1, 1),
                         conv_ref(ps, "enc.res" + std::to_string(s) + ".c2", 1, 1)});
    n.dec_res.push_back({conv_ref(ps, "dec.res" + std::to_string(s) + ".c1", 1, 1),
                         conv_ref(ps, "dec.res" + std::to_string(s) + ".c2", 1, 1)});
  }
  for (int s = 0; s < stages; ++s) {
    n.enc_down.push_back(conv_ref(ps, "enc.down" + std::to_string(s), 2, 1));
    n.dec_up.push_back(conv_ref(ps, "dec.up" + std::to_string(s), 1, 1));
  }
  return n;
}

}  // namespace

MotionVqVae::MotionVqVae(const VqConfig& cfg, const kin::SkeletonT<double>& sk, uint64_t seed)
    : cfg_(cfg), sk_(sk) {
  cfg_.validate();
  sk_.validate();
  Rng rng(seed);
  const int h = cfg_.hidden, c = cfg_.latent_width();
  const int stages = stage_count(cfg_.downsample);
  make_conv(params_, "enc.in", kin::kFrameDim, h, 3, 1, 1, rng);
  for (int s = 0; s <= stages; ++s) make_res(params_, "enc.res" + std::to_string(s), h, rng);
  for (int s = 0; s < stages; ++s)
    make_conv(params_, "enc.down" + std::to_string(s), h, h, 3, 2, 1, rng);
  make_conv(params_, "enc.out", h, c, 1, 1, 0, rng);
  make_conv(params_, "dec.in", c, h, 1, 1, 0, rng);
  for (int s = 0; s <= stages; ++s) make_res(params_, "dec.res" + std::to_string(s), h, rng);
  for (int s = 0; s < stages; ++s)
    make_conv(params_, "dec.up" + std::to_string(s), h, h, 3, 1, 1, rng);
  make_conv(params_, "dec.out", h, kin::kFrameDim, 3, 1, 1, rng, 0.02f);
  codebooks_ = CodebookSet(cfg_, rng);
}

Tensor MotionVqVae::encoder_forward(const Tensor& x_bct) {
  VqNet net = net_from_store(params_, cfg_);
  Tensor x = ad::relu(net.enc_in(x_bct));
  for (size_t s = 0; s < net.enc_down.size(); ++s) {
    x = net.enc_res[s](x);
    x = ad::relu(net.enc_down[s](x));
  }
  x = net.enc_res.back()(x);
  return net.enc_out(x);
}

Tensor MotionVqVae::decoder_forward(const Tensor& f_bcl) {
  VqNet net = net_from_store(params_, cfg_);
  Tensor y = ad::relu(net.dec_in(f_bcl));
  y = net.dec_res[0](y);
  for (size_t s = 0; s < net.dec_up.size(); ++s) {
    y = ad::upsample_nearest(y, 2);
    y = ad::relu(net.dec_up[s](y));
    y = net.dec_res[s + 1](y);
  }
  return net.dec_out(y);
}

namespace {

Eigen::ArrayXf frames_to_bct(const std::vector<const MatRM*>& frames, int64_t t_count) {
  const int64_t b = static_cast<int64_t>(frames.size());
  Eigen::ArrayXf x(b * kin::kFrameDim * t_count);
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t ch = 0; ch < kin::kFrameDim; ++ch)
      for (int64_t t = 0; t < t_count; ++t)
        x[(bi * kin::kFrameDim + ch) * t_count + t] = (*frames[bi])(t, ch);
  return x;
}

MatRM pad_to_multiple(const Eigen::Matrix<float, Eigen::Dynamic, kin::kFrameDim, Eigen::RowMajor>& frames,
                      int r) {
  const int64_t t = frames.rows();
  const int64_t padded = (t + r - 1) / r * r;
  MatRM out(padded, kin::kFrameDim);
  out.topRows(t) = frames;
  for (int64_t i = t; i < padded; ++i) out.row(i) = frames.row(t - 1);
  return out;
}

}  // namespace

MatRM MotionVqVae::encode_window(const kin::MotionSequenceT<float>& m, bool strict) {
  m.validate();
  if (strict && m.frame_count() % cfg_.downsample != 0)
    fail_domain("LengthNotDivisible", "frame count not a multiple of the down-sample rate");
  MatRM padded = pad_to_multiple(m.frames, cfg_.downsample);
  const int64_t t_count = padded.rows();
  std::vector<const MatRM*> one{&padded};
  Tensor x = Tensor::constant({1, kin::kFrameDim, t_count}, frames_to_bct(one, t_count));
  Tensor f = encoder_forward(x);  // [1, c, L]
  const int64_t c = f.dim(1), l = f.dim(2);
  MatRM out(l, c);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t t = 0; t < l; ++t) out(t, ch) = f.value()[ch * l + t];
  return out;
}

TokenStream MotionVqVae::encode_tokens(const kin::MotionSequenceT<float>& m, bool strict) {
  MatRM f = encode_window(m, strict);
  return quantize(f, codebooks_, cfg_.downsample, m.fps).tokens;
}

kin::MotionSequenceT<float> MotionVqVae::decode_latents(const MatRM& quantized, float fps) {
  const int64_t l = quantized.rows(), c = quantized.cols();
  Eigen::ArrayXf data(c * l);
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t t = 0; t < l; ++t) data[ch * l + t] = quantized(t, ch);
  Tensor f = Tensor::constant({1, c, l}, data);
  Tensor m_hat = decoder_forward(f);  // [1, 279, T]
  const int64_t t_count = m_hat.dim(2);
  kin::MotionSequenceT<float> out;
  out.fps = fps;
  out.frames.resize(t_count, kin::kFrameDim);
  for (int64_t ch = 0; ch < kin::kFrameDim; ++ch)
    for (int64_t t = 0; t < t_count; ++t) out.frames(t, ch) = m_hat.value()[ch * t_count + t];
  return out;
}

kin::MotionSequenceT<float> MotionVqVae::decode_tokens(const TokenStream& ts,
                                                       int64_t original_frames) {
  ts.validate();
  if (ts.codebook_count != cfg_.codebook_count || ts.codebook_size != cfg_.codebook_size)
    fail_domain("BadToken", "token stream layout does not match this tokenizer");
  const int64_t l = ts.frame_count();
  const int dim = cfg_.code_dim;
  MatRM q(l, cfg_.latent_width());
  for (int64_t t = 0; t < l; ++t)
    for (int n = 0; n < cfg_.codebook_count; ++n)
      q.row(t).segment(static_cast<int64_t>(n) * dim, dim) =
          codebooks_.entries(n).row(static_cast<int>(ts.at(t, n)));
  auto out = decode_latents(q, ts.source_fps);
  if (original_frames > 0 && original_frames < out.frame_count())
    out.frames = out.frames.topRows(original_frames).eval();
  return out;
}

Tensor rot6d_to_matrix_t_graph(const Tensor& r6) {
  const int64_t g = r6.dim(0);
  Tensor ones31 = Tensor::full({3, 1}, 1.0f);
  Tensor ones13 = Tensor::full({1, 3}, 1.0f);
  auto tile3 = [&](const Tensor& col) { return ad::matmul(col, ones13); };

  Tensor a0 = ad::slice(r6, 1, 0, 3);
  Tensor b0 = ad::slice(r6, 1, 3, 3);
  Tensor na = ad::sqrt_op(ad::add_const(ad::matmul(ad::square(a0), ones31), 1e-12f));
  Tensor a = ad::div(a0, tile3(na));
  Tensor dot = ad::matmul(ad::mul(a, b0), ones31);
  Tensor b1 = ad::sub(b0, ad::mul(a, tile3(dot)));
  Tensor nb = ad::sqrt_op(ad::add_const(ad::matmul(ad::square(b1), ones31), 1e-12f));
  Tensor b = ad::div(b1, tile3(nb));

  Tensor ax = ad::slice(a, 1, 0, 1), ay = ad::slice(a, 1, 1, 1), az = ad::slice(a, 1, 2, 1);
  Tensor bx = ad::slice(b, 1, 0, 1), by = ad::slice(b, 1, 1, 1), bz = ad::slice(b, 1, 2, 1);
  Tensor cx = ad::sub(ad::mul(ay, bz), ad::mul(az, by));
  Tensor cy = ad::sub(ad::mul(az, bx), ad::mul(ax, bz));
  Tensor cz = ad::sub(ad::mul(ax, by), ad::mul(ay, bx));
  Tensor c = ad::concat({cx, cy, cz}, 1);

  return ad::concat({ad::reshape(a, {g, 1, 3}), ad::reshape(b, {g, 1, 3}),
                     ad::reshape(c, {g, 1, 3})},
                    1);
}

Tensor fk_positions_graph(const Tensor& frames_bt, const kin::SkeletonT<double>& sk, int64_t batch,
                          int64_t frames) {
  const int64_t g = batch * frames;
  Tensor root6 = ad::reshape(ad::slice(frames_bt, 2, kin::kRootRotOffset, 6), {g, 6});
  Tensor rt_root = rot6d_to_matrix_t_graph(root6);
  Tensor j6 = ad::reshape(ad::slice(frames_bt, 2, kin::kJointRotOffset, 6 * kin::kNonRootJoints),
                          {g * kin::kNonRootJoints, 6});
  Tensor rt_joints = ad::reshape(rot6d_to_matrix_t_graph(j6), {g, kin::kNonRootJoints, 9});

  // root path: velocities are already in the loss frame; frame 0 stays put
  Tensor vel = ad::slice(frames_bt, 2, kin::kRootVelOffset, 3);
  Tensor vel_masked =
      ad::concat({Tensor::zeros({batch, 1, 3}), ad::slice(vel, 1, 1, frames - 1)}, 1);
  Tensor root_pos = ad::reshape(ad::cumsum(vel_masked, 1), {g, 3});

  std::vector<Tensor> global_rot(kin::kJointCount);
  std::vector<Tensor> pos(kin::kJointCount);
  global_rot[0] = ad::permute(rt_root, {0, 2, 1});
  pos[0] = root_pos;
  for (int j = 1; j < kin::kJointCount; ++j) {
    const int parent = sk.parent_index[j];
    Tensor local_t = ad::reshape(ad::slice(rt_joints, 1, j - 1, 1), {g, 3, 3});
    Tensor local = ad::permute(local_t, {0, 2, 1});
    global_rot[j] = ad::bmm(global_rot[parent], local);
    Eigen::ArrayXf off(3);
    for (int i = 0; i < 3; ++i) off[i] = static_cast<float>(sk.bone_offset[j][i]);
    Tensor offset = Tensor::constant({3, 1}, off);
    Tensor step = ad::reshape(ad::matmul(ad::reshape(global_rot[parent], {g * 3, 3}), offset),
                              {g, 3});
    pos[j] = ad::add(pos[parent], step);
  }
  return ad::concat(pos, 1);  // [g, 69]
}

namespace {

// stored velocity channels of frames [B,T,ch..ch+6*joints] compared against
// the velocities implied by the rotation channels [B,T,rot..]
Tensor velocity_consistency(const Tensor& frames_bt, int rot_offset, int vel_offset, int joints,
                            int64_t batch, int64_t frames, float beta) {
  const int64_t g = batch * frames;
  const int64_t gp = batch * (frames - 1) * joints;
  Tensor r6 = ad::reshape(ad::slice(frames_bt, 2, rot_offset, 6 * joints), {g * joints, 6});
  Tensor rt = ad::reshape(rot6d_to_matrix_t_graph(r6), {batch, frames, joints * 9});
  Tensor rt_a = ad::reshape(ad::slice(rt, 1, 0, frames - 1), {gp, 3, 3});
  Tensor rt_b = ad::reshape(ad::slice(rt, 1, 1, frames - 1), {gp, 3, 3});
  // R_t^T R_{t+1} written with the stored transposes: RT_a * RT_b^T
  Tensor implied = ad::bmm(rt_a, rt_b, true);
  Tensor implied_t = ad::permute(implied, {0, 2, 1});
  Tensor implied6 = ad::reshape(ad::slice(implied_t, 1, 0, 2), {gp, 6});
  Tensor stored = ad::reshape(
      ad::slice(ad::slice(frames_bt, 2, vel_offset, 6 * joints), 1, 0, frames - 1), {gp, 6});
  return ad::smooth_l1(stored, implied6, beta);
}

}  // namespace

VqLossTensors MotionVqVae::loss_graph(const Tensor& m_hat_bt, const MatRM& target_frames,
                                      const Tensor& f_flat, const MatRM& f_quantized,
                                      int64_t batch, int64_t frames) {
  if (m_hat_bt.shape() != ad::Shape{batch, frames, kin::kFrameDim})
    fail_domain("LengthMismatch", "reconstruction shape disagrees with batch layout");
  if (target_frames.rows() != batch * frames)
    fail_domain("LengthMismatch", "target frame count disagrees with batch layout");

  Eigen::ArrayXf tdata = Eigen::Map<const Eigen::ArrayXf>(target_frames.data(), target_frames.size());
  Tensor target = Tensor::constant({batch, frames, kin::kFrameDim}, tdata);
  Eigen::ArrayXf qdata = Eigen::Map<const Eigen::ArrayXf>(f_quantized.data(), f_quantized.size());
  Tensor q_const = Tensor::constant({f_flat.dim(0), f_flat.dim(1)}, qdata);

  VqLossTensors out;
  out.commitment = ad::mse(f_flat, q_const);
  out.l_m = ad::smooth_l1(m_hat_bt, target, cfg_.smooth_beta);
  Tensor fk_pred = fk_positions_graph(m_hat_bt, sk_, batch, frames);
  Tensor fk_target = ad::stop_gradient(fk_positions_graph(target, sk_, batch, frames));
  out.l_j = ad::smooth_l1(fk_pred, fk_target, cfg_.smooth_beta);
  Tensor v_root = velocity_consistency(m_hat_bt, kin::kRootRotOffset, kin::kRootRotVelOffset, 1,
                                       batch, frames, cfg_.smooth_beta);
  Tensor v_joint = velocity_consistency(m_hat_bt, kin::kJointRotOffset, kin::kJointRotVelOffset,
                                        kin::kNonRootJoints, batch, frames, cfg_.smooth_beta);
  out.l_v = ad::add(v_root, v_joint);

  Tensor recon = ad::add(ad::add(ad::scale(out.l_m, cfg_.lambda_m), ad::scale(out.l_j, cfg_.lambda_j)),
                         ad::scale(out.l_v, cfg_.lambda_v));
  out.total = ad::add(ad::scale(out.commitment, cfg_.lambda_c), ad::scale(recon, cfg_.lambda_r));

  VqLossReport& r = out.report;
  r.lambda_c = cfg_.lambda_c;
  r.lambda_r = cfg_.lambda_r;
  r.lambda_m = cfg_.lambda_m;
  r.lambda_j = cfg_.lambda_j;
  r.lambda_v = cfg_.lambda_v;
  r.commitment = out.commitment.item();
  r.l_m = out.l_m.item();
  r.l_j = out.l_j.item();
  r.l_v = out.l_v.item();
  r.reconstruction = r.lambda_m * r.l_m + r.lambda_j * r.l_j + r.lambda_v * r.l_v;
  r.total = r.lambda_c * r.commitment + r.lambda_r * r.reconstruction;
  return out;
}

VqLossReport MotionVqVae::evaluate_loss(const kin::MotionSequenceT<float>& m) {
  MatRM f = encode_window(m);
  auto qr = quantize(f, codebooks_, cfg_.downsample, m.fps);
  auto recon = decode_tokens(qr.tokens);
  MatRM padded = pad_to_multiple(m.frames, cfg_.downsample);
  const int64_t t_count = padded.rows();
  MatRM recon_full = pad_to_multiple(recon.frames, cfg_.downsample);

  Eigen::ArrayXf mdata(t_count * kin::kFrameDim);
  for (int64_t t = 0; t < t_count; ++t)
    for (int64_t ch = 0; ch < kin::kFrameDim; ++ch)
      mdata[t * kin::kFrameDim + ch] = recon_full(t, ch);
  Tensor m_hat = Tensor::constant({1, t_count, kin::kFrameDim}, mdata);
  Eigen::ArrayXf fdata = Eigen::Map<const Eigen::ArrayXf>(f.data(), f.size());
  Tensor f_t = Tensor::constant({f.rows(), f.cols()}, fdata);
  return loss_graph(m_hat, padded, f_t, qr.quantized, 1, t_count).report;
}

double MotionVqVae::reconstruction_mpjpe_mm(const kin::MotionSequenceT<float>& m) {
  auto recon = decode_tokens(encode_tokens(m), m.frame_count());
  recon.initial_root_position = m.initial_root_position;
  recon.initial_root_rotation = m.initial_root_rotation;
  recon.skeleton_ref = m.skeleton_ref;
  auto ja = kin::forward_kinematics(io::to_double(m), sk_);
  auto jb = kin::forward_kinematics(io::to_double(recon), sk_);
  double acc = 0.0;
  const int64_t rows = ja.p.rows();
  for (int64_t i = 0; i < rows; ++i) acc += (ja.p.row(i) - jb.p.row(i)).norm();
  return acc / static_cast<double>(rows) * 1000.0;
}

VqTrainStep vq_train_step(MotionVqVae& model, const std::vector<const MatRM*>& batch_frames,
                          const VqTrainConfig& tcfg, Rng& rng, bool allow_reset) {
  const auto& cfg = model.config();
  const int64_t b = static_cast<int64_t>(batch_frames.size());
  if (b == 0) fail_domain("EmptyBatch", "training step needs at least one window");
  const int64_t t_count = batch_frames[0]->rows();
  if (t_count % cfg.downsample != 0)
    fail_domain("LengthNotDivisible", "training windows must be divisible by the down-sample rate");
  for (const auto* f : batch_frames)
    if (f->rows() != t_count) fail_domain("LengthMismatch", "training windows must share a length");

  Tensor x = Tensor::constant({b, kin::kFrameDim, t_count}, frames_to_bct(batch_frames, t_count));
  Tensor f = model.encoder_forward(x);
  const int64_t c = f.dim(1), l = f.dim(2);
  Tensor f_flat = ad::reshape(ad::permute(f, {0, 2, 1}), {b * l, c});
  MatRM latents(b * l, c);
  Eigen::Map<Eigen::ArrayXf>(latents.data(), latents.size()) = f_flat.value();
  auto qr = quantize(latents, model.codebooks(), cfg.downsample, 60.0f);

  Eigen::ArrayXf qflat = Eigen::Map<const Eigen::ArrayXf>(qr.quantized.data(), qr.quantized.size());
  Tensor f_q = ad::straight_through(qflat, f_flat);
  Tensor dec_in = ad::permute(ad::reshape(f_q, {b, l, c}), {0, 2, 1});
  Tensor m_hat = model.decoder_forward(dec_in);
  Tensor m_hat_bt = ad::permute(m_hat, {0, 2, 1});

  MatRM target(b * t_count, kin::kFrameDim);
  for (int64_t bi = 0; bi < b; ++bi) target.middleRows(bi * t_count, t_count) = *batch_frames[bi];

  auto losses = model.loss_graph(m_hat_bt, target, f_flat, qr.quantized, b, t_count);
  model.params().ensure_zero_grads();
  ad::backward(losses.total);
  ad::adam_step(model.params(), tcfg.lr, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps);
  model.codebooks().ema_update(qr.assignments, latents, cfg.ema_gamma, cfg.ema_eps);

  VqTrainStep step;
  step.report = losses.report;
  if (allow_reset)
    step.resets = model.codebooks().reset_dead(latents, cfg.reset_threshold, cfg.ema_eps, rng);
  return step;
}

VqTrainResult train_vqvae(MotionVqVae& model,
                          const std::vector<kin::MotionSequenceT<float>>& windows,
                          const VqTrainConfig& tcfg, Rng& rng,
                          const std::function<void(int, const VqLossReport&)>& on_step) {
  if (windows.empty()) fail_domain("EmptyBatch", "no training windows");
  std::vector<MatRM> mats;
  mats.reserve(windows.size());
  for (const auto& w : windows) {
    w.validate();
    mats.emplace_back(w.frames);
  }
  VqTrainResult result;
  for (int step = 0; step < tcfg.steps; ++step) {
    std::vector<const MatRM*> batch;
    for (int i = 0; i < tcfg.batch; ++i)
      batch.push_back(&mats[rng.uniform_int(0, static_cast<int64_t>(mats.size()) - 1)]);
    const bool reset_now = (step + 1) % model.config().reset_interval == 0;
    auto sr = vq_train_step(model, batch, tcfg, rng, reset_now);
    result.total_resets += sr.resets;
    result.trace.push_back(sr.report);
    if (on_step) on_step(step, sr.report);
  }
  return result;
}

}  // namespace motok::vq
