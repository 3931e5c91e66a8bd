#include <doctest.h>

#include <Eigen/Geometry>
#include <cmath>
#include <vector>

#include "motok/io.hpp"
#include "motok/vqvae.hpp"

using namespace motok;
using namespace motok::vq;

namespace {

VqConfig tiny_config() {
  VqConfig cfg;
  cfg.codebook_count = 2;
  cfg.codebook_size = 16;
  cfg.code_dim = 8;
  cfg.downsample = 4;
  cfg.hidden = 16;
  return cfg;
}

kin::Mat3<double> random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  q.normalize();
  return q.toRotationMatrix();
}

std::vector<kin::AbsolutePose> smooth_walk(Rng& rng, int frames) {
  std::vector<kin::AbsolutePose> abs(frames);
  kin::Mat3<double> root = random_rotation(rng);
  std::array<kin::Mat3<double>, kin::kNonRootJoints> joints;
  for (auto& j : joints) j = random_rotation(rng);
  kin::Vec3<double> pos(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 1.5));
  for (int t = 0; t < frames; ++t) {
    Eigen::AngleAxisd droot(rng.uniform(-0.05, 0.05),
                            kin::Vec3<double>(rng.normal(), rng.normal(), rng.normal()).normalized());
    root = root * droot.toRotationMatrix();
    pos += kin::Vec3<double>(rng.normal(), rng.normal(), rng.normal()) * 0.01;
    abs[t].root_position = pos;
    abs[t].root_rotation = root;
    for (int j = 0; j < kin::kNonRootJoints; ++j) {
      Eigen::AngleAxisd dj(rng.uniform(-0.05, 0.05),
                           kin::Vec3<double>(rng.normal(), rng.normal(), rng.normal()).normalized());
      joints[j] = joints[j] * dj.toRotationMatrix();
      abs[t].joint_rotations[j] = joints[j];
    }
  }
  return abs;
}

kin::MotionSequenceT<float> random_motion(uint64_t seed, int frames) {
  Rng rng(seed);
  return io::to_float(kin::derive_representation(smooth_walk(rng, frames), 60.0));
}

kin::MotionSequence rest_double(int frames) {
  kin::MotionSequence m;
  m.frames.setZero(frames, kin::kFrameDim);
  for (int t = 0; t < frames; ++t) {
    m.root_rot(t) = kin::identity_rot6d<double>().transpose();
    m.root_rot_vel(t) = kin::identity_rot6d<double>().transpose();
    for (int j = 0; j < kin::kNonRootJoints; ++j) {
      m.joint_rot(t, j) = kin::identity_rot6d<double>().transpose();
      m.joint_rot_vel(t, j) = kin::identity_rot6d<double>().transpose();
    }
  }
  return m;
}

ad::Tensor frames_tensor(const kin::MotionSequenceT<float>& m) {
  Eigen::ArrayXf data =
      Eigen::Map<const Eigen::ArrayXf>(m.frames.data(), m.frames.size());
  return ad::Tensor::constant({1, m.frame_count(), kin::kFrameDim}, data);
}

double smooth_l1_elem(double d, double beta = 1.0) {
  const double a = std::abs(d);
  return a < beta ? 0.5 * d * d / beta : a - 0.5 * beta;
}

}  // namespace

TEST_CASE("encoder latent shapes") {
  MotionVqVae model(tiny_config(), kin::canonical_skeleton(), 11);
  auto m60 = random_motion(1, 60);
  MatRM f = model.encode_window(m60);
  CHECK(f.rows() == 15);
  CHECK(f.cols() == 16);
  MatRM again = model.encode_window(m60);
  CHECK((f - again).cwiseAbs().maxCoeff() == 0.0f);

  auto m4 = random_motion(2, 4);
  CHECK(model.encode_window(m4).rows() == 1);
}

TEST_CASE("encoder pads to the stride") {
  MotionVqVae model(tiny_config(), kin::canonical_skeleton(), 11);
  auto m58 = random_motion(3, 58);
  CHECK(model.encode_window(m58).rows() == 15);
  try {
    model.encode_window(m58, true);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "LengthNotDivisible");
  }
}

TEST_CASE("quantize picks the exact entry") {
  VqConfig cfg = tiny_config();
  Rng rng(5);
  CodebookSet cb(cfg, rng);
  MatRM latent(1, cfg.latent_width());
  latent.row(0).segment(0, 8) = cb.entries(0).row(7);
  latent.row(0).segment(8, 8) = cb.entries(1).row(3);
  auto qr = quantize(latent, cb, cfg.downsample, 60.0f);
  CHECK(qr.tokens.tokens == std::vector<uint32_t>{7, 3});
  CHECK(qr.distances(0, 0) == 0.0f);
  CHECK(qr.distances(0, 1) == 0.0f);
  CHECK((qr.quantized.row(0) - latent.row(0)).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("quantize matches a brute force scan") {
  VqConfig cfg = tiny_config();
  Rng rng(6);
  CodebookSet cb(cfg, rng);
  MatRM latents(40, cfg.latent_width());
  for (int64_t i = 0; i < latents.size(); ++i) latents.data()[i] = float(rng.normal()) * 0.3f;
  auto qr = quantize(latents, cb, cfg.downsample, 60.0f);
  for (int64_t r = 0; r < latents.rows(); ++r) {
    for (int n = 0; n < cfg.codebook_count; ++n) {
      Eigen::VectorXd v = latents.row(r).segment(n * 8, 8).cast<double>();
      int best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (int k = 0; k < cfg.codebook_size; ++k) {
        double d = (v - cb.entries(n).row(k).cast<double>().transpose()).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      CHECK(int(qr.tokens.at(r, n)) == best);
      CHECK(qr.distances(r, n) == doctest::Approx(best_d).epsilon(1e-5));
    }
  }
}

TEST_CASE("quantize breaks ties toward the low index") {
  VqConfig cfg = tiny_config();
  Rng rng(7);
  CodebookSet cb(cfg, rng);
  cb.entries(0).row(9) = cb.entries(0).row(3);
  MatRM latent = MatRM::Zero(1, cfg.latent_width());
  latent.row(0).segment(0, 8) = cb.entries(0).row(3);
  auto qr = quantize(latent, cb, cfg.downsample, 60.0f);
  CHECK(qr.tokens.at(0, 0) == 3);
}

TEST_CASE("token stream length law") {
  MotionVqVae model(tiny_config(), kin::canonical_skeleton(), 11);
  auto ts = model.encode_tokens(random_motion(4, 60));
  ts.validate();
  CHECK(ts.length() == 30);
  CHECK(ts.frame_count() == 15);
  CHECK(ts.source_fps == 60.0f);
}

TEST_CASE("decode restores the frame count") {
  MotionVqVae model(tiny_config(), kin::canonical_skeleton(), 11);
  auto ts = model.encode_tokens(random_motion(5, 60));
  auto out = model.decode_tokens(ts);
  CHECK(out.frame_count() == 60);
  auto again = model.decode_tokens(ts);
  CHECK((out.frames - again.frames).cwiseAbs().maxCoeff() == 0.0f);

  auto short_ts = model.encode_tokens(random_motion(6, 58));
  CHECK(model.decode_tokens(short_ts).frame_count() == 60);
  CHECK(model.decode_tokens(short_ts, 58).frame_count() == 58);
}

TEST_CASE("decode rejects a mismatched stream") {
  MotionVqVae model(tiny_config(), kin::canonical_skeleton(), 11);
  auto ts = model.encode_tokens(random_motion(7, 8));
  ts.codebook_size = 8;
  for (auto& t : ts.tokens) t %= 8;
  try {
    model.decode_tokens(ts);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "BadToken");
  }
}

TEST_CASE("loss vanishes on a perfect reconstruction") {
  MotionVqVae model(tiny_config(), kin::canonical_skeleton(), 11);
  auto m = random_motion(8, 8);
  ad::Tensor m_hat = frames_tensor(m);
  MatRM target = m.frames;
  MatRM f = MatRM::Random(2, 16);
  ad::Tensor f_t = ad::Tensor::constant({2, 16}, Eigen::Map<const Eigen::ArrayXf>(f.data(), f.size()));
  auto losses = model.loss_graph(m_hat, target, f_t, f, 1, 8);
  const auto& r = losses.report;
  CHECK(r.commitment == 0.0f);
  CHECK(r.l_m == 0.0f);
  CHECK(r.l_j == 0.0f);
  CHECK(r.l_v < 1e-8f);
  CHECK(r.total < 1e-8f);
  CHECK(r.total == r.lambda_c * r.commitment + r.lambda_r * r.reconstruction);
  CHECK(r.reconstruction == r.lambda_m * r.l_m + r.lambda_j * r.l_j + r.lambda_v * r.l_v);
}

TEST_CASE("velocity loss scores self consistency only") {
  MotionVqVae model(tiny_config(), kin::canonical_skeleton(), 11);
  auto m = random_motion(9, 8);
  auto other = random_motion(10, 8);  // consistent channels, different motion
  ad::Tensor m_hat = frames_tensor(other);
  MatRM f = MatRM::Zero(2, 16);
  ad::Tensor f_t = ad::Tensor::constant({2, 16}, Eigen::ArrayXf::Zero(32));
  auto losses = model.loss_graph(m_hat, m.frames, f_t, f, 1, 8);
  CHECK(losses.report.l_v < 1e-8f);
  CHECK(losses.report.l_m > 1e-3f);
}

TEST_CASE("joint loss matches hand fk arithmetic") {
  auto sk = kin::canonical_skeleton();
  kin::MotionSequence td = rest_double(2);
  kin::MotionSequence pd = rest_double(2);
  kin::Mat3<double> rx = Eigen::AngleAxisd(0.3, kin::Vec3<double>::UnitX()).toRotationMatrix();
  pd.joint_rot(1, 7) = kin::matrix_to_rot6d<double>(rx).transpose();  // l_shoulder, frame 1

  auto pa = kin::forward_kinematics(td, sk);
  auto pb = kin::forward_kinematics(pd, sk);
  double expected = 0.0;
  for (int64_t i = 0; i < pa.p.rows(); ++i)
    for (int c = 0; c < 3; ++c) expected += smooth_l1_elem(pb.p(i, c) - pa.p(i, c));
  expected /= double(2 * 23 * 3);

  MotionVqVae model(tiny_config(), sk, 11);
  auto mf = io::to_float(pd);
  MatRM f = MatRM::Zero(1, 16);
  ad::Tensor f_t = ad::Tensor::constant({1, 16}, Eigen::ArrayXf::Zero(16));
  MatRM target = io::to_float(td).frames;
  auto losses = model.loss_graph(frames_tensor(mf), target, f_t, f, 1, 2);
  CHECK(losses.report.l_j == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("loss rejects mismatched lengths") {
  MotionVqVae model(tiny_config(), kin::canonical_skeleton(), 11);
  auto m = random_motion(11, 8);
  MatRM f = MatRM::Zero(2, 16);
  ad::Tensor f_t = ad::Tensor::constant({2, 16}, Eigen::ArrayXf::Zero(32));
  MatRM target = m.frames.topRows(6);
  CHECK_THROWS_AS(model.loss_graph(frames_tensor(m), target, f_t, f, 1, 8), Error);
}

TEST_CASE("loss report identities on a live model") {
  MotionVqVae model(tiny_config(), kin::canonical_skeleton(), 11);
  auto r = model.evaluate_loss(random_motion(12, 24));
  CHECK(r.total == r.lambda_c * r.commitment + r.lambda_r * r.reconstruction);
  CHECK(r.reconstruction == r.lambda_m * r.l_m + r.lambda_j * r.l_j + r.lambda_v * r.l_v);
  CHECK(r.commitment >= 0.0f);
  CHECK(r.l_m >= 0.0f);
  CHECK(r.l_j >= 0.0f);
  CHECK(r.l_v >= 0.0f);
}

TEST_CASE("ema leaves unassigned entries in place") {
  VqConfig cfg = tiny_config();
  cfg.codebook_count = 1;
  cfg.codebook_size = 4;
  cfg.code_dim = 4;
  Rng rng(13);
  CodebookSet cb(cfg, rng);
  MatRM before = cb.entries(0);
  MatRM latents = MatRM::Random(8, 4);
  std::vector<std::vector<int>> assign{std::vector<int>(8, 0)};
  cb.ema_update(assign, latents, 0.99f, 1e-5f);
  for (int k = 1; k < 4; ++k)
    CHECK((cb.entries(0).row(k) - before.row(k)).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("ema converges to the assigned latent") {
  VqConfig cfg = tiny_config();
  cfg.codebook_count = 1;
  cfg.codebook_size = 4;
  cfg.code_dim = 4;
  Rng rng(14);
  CodebookSet cb(cfg, rng);
  Eigen::RowVectorXf v(4);
  v << 0.7f, -0.2f, 0.4f, 1.1f;
  MatRM latents(8, 4);
  for (int r = 0; r < 8; ++r) latents.row(r) = v;
  std::vector<std::vector<int>> assign{std::vector<int>(8, 2)};
  for (int i = 0; i < 100; ++i) cb.ema_update(assign, latents, 0.9f, 1e-5f);
  CHECK((cb.entries(0).row(2) - v).cwiseAbs().maxCoeff() < 1e-4f);
}

TEST_CASE("ema recovers cluster means") {
  VqConfig cfg = tiny_config();
  cfg.codebook_count = 1;
  cfg.codebook_size = 4;
  cfg.code_dim = 2;
  Rng rng(15);
  CodebookSet cb(cfg, rng);
  const float centers[4][2] = {{1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
  for (int k = 0; k < 4; ++k) {
    cb.entries(0)(k, 0) = centers[k][0] + 0.05f * float(rng.normal());
    cb.entries(0)(k, 1) = centers[k][1] + 0.05f * float(rng.normal());
  }
  cb.ema_embed_sum(0) = cb.entries(0);
  cb.ema_cluster_size(0).setOnes();

  Rng data(16);
  std::vector<Eigen::Vector2d> all_points;
  for (int step = 0; step < 200; ++step) {
    MatRM lat(64, 2);
    for (int r = 0; r < 64; ++r) {
      const int c = r % 4;
      lat(r, 0) = centers[c][0] + 0.05f * float(data.normal());
      lat(r, 1) = centers[c][1] + 0.05f * float(data.normal());
      all_points.emplace_back(lat(r, 0), lat(r, 1));
    }
    auto qr = quantize(lat, cb, 1, 60.0f);
    cb.ema_update(qr.assignments, lat, 0.9f, 1e-5f);
  }

  // Lloyd's iterations from the true centers give the oracle means
  Eigen::Matrix<double, 4, 2> oracle;
  for (int k = 0; k < 4; ++k) oracle.row(k) << centers[k][0], centers[k][1];
  for (int it = 0; it < 10; ++it) {
    Eigen::Matrix<double, 4, 2> sum = Eigen::Matrix<double, 4, 2>::Zero();
    Eigen::Vector4d count = Eigen::Vector4d::Zero();
    for (const auto& p : all_points) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (int k = 0; k < 4; ++k) {
        double d = (oracle.row(k).transpose() - p).squaredNorm();
        if (d < bd) {
          bd = d;
          best = k;
        }
      }
      sum.row(best) += p.transpose();
      count[best] += 1.0;
    }
    for (int k = 0; k < 4; ++k) oracle.row(k) = sum.row(k) / count[k];
  }
  for (int k = 0; k < 4; ++k) {
    double best = std::numeric_limits<double>::infinity();
    for (int j = 0; j < 4; ++j)
      best = std::min(best, (cb.entries(0).row(k).cast<double>() - oracle.row(j)).norm());
    CHECK(best < 1e-2);
  }
}

TEST_CASE("reset skips healthy entries") {
  VqConfig cfg = tiny_config();
  Rng rng(17);
  CodebookSet cb(cfg, rng);
  MatRM before = cb.entries(0);
  MatRM latents = MatRM::Random(10, cfg.latent_width());
  CHECK(cb.reset_dead(latents, 1.0f, 1e-5f, rng) == 0);
  CHECK((cb.entries(0) - before).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("reset adopts a batch latent verbatim") {
  VqConfig cfg = tiny_config();
  Rng rng(18);
  CodebookSet cb(cfg, rng);
  cb.ema_cluster_size(0)[2] = 0.2f;
  MatRM latents = MatRM::Random(10, cfg.latent_width());
  CHECK(cb.reset_dead(latents, 1.0f, 1e-5f, rng) == 1);
  bool found = false;
  for (int r = 0; r < 10; ++r)
    if ((cb.entries(0).row(2) - latents.row(r).segment(0, 8)).cwiseAbs().maxCoeff() == 0.0f)
      found = true;
  CHECK(found);
  CHECK(cb.ema_cluster_size(0)[2] == 1.0f);
}

TEST_CASE("reset needs latents") {
  VqConfig cfg = tiny_config();
  Rng rng(19);
  CodebookSet cb(cfg, rng);
  MatRM empty(0, cfg.latent_width());
  try {
    cb.reset_dead(empty, 1.0f, 1e-5f, rng);
    CHECK(false);
  } catch (const Error& e) {
    CHECK(e.code() == "EmptyBatch");
  }
}

TEST_CASE("resets lift code usage") {
  auto run = [](bool with_resets) {
    VqConfig cfg;
    cfg.codebook_count = 1;
    cfg.codebook_size = 8;
    cfg.code_dim = 4;
    cfg.downsample = 1;
    cfg.hidden = 16;
    Rng init(20);
    CodebookSet cb(cfg, init);
    Rng data(21), reset_rng(22);
    for (int step = 0; step < 500; ++step) {
      MatRM lat(32, 4);
      for (int r = 0; r < 32; ++r) {
        const float center = (data.uniform_int(0, 1) == 0) ? -1.0f : 1.0f;
        for (int d = 0; d < 4; ++d) lat(r, d) = center + 0.3f * float(data.normal());
      }
      auto qr = quantize(lat, cb, 1, 60.0f);
      cb.ema_update(qr.assignments, lat, 0.99f, 1e-5f);
      if (with_resets && (step + 1) % 25 == 0) cb.reset_dead(lat, 1.0f, 1e-5f, reset_rng);
    }
    return cb.usage_perplexity(0);
  };
  CHECK(run(true) > run(false));
}

TEST_CASE("training loss decreases") {
  std::vector<kin::MotionSequenceT<float>> windows;
  for (int i = 0; i < 32; ++i) windows.push_back(random_motion(100 + i, 32));
  VqConfig cfg = tiny_config();
  cfg.codebook_size = 32;
  MotionVqVae model(cfg, kin::canonical_skeleton(), 23);
  VqTrainConfig tcfg;
  tcfg.steps = 200;
  tcfg.batch = 8;
  Rng rng(24);
  auto result = train_vqvae(model, windows, tcfg, rng);
  REQUIRE(int(result.trace.size()) == 200);
  auto window_avg = [&](int lo) {
    double s = 0;
    for (int i = lo; i < lo + 50; ++i) s += result.trace[i].total;
    return s / 50.0;
  };
  CHECK(window_avg(0) > window_avg(50));
  CHECK(window_avg(50) > window_avg(100));
  CHECK(window_avg(100) > window_avg(150));
}

// Single-slot windows keep the comparison honest: with several latent slots per
// window the decoder blends neighboring codes and entry count stops mattering.
TEST_CASE("product codes beat one codebook") {
  std::vector<kin::MotionSequenceT<float>> windows;
  for (int c = 0; c < 25; ++c) {
    auto clip = random_motion(300 + c, 68);
    for (int k = 0; k < 8; ++k) {
      kin::MotionSequenceT<float> w;
      w.frames = clip.frames.block(k * 8, 0, 4, kin::kFrameDim);
      w.fps = clip.fps;
      windows.push_back(w);
    }
  }
  auto final_lj = [&](int n, int k) {
    VqConfig cfg;
    cfg.codebook_count = n;
    cfg.codebook_size = k;
    cfg.code_dim = 16;
    cfg.downsample = 4;
    cfg.hidden = 16;
    MotionVqVae model(cfg, kin::canonical_skeleton(), 31);
    VqTrainConfig tcfg;
    tcfg.steps = 3000;
    tcfg.batch = 8;
    tcfg.lr = 2e-3f;
    Rng rng(32);
    train_vqvae(model, windows, tcfg, rng);
    tcfg.steps = 500;
    tcfg.lr = 5e-4f;
    train_vqvae(model, windows, tcfg, rng);
    double s = 0;
    for (const auto& w : windows) s += model.evaluate_loss(w).l_j;
    return s / double(windows.size());
  };
  CHECK(final_lj(2, 8) < final_lj(1, 16));
}

TEST_CASE("seed reproduces the loss trace") {
  std::vector<kin::MotionSequenceT<float>> windows;
  for (int i = 0; i < 4; ++i) windows.push_back(random_motion(300 + i, 16));
  auto trace = [&]() {
    MotionVqVae model(tiny_config(), kin::canonical_skeleton(), 31);
    VqTrainConfig tcfg;
    tcfg.steps = 25;
    tcfg.batch = 4;
    Rng rng(32);
    return train_vqvae(model, windows, tcfg, rng).trace;
  };
  auto a = trace(), b = trace();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].total == b[i].total);
    CHECK(a[i].l_j == b[i].l_j);
  }
}

TEST_CASE("overfit reconstruction lands under 30 mm") {
  auto clip = random_motion(40, 60);
  VqConfig cfg = tiny_config();
  cfg.hidden = 32;
  MotionVqVae model(cfg, kin::canonical_skeleton(), 41);
  VqTrainConfig tcfg;
  tcfg.steps = 600;
  tcfg.batch = 1;
  tcfg.lr = 2e-3f;
  Rng rng(42);
  train_vqvae(model, {clip}, tcfg, rng);
  tcfg.steps = 300;
  tcfg.lr = 5e-4f;
  train_vqvae(model, {clip}, tcfg, rng);
  CHECK(model.reconstruction_mpjpe_mm(clip) < 30.0);
}

TEST_CASE("straight through reaches the encoder") {
  VqConfig cfg = tiny_config();
  cfg.lambda_c = 0.0f;  // reconstruction terms are the only gradient source
  MotionVqVae model(cfg, kin::canonical_skeleton(), 50);
  auto m = random_motion(51, 16);
  MatRM frames = m.frames;

  Eigen::ArrayXf xdata(kin::kFrameDim * 16);
  for (int ch = 0; ch < kin::kFrameDim; ++ch)
    for (int t = 0; t < 16; ++t) xdata[ch * 16 + t] = frames(t, ch);
  ad::Tensor x = ad::Tensor::constant({1, kin::kFrameDim, 16}, xdata);
  ad::Tensor f = model.encoder_forward(x);
  const int64_t l = f.dim(2), c = f.dim(1);
  ad::Tensor f_flat = ad::reshape(ad::permute(f, {0, 2, 1}), {l, c});
  MatRM latents(l, c);
  Eigen::Map<Eigen::ArrayXf>(latents.data(), latents.size()) = f_flat.value();
  auto qr = quantize(latents, model.codebooks(), cfg.downsample, 60.0f);
  Eigen::ArrayXf qflat = Eigen::Map<const Eigen::ArrayXf>(qr.quantized.data(), qr.quantized.size());
  ad::Tensor f_q = ad::straight_through(qflat, f_flat);
  ad::Tensor m_hat = model.decoder_forward(ad::permute(ad::reshape(f_q, {1, l, c}), {0, 2, 1}));
  auto losses = model.loss_graph(ad::permute(m_hat, {0, 2, 1}), frames, f_flat, qr.quantized, 1, 16);

  model.params().ensure_zero_grads();
  ad::backward(losses.total);
  ad::Tensor w = model.params().get("enc.in.w");
  CHECK(w.grad().matrix().norm() > 0.0f);
}

TEST_CASE("loss gradients match finite differences") {
  VqConfig cfg;
  cfg.codebook_count = 2;
  cfg.codebook_size = 8;
  cfg.code_dim = 4;
  cfg.downsample = 2;
  cfg.hidden = 8;
  MotionVqVae model(cfg, kin::canonical_skeleton(), 60);
  auto m = random_motion(61, 8);
  MatRM frames = m.frames;

  Eigen::ArrayXf xdata(kin::kFrameDim * 8);
  for (int ch = 0; ch < kin::kFrameDim; ++ch)
    for (int t = 0; t < 8; ++t) xdata[ch * 8 + t] = frames(t, ch);
  ad::Tensor x = ad::Tensor::constant({1, kin::kFrameDim, 8}, xdata);

  MatRM f0 = model.encode_window(m);
  auto q0 = quantize(f0, model.codebooks(), cfg.downsample, 60.0f);

  // quantization held fixed: the checked path is encoder -> decoder -> loss
  auto loss_fn = [&]() {
    ad::Tensor f = model.encoder_forward(x);
    const int64_t l = f.dim(2), c = f.dim(1);
    ad::Tensor f_flat = ad::reshape(ad::permute(f, {0, 2, 1}), {l, c});
    ad::Tensor m_hat = model.decoder_forward(f);
    return model.loss_graph(ad::permute(m_hat, {0, 2, 1}), frames, f_flat, q0.quantized, 1, 8).total;
  };
  std::vector<ad::Tensor> checked{model.params().get("enc.in.w"), model.params().get("dec.out.w"),
                                  model.params().get("enc.res0.c1.w")};
  Rng rng(62);
  auto report = ad::grad_check(loss_fn, checked, 1e-3, 40, rng);
  CHECK(report.checked == 40);
  CHECK(report.max_rel_error < 1e-2);
}

TEST_CASE("config rejects bad settings") {
  VqConfig cfg = tiny_config();
  cfg.downsample = 3;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.ema_gamma = 1.0f;
  CHECK_THROWS_AS(cfg.validate(), Error);
}
