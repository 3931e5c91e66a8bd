#include "motok/lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace motok::lm {

using ad::Tensor;

int Vocabulary::motion_id(int n, int i) const {
  if (n < 0 || n >= codebook_count || i < 0 || i >= codebook_size)
    fail_domain("BadToken", "motion token out of range");
  return motion_base() + n * codebook_size + i;
}

std::pair<int, int> Vocabulary::motion_token(int id) const {
  if (!is_motion(id)) fail_domain("BadToken", "id is not a motion token");
  const int rel = id - motion_base();
  return {rel / codebook_size, rel % codebook_size};
}

std::vector<int32_t> Vocabulary::encode_text(const std::string& text) const {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<int32_t>(c));
  return ids;
}

std::string Vocabulary::decode_text(const std::vector<int32_t>& ids) const {
  std::string out;
  for (int32_t id : ids)
    if (id >= 0 && id < std::min(text_size, 256)) out.push_back(static_cast<char>(id));
  return out;
}

std::vector<int32_t> Vocabulary::wrap_stream(const TokenStream& stream) const {
  stream.validate();
  if (stream.codebook_count != codebook_count || stream.codebook_size != codebook_size)
    fail_domain("VocabMismatch", "stream layout disagrees with the vocabulary");
  std::vector<int32_t> ids;
  ids.reserve(stream.tokens.size() + 2);
  ids.push_back(mot_open());
  for (size_t j = 0; j < stream.tokens.size(); ++j)
    ids.push_back(motion_id(static_cast<int>(j) % codebook_count,
                            static_cast<int>(stream.tokens[j])));
  ids.push_back(mot_close());
  return ids;
}

TokenStream Vocabulary::unwrap_stream(const std::vector<int32_t>& ids, int downsample,
                                      float source_fps) const {
  if (ids.size() < 2 || ids.front() != mot_open() || ids.back() != mot_close())
    fail_domain("BadToken", "motion span must be delimited by <mot> and </mot>");
  TokenStream out;
  out.codebook_count = codebook_count;
  out.codebook_size = codebook_size;
  out.downsample = downsample;
  out.source_fps = source_fps;
  for (size_t j = 1; j + 1 < ids.size(); ++j) {
    auto [n, i] = motion_token(ids[j]);
    if (n != static_cast<int>(j - 1) % codebook_count)
      fail_domain("BadToken", "codebook interleave out of order");
    out.tokens.push_back(static_cast<uint32_t>(i));
  }
  if (out.length() % codebook_count != 0)
    fail_domain("BadToken", "span length not a multiple of the codebook count");
  return out;
}

void LmConfig::validate() const {
  if (layers < 1 || heads < 1 || dim < heads || ffn_mult < 1)
    fail(ErrorKind::kConfig, "ConfigInvalid", "transformer dimensions must be positive");
  if (dim % heads != 0) fail(ErrorKind::kConfig, "ConfigInvalid", "heads must divide dim");
  if (max_len < 2) fail(ErrorKind::kConfig, "ConfigInvalid", "max_len must be at least 2");
  if (vocab_size < 2) fail(ErrorKind::kConfig, "ConfigInvalid", "vocabulary too small");
}

LmModel::LmModel(const LmConfig& cfg, uint64_t seed) : cfg_(cfg), init_rng_(seed) {
  cfg_.validate();
  const int64_t d = cfg_.dim, v = cfg_.vocab_size, f = int64_t(cfg_.ffn_mult) * d;
  auto randn = [&](const ad::Shape& s) {
    Eigen::ArrayXf data(ad::numel(s));
    for (int64_t i = 0; i < data.size(); ++i) data[i] = float(init_rng_.normal()) * 0.02f;
    return Tensor::param(s, std::move(data));
  };
  auto fill = [&](const ad::Shape& s, float c) {
    return Tensor::param(s, Eigen::ArrayXf::Constant(ad::numel(s), c));
  };
  params_.add("tok_emb", randn({v, d}));
  params_.add("pos_emb", randn({cfg_.max_len, d}));
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "blk" + std::to_string(l) + ".";
    params_.add(p + "ln1.g", fill({d}, 1.0f));
    params_.add(p + "ln1.b", fill({d}, 0.0f));
    params_.add(p + "attn.wqkv", randn({d, 3 * d}));
    params_.add(p + "attn.bqkv", fill({3 * d}, 0.0f));
    params_.add(p + "attn.wo", randn({d, d}));
    params_.add(p + "attn.bo", fill({d}, 0.0f));
    params_.add(p + "ln2.g", fill({d}, 1.0f));
    params_.add(p + "ln2.b", fill({d}, 0.0f));
    params_.add(p + "mlp.w1", randn({d, f}));
    params_.add(p + "mlp.b1", fill({f}, 0.0f));
    params_.add(p + "mlp.w2", randn({f, d}));
    params_.add(p + "mlp.b2", fill({d}, 0.0f));
  }
  params_.add("lnf.g", fill({d}, 1.0f));
  params_.add("lnf.b", fill({d}, 0.0f));
  params_.add("head.w", randn({d, v}));
}

void LmModel::expand_vocab(int motion_vocab_size) {
  if (motion_vocab_size < 0)
    fail(ErrorKind::kConfig, "ConfigInvalid", "expansion size must be non-negative");
  if (motion_vocab_size == 0) return;
  if (expanded_) fail_domain("AlreadyExpanded", "vocabulary was already expanded");
  const int64_t d = cfg_.dim;
  const int64_t vo = cfg_.vocab_size, vn = vo + motion_vocab_size;

  auto& emb = params_.entry("tok_emb");
  Eigen::ArrayXf emb_data(vn * d);
  emb_data.head(vo * d) = emb.tensor.value();
  for (int64_t i = vo * d; i < vn * d; ++i) emb_data[i] = float(init_rng_.normal()) * 0.02f;
  Eigen::ArrayXf emb_m = Eigen::ArrayXf::Zero(vn * d), emb_v = Eigen::ArrayXf::Zero(vn * d);
  emb_m.head(vo * d) = emb.m;
  emb_v.head(vo * d) = emb.v;
  emb.tensor = Tensor::param({vn, d}, std::move(emb_data));
  emb.m = std::move(emb_m);
  emb.v = std::move(emb_v);

  Eigen::ArrayXf ext(d * int64_t(motion_vocab_size));
  for (int64_t i = 0; i < ext.size(); ++i) ext[i] = float(init_rng_.normal()) * 0.02f;
  params_.add("head_ext.w", Tensor::param({d, int64_t(motion_vocab_size)}, std::move(ext)));

  cfg_.vocab_size = static_cast<int>(vn);
  expanded_ = true;
}

ad::Tensor LmModel::head_logits(const ad::Tensor& h) const {
  Tensor base = ad::matmul(h, params_.get("head.w"));
  if (!expanded_) return base;
  Tensor ext = ad::matmul(h, params_.get("head_ext.w"));
  return ad::concat({base, ext}, static_cast<int>(h.rank()) - 1);
}

ad::Tensor LmModel::forward_logits(const std::vector<int32_t>& ids, int batch, int len) {
  if (batch < 1 || len < 1 || static_cast<int64_t>(ids.size()) != int64_t(batch) * len)
    fail_domain("ShapeMismatch", "id count must equal batch * len");
  if (len > cfg_.max_len) fail_domain("SequenceTooLong", "sequence exceeds max_len");
  Tensor emb = ad::embedding(params_.get("tok_emb"), ids);
  return forward_from_embeddings(ad::reshape(emb, {batch, len, cfg_.dim}));
}

ad::Tensor LmModel::forward_from_embeddings(const ad::Tensor& x) {
  if (x.rank() != 3 || x.dim(2) != cfg_.dim)
    fail_domain("ShapeMismatch", "embeddings must be [batch, len, dim]");
  const int64_t len = x.dim(1);
  if (len > cfg_.max_len) fail_domain("SequenceTooLong", "sequence exceeds max_len");

  std::vector<int32_t> pos_ids(len);
  std::iota(pos_ids.begin(), pos_ids.end(), 0);
  Tensor h = ad::add(x, ad::embedding(params_.get("pos_emb"), pos_ids));
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "blk" + std::to_string(l) + ".";
    Tensor a = ad::causal_attention(
        ad::layer_norm(h, params_.get(p + "ln1.g"), params_.get(p + "ln1.b")),
        params_.get(p + "attn.wqkv"), params_.get(p + "attn.bqkv"), params_.get(p + "attn.wo"),
        params_.get(p + "attn.bo"), cfg_.heads);
    h = ad::add(h, a);
    Tensor m = ad::layer_norm(h, params_.get(p + "ln2.g"), params_.get(p + "ln2.b"));
    m = ad::gelu(ad::add(ad::matmul(m, params_.get(p + "mlp.w1")), params_.get(p + "mlp.b1")));
    m = ad::add(ad::matmul(m, params_.get(p + "mlp.w2")), params_.get(p + "mlp.b2"));
    h = ad::add(h, m);
  }
  h = ad::layer_norm(h, params_.get("lnf.g"), params_.get("lnf.b"));
  return head_logits(h);
}

DecodeSession LmModel::decode_session() const { return DecodeSession(*this); }

DecodeSession::DecodeSession(const LmModel& model)
    : model_(&model),
      k_cache_(model.config().layers, Eigen::ArrayXf(0)),
      v_cache_(model.config().layers, Eigen::ArrayXf(0)) {}

Eigen::ArrayXf DecodeSession::append(const std::vector<int32_t>& ids) {
  if (ids.empty()) fail_domain("ShapeMismatch", "append needs at least one id");
  Tensor emb = ad::embedding(model_->params_.get("tok_emb"), ids);
  return append_embeddings(emb.value(), static_cast<int>(ids.size()));
}

Eigen::ArrayXf DecodeSession::append_embeddings(const Eigen::ArrayXf& x, int n) {
  const auto& cfg = model_->cfg_;
  const int64_t d = cfg.dim, heads = cfg.heads, dh = d / heads;
  if (n < 1 || x.size() != int64_t(n) * d)
    fail_domain("ShapeMismatch", "embedding block must hold n * dim values");
  if (len_ + n > cfg.max_len) fail_domain("ContextOverflow", "decode session exceeds max_len");
  const auto& params = model_->params_;

  std::vector<int32_t> pos_ids(n);
  std::iota(pos_ids.begin(), pos_ids.end(), static_cast<int32_t>(len_));
  Tensor h = ad::add(Tensor::constant({1, n, d}, x), ad::embedding(params.get("pos_emb"), pos_ids));

  auto to_heads = [&](const Tensor& t) {
    return ad::permute(ad::reshape(t, {n, heads, dh}), {1, 0, 2});  // [H, n, Dh]
  };
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string p = "blk" + std::to_string(l) + ".";
    Tensor ln = ad::layer_norm(h, params.get(p + "ln1.g"), params.get(p + "ln1.b"));
    Tensor qkv = ad::add(ad::matmul(ln, params.get(p + "attn.wqkv")), params.get(p + "attn.bqkv"));
    Tensor q = to_heads(ad::slice(qkv, 2, 0, d));
    Tensor k = to_heads(ad::slice(qkv, 2, d, d));
    Tensor v = to_heads(ad::slice(qkv, 2, 2 * d, d));
    if (len_ > 0) {
      k = ad::concat({Tensor::constant({heads, len_, dh}, k_cache_[l]), k}, 1);
      v = ad::concat({Tensor::constant({heads, len_, dh}, v_cache_[l]), v}, 1);
    }
    k_cache_[l] = k.value();
    v_cache_[l] = v.value();
    Tensor ctx = ad::reshape(ad::permute(ad::masked_attention(q, k, v), {1, 0, 2}), {1, n, d});
    h = ad::add(h, ad::add(ad::matmul(ctx, params.get(p + "attn.wo")), params.get(p + "attn.bo")));
    Tensor m = ad::layer_norm(h, params.get(p + "ln2.g"), params.get(p + "ln2.b"));
    m = ad::gelu(ad::add(ad::matmul(m, params.get(p + "mlp.w1")), params.get(p + "mlp.b1")));
    m = ad::add(ad::matmul(m, params.get(p + "mlp.w2")), params.get(p + "mlp.b2"));
    h = ad::add(h, m);
  }
  Tensor last = ad::slice(h, 1, n - 1, 1);
  last = ad::layer_norm(last, params.get("lnf.g"), params.get("lnf.b"));
  Tensor logits = model_->head_logits(last);
  len_ += n;
  return logits.value();
}

std::vector<int32_t> assemble_pretrain_ids(const Vocabulary& vocab, const TokenStream& stream) {
  std::vector<int32_t> ids;
  ids.push_back(vocab.bos());
  auto span = vocab.wrap_stream(stream);
  ids.insert(ids.end(), span.begin(), span.end());
  ids.push_back(vocab.eos());
  return ids;
}

namespace {

float nll_step(LmModel& model, const Vocabulary& vocab,
               const std::vector<std::vector<int32_t>>& sequences, const PretrainConfig* cfg) {
  if (sequences.empty()) fail_domain("EmptyBatch", "pretrain needs at least one sequence");
  if (vocab.total_size() != model.config().vocab_size)
    fail_domain("VocabMismatch", "vocabulary size disagrees with the model");
  int64_t len = 0;
  for (const auto& s : sequences) {
    if (s.size() < 2) fail_domain("SequenceTooShort", "need at least two tokens to predict");
    len = std::max(len, static_cast<int64_t>(s.size()));
  }
  if (len > model.config().max_len) fail_domain("SequenceTooLong", "sequence exceeds max_len");

  const int64_t batch = static_cast<int64_t>(sequences.size());
  std::vector<int32_t> ids(batch * len, vocab.pad());
  std::vector<int32_t> targets(batch * len, 0);
  std::vector<float> weights(batch * len, 0.0f);
  for (int64_t b = 0; b < batch; ++b) {
    const auto& s = sequences[b];
    for (int64_t t = 0; t < static_cast<int64_t>(s.size()); ++t) {
      ids[b * len + t] = s[t];
      if (t + 1 < static_cast<int64_t>(s.size())) {
        targets[b * len + t] = s[t + 1];
        weights[b * len + t] = 1.0f;
      }
    }
  }
  Tensor logits = model.forward_logits(ids, static_cast<int>(batch), static_cast<int>(len));
  Tensor loss = ad::cross_entropy(
      ad::reshape(logits, {batch * len, model.config().vocab_size}), targets, weights);
  const float value = loss.item();
  if (cfg) {
    model.params().ensure_zero_grads();
    ad::backward(loss);
    ad::adam_step(model.params(), cfg->lr, cfg->beta1, cfg->beta2, cfg->adam_eps);
  }
  return value;
}

}  // namespace

float pretrain_step(LmModel& model, const Vocabulary& vocab,
                    const std::vector<std::vector<int32_t>>& sequences,
                    const PretrainConfig& cfg) {
  return nll_step(model, vocab, sequences, &cfg);
}

float pretrain_step(LmModel& model, const Vocabulary& vocab, const std::vector<TokenStream>& batch,
                    const PretrainConfig& cfg) {
  std::vector<std::vector<int32_t>> sequences;
  sequences.reserve(batch.size());
  for (const auto& ts : batch) sequences.push_back(assemble_pretrain_ids(vocab, ts));
  return nll_step(model, vocab, sequences, &cfg);
}

double sequence_nll(LmModel& model, const std::vector<int32_t>& ids,
                    std::vector<float>* per_position) {
  const int64_t len = static_cast<int64_t>(ids.size());
  if (len < 2) fail_domain("SequenceTooShort", "need at least two tokens to predict");
  if (len > model.config().max_len) fail_domain("SequenceTooLong", "sequence exceeds max_len");
  std::vector<int32_t> targets(len, 0);
  std::vector<float> weights(len, 0.0f);
  for (int64_t t = 0; t + 1 < len; ++t) {
    targets[t] = ids[t + 1];
    weights[t] = 1.0f;
  }
  Tensor logits = model.forward_logits(ids, 1, static_cast<int>(len));
  std::vector<float> losses;
  ad::cross_entropy(ad::reshape(logits, {len, model.config().vocab_size}), targets, weights,
                    &losses);
  losses.resize(len - 1);  // the final position predicts nothing
  double sum = 0.0;
  for (float l : losses) sum += l;
  if (per_position) *per_position = std::move(losses);
  return sum / static_cast<double>(len - 1);
}

int32_t pick_from_logits(const Eigen::ArrayXf& logits, const SampleConfig& cfg, Rng& rng) {
  const int64_t v = logits.size();
  if (v < 1) fail_domain("ShapeMismatch", "empty logit row");
  if (cfg.greedy) {
    int best = 0;
    for (int64_t i = 1; i < v; ++i)
      if (logits[i] > logits[best]) best = static_cast<int>(i);
    return static_cast<int32_t>(best);
  }
  if (!(cfg.temperature > 0.0f))
    fail(ErrorKind::kConfig, "ConfigInvalid", "temperature must be positive");
  std::vector<int> order(v);
  std::iota(order.begin(), order.end(), 0);
  const int keep = (cfg.top_k > 0 && cfg.top_k < v) ? cfg.top_k : static_cast<int>(v);
  std::partial_sort(order.begin(), order.begin() + keep, order.end(), [&](int a, int b) {
    return logits[a] != logits[b] ? logits[a] > logits[b] : a < b;
  });
  std::vector<double> probs(keep);
  const double mx = logits[order[0]] / cfg.temperature;
  double z = 0.0;
  for (int i = 0; i < keep; ++i) {
    probs[i] = std::exp(static_cast<double>(logits[order[i]]) / cfg.temperature - mx);
    z += probs[i];
  }
  double u = rng.uniform() * z;
  for (int i = 0; i < keep; ++i) {
    u -= probs[i];
    if (u <= 0.0) return static_cast<int32_t>(order[i]);
  }
  return static_cast<int32_t>(order[keep - 1]);
}

std::vector<int32_t> sample(const LmModel& model, const Vocabulary& vocab,
                            const std::vector<int32_t>& prefix, const SampleConfig& cfg, Rng& rng) {
  if (prefix.empty()) fail_domain("EmptyPrefix", "sampling needs a prompt");
  if (!cfg.greedy && !(cfg.temperature > 0.0f))
    fail(ErrorKind::kConfig, "ConfigInvalid", "temperature must be positive");

  DecodeSession session = model.decode_session();
  Eigen::ArrayXf logits = session.append(prefix);
  std::vector<int32_t> out;
  for (int step = 0; step < cfg.max_new; ++step) {
    const int32_t id = pick_from_logits(logits, cfg, rng);
    out.push_back(id);
    if (id == vocab.eos() || id == vocab.mot_close()) break;
    if (session.length() >= model.config().max_len) break;
    logits = session.append({id});
  }
  return out;
}

}  // namespace motok::lm
