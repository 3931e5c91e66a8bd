#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "motok/optimizer.hpp"
#include "motok/token_stream.hpp"

// Decoder-only transformer over a joint byte-text + motion-token vocabulary.
// Text ids are raw bytes, five specials follow, then one id per (codebook,
// entry) pair. Training is plain next-token prediction; decoding runs through
// a key/value cache session so online use never re-encodes the prefix.

namespace motok::lm {

struct Vocabulary {
  int text_size = 256;
  int codebook_count = 0;  // N
  int codebook_size = 0;   // K

  static constexpr int kSpecialCount = 5;

  int bos() const { return text_size; }
  int eos() const { return text_size + 1; }
  int mot_open() const { return text_size + 2; }
  int mot_close() const { return text_size + 3; }
  int pad() const { return text_size + 4; }

  int motion_base() const { return text_size + kSpecialCount; }
  int motion_size() const { return codebook_count * codebook_size; }
  int total_size() const { return motion_base() + motion_size(); }

  /// Global id for entry i of codebook n.
  int motion_id(int n, int i) const;
  /// Inverse of motion_id; rejects ids outside the motion range.
  std::pair<int, int> motion_token(int id) const;
  bool is_motion(int id) const { return id >= motion_base() && id < total_size(); }

  std::vector<int32_t> encode_text(const std::string& text) const;
  /// Keeps byte ids only; specials and motion ids are dropped.
  std::string decode_text(const std::vector<int32_t>& ids) const;

  /// <mot> t0c0 t0c1 ... </mot> with the stream's frame-major interleave.
  std::vector<int32_t> wrap_stream(const TokenStream& stream) const;
  /// Inverse of wrap_stream; the delimiters must be present and well nested.
  TokenStream unwrap_stream(const std::vector<int32_t>& ids, int downsample,
                            float source_fps) const;
};

struct LmConfig {
  int layers = 4;
  int heads = 4;
  int dim = 256;
  int ffn_mult = 4;
  int max_len = 512;
  int vocab_size = 261;  // bytes + specials until expand_vocab

  void validate() const;
};

class DecodeSession;

class LmModel {
 public:
  LmModel(const LmConfig& cfg, uint64_t seed);

  const LmConfig& config() const { return cfg_; }
  ad::ParameterStore& params() { return params_; }
  const ad::ParameterStore& params() const { return params_; }
  bool expanded() const { return expanded_; }

  /// Appends motion_vocab_size embedding rows and head columns, drawn from
  /// N(0, 0.02^2). Logits of pre-existing ids are untouched bit for bit.
  void expand_vocab(int motion_vocab_size);

  /// Logits [batch, len, vocab] over row-major ids (batch*len entries).
  ad::Tensor forward_logits(const std::vector<int32_t>& ids, int batch, int len);
  /// Same transformer over pre-embedded inputs [batch, len, dim]; positional
  /// embeddings are added here, so feed raw segment embeddings.
  ad::Tensor forward_from_embeddings(const ad::Tensor& x);

  DecodeSession decode_session() const;

 private:
  friend class DecodeSession;

  /// head.w logits, with head_ext.w columns appended after expansion. The
  /// extension lives in its own tensor so the original head's GEMM shape, and
  /// with it every original logit bit, survives expansion.
  ad::Tensor head_logits(const ad::Tensor& h) const;

  LmConfig cfg_;
  ad::ParameterStore params_;
  bool expanded_ = false;
  Rng init_rng_;
};

/// Incremental decoder state. Appending tokens one block at a time yields the
/// same last-position logits as one full forward pass (within 1e-4). Each
/// session is single-owner; the model must outlive it.
class DecodeSession {
 public:
  explicit DecodeSession(const LmModel& model);

  /// Feeds ids and returns the logits at the last fed position.
  Eigen::ArrayXf append(const std::vector<int32_t>& ids);
  /// Soft-token path: x holds n rows of dim values (row-major).
  Eigen::ArrayXf append_embeddings(const Eigen::ArrayXf& x, int n);

  int64_t length() const { return len_; }

 private:
  const LmModel* model_;
  std::vector<Eigen::ArrayXf> k_cache_, v_cache_;  // per layer, [heads, len, dim/heads]
  int64_t len_ = 0;
};

struct PretrainConfig {
  float lr = 3e-4f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float adam_eps = 1e-8f;
};

/// <bos> <mot> tokens </mot> <eos> for one stream.
std::vector<int32_t> assemble_pretrain_ids(const Vocabulary& vocab, const TokenStream& stream);

/// One Adam step of next-token prediction on padded id sequences; returns the
/// batch loss (mean NLL of each token given its prefix) before the update.
float pretrain_step(LmModel& model, const Vocabulary& vocab,
                    const std::vector<std::vector<int32_t>>& sequences, const PretrainConfig& cfg);
float pretrain_step(LmModel& model, const Vocabulary& vocab, const std::vector<TokenStream>& batch,
                    const PretrainConfig& cfg);

/// Forward-only NLL of one sequence (f64 sum over positions 2..L divided by
/// their count). per_position, when given, receives the L-1 addends.
double sequence_nll(LmModel& model, const std::vector<int32_t>& ids,
                    std::vector<float>* per_position = nullptr);

struct SampleConfig {
  float temperature = 1.0f;
  int top_k = 0;  // 0 keeps the full distribution
  bool greedy = false;
  int max_new = 64;
};

/// Greedy, top-k, or temperature selection over one logit row; exact ties go
/// to the lowest id. Softmax runs in f64 on the shifted logits.
int32_t pick_from_logits(const Eigen::ArrayXf& logits, const SampleConfig& cfg, Rng& rng);

/// Autoregressive continuation of prefix; stops at </mot>, <eos>, max_new
/// tokens, or the context limit. The stop token, when produced, is included.
std::vector<int32_t> sample(const LmModel& model, const Vocabulary& vocab,
                            const std::vector<int32_t>& prefix, const SampleConfig& cfg, Rng& rng);

}  // namespace motok::lm
