#pragma once

#include "wilke/types.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace wilke {

enum class Activation { gelu };
enum class TokenizerMode { byte, bpe };

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int d_mlp = 256;
  int n_heads = 4;
  int vocab_size = 256;
  int max_seq = 64;
  double ln_eps = 1e-5;
  Activation activation = Activation::gelu;
  TokenizerMode tokenizer_mode = TokenizerMode::byte;

  /// Throws ValidationError naming the offending field.
  void validate() const;
  int head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

template <typename Scalar>
struct BlockWeights {
  Vector<Scalar> ln1_w, ln1_b;
  Matrix<Scalar> q_w, k_w, v_w, o_w;  // [d_model x d_model], row-vector convention x * W
  Vector<Scalar> q_b, k_b, v_b, o_b;
  Vector<Scalar> ln2_w, ln2_b;
  Matrix<Scalar> fc_w;    // [d_model x d_mlp]
  Vector<Scalar> fc_b;    // [d_mlp]
  Matrix<Scalar> proj_w;  // [d_mlp x d_model]
  Vector<Scalar> proj_b;  // [d_model]
};

/// Pre-layernorm GPT-2 style decoder.
template <typename Scalar>
struct Model {
  ModelConfig config;
  Matrix<Scalar> tok_emb;  // [vocab x d_model]
  Matrix<Scalar> pos_emb;  // [max_seq x d_model]
  Matrix<Scalar> unembed;  // [vocab x d_model]; logits = ln_f(h) * unembed^T
  std::vector<BlockWeights<Scalar>> blocks;
  Vector<Scalar> lnf_w, lnf_b;

  /// Zero-filled model with shapes from `config` (layernorm gains are 1).
  static Model zeros(const ModelConfig& config);
  /// GPT-2 style N(0, init_std) init; residual projections scaled by 1/sqrt(2 n_layers).
  static Model random(const ModelConfig& config, std::uint64_t seed, double init_std = 0.02);

  template <typename Other>
  Model<Other> cast() const;

  /// Throws ValidationError if any tensor shape disagrees with config.
  void check_shapes() const;
  bool all_finite() const;

  /// Calls fn(name, shape, data) for every parameter in container order.
  using TensorVisitor = std::function<void(const std::string&, const std::vector<std::int64_t>&, Scalar*)>;
  using ConstTensorVisitor =
      std::function<void(const std::string&, const std::vector<std::int64_t>&, const Scalar*)>;
  void for_each_tensor(const TensorVisitor& fn);
  void for_each_tensor(const ConstTensorVisitor& fn) const;
};

using ModelF = Model<float>;
using ModelD = Model<double>;

enum class SiteKind { embedding, hidden_state, mlp_out, attn_out };

const char* to_string(SiteKind kind);
SiteKind site_kind_from_string(const std::string& text);

/// A capture or injection point. `hidden_state` at layer l is the residual
/// stream after block l; `embedding` only exists at layer 0.
struct Site {
  int layer = 0;
  int token = 0;
  SiteKind kind = SiteKind::mlp_out;

  auto operator<=>(const Site&) const = default;
};

enum class ActionKind { inject_add, replace, corrupt_gaussian };

template <typename Scalar>
struct Intervention {
  Site site;
  ActionKind action = ActionKind::inject_add;
  Vector<Scalar> value;     // inject_add / replace
  Scalar scale = 0;         // corrupt_gaussian
  std::uint64_t seed = 0;   // corrupt_gaussian noise stream

  static Intervention add(Site s, Vector<Scalar> v) { return {s, ActionKind::inject_add, std::move(v), 0, 0}; }
  static Intervention replace_with(Site s, Vector<Scalar> v) { return {s, ActionKind::replace, std::move(v), 0, 0}; }
  static Intervention corrupt(Site s, Scalar scale, std::uint64_t seed) {
    return {s, ActionKind::corrupt_gaussian, {}, scale, seed};
  }
};

/// Deterministic N(0,1) noise vector used by corrupt_gaussian for (seed, token).
template <typename Scalar>
Vector<Scalar> corruption_noise(std::uint64_t seed, int token, int dim);

template <typename Scalar>
struct ForwardResult {
  Matrix<Scalar> logits;  // [seq x vocab]
  std::map<Site, Vector<Scalar>> captured;
};

/// Per-layer activations kept for the reverse pass.
template <typename Scalar>
struct BlockCache {
  Matrix<Scalar> h_in, ln1_hat, ln1_out;
  Vector<Scalar> ln1_rstd;
  Matrix<Scalar> q, k, v;
  std::vector<Matrix<Scalar>> probs;  // per head [seq x seq]
  Matrix<Scalar> attn_concat, attn_out, h_mid;
  Matrix<Scalar> ln2_hat, ln2_out;
  Vector<Scalar> ln2_rstd;
  Matrix<Scalar> pre, act, mlp_out, h_out;
};

template <typename Scalar>
struct ForwardCache {
  Tokens tokens;
  std::vector<Intervention<Scalar>> interventions;
  Matrix<Scalar> h0;
  std::vector<BlockCache<Scalar>> blocks;
  Matrix<Scalar> lnf_hat, lnf_out;
  Vector<Scalar> lnf_rstd;
  Matrix<Scalar> logits;
};

/// Loss as a functional of the logits. Returns the value and writes
/// d(loss)/d(logits) into `dlogits`, which arrives zeroed with the logits' shape.
template <typename Scalar>
using LogitLoss = std::function<Scalar(const Matrix<Scalar>& logits, Matrix<Scalar>& dlogits)>;

template <typename Scalar>
Matrix<Scalar> forward(const Model<Scalar>& model, const Tokens& tokens);

template <typename Scalar>
ForwardResult<Scalar> forward_with(const Model<Scalar>& model, const Tokens& tokens,
                                   const std::vector<Intervention<Scalar>>& interventions,
                                   const std::vector<Site>& capture);

/// Full forward pass retaining everything needed by `backward`.
template <typename Scalar>
ForwardCache<Scalar> forward_cached(const Model<Scalar>& model, const Tokens& tokens,
                                    const std::vector<Intervention<Scalar>>& interventions = {});

template <typename Scalar>
struct Gradients {
  std::optional<Model<Scalar>> params;      // filled when requested
  std::map<Site, Vector<Scalar>> at_sites;  // d loss / d (value at site)
};

/// Reverse pass. For a site carrying a `replace` intervention the returned
/// gradient is with respect to the injected vector and nothing flows upstream
/// through that row.
template <typename Scalar>
Gradients<Scalar> backward(const Model<Scalar>& model, const ForwardCache<Scalar>& cache,
                           const Matrix<Scalar>& dlogits, const std::vector<Site>& sites,
                           bool param_grads);

/// d loss / d (state at site), evaluated at the clean forward pass.
template <typename Scalar>
Vector<Scalar> grad_at_site(const Model<Scalar>& model, const Tokens& tokens, const Site& site,
                            const LogitLoss<Scalar>& loss);

/// Value and gradient of `loss` with `value` substituted at `site`.
template <typename Scalar>
std::pair<Scalar, Vector<Scalar>> loss_and_grad_with_replacement(const Model<Scalar>& model,
                                                                 const Tokens& tokens,
                                                                 const Site& site,
                                                                 const Vector<Scalar>& value,
                                                                 const LogitLoss<Scalar>& loss);

// Loss building blocks.

/// Summed negative log-likelihood of `targets[k]` predicted at `positions[k]`.
template <typename Scalar>
LogitLoss<Scalar> nll_loss(std::vector<int> positions, Tokens targets);

/// KL(softmax(logits[position]) || reference) with `reference_log_probs` fixed.
template <typename Scalar>
LogitLoss<Scalar> kl_loss(int position, Vector<Scalar> reference_log_probs);

/// sum(cotangent .* logits); a linear functional, handy for gradient checks.
template <typename Scalar>
LogitLoss<Scalar> linear_loss(Matrix<Scalar> cotangent);

template <typename Scalar>
Vector<Scalar> log_softmax(const Eigen::Ref<const Vector<Scalar>>& row);

template <typename Scalar>
Vector<Scalar> softmax(const Eigen::Ref<const Vector<Scalar>>& row);

template <typename Scalar>
Scalar gelu(Scalar x);

/// Argmax with ties resolved toward the smaller token id.
template <typename Scalar>
Token argmax_token(const Eigen::Ref<const Vector<Scalar>>& row);

/// Greedy continuation of `prompt` by `n_new` tokens.
template <typename Scalar>
Tokens greedy_decode(const Model<Scalar>& model, const Tokens& prompt, int n_new);

/// True when every target token is the argmax under teacher forcing.
template <typename Scalar>
bool teacher_forced_match(const Model<Scalar>& model, const Tokens& prompt, const Tokens& target);

}  // namespace wilke
