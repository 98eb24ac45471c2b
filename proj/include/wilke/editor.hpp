#pragma once

#include "wilke/model.hpp"
#include "wilke/tokenizer.hpp"

#include <optional>
#include <string>
#include <vector>

namespace wilke {

/// One fact to rewrite. `prompt_template` and `essence_prompt` contain a
/// single "{}" slot for the subject.
struct EditRequest {
  std::string subject;
  std::string prompt_template;
  std::string target_new;
  std::string target_true;
  std::vector<std::string> paraphrase_prompts;
  std::vector<std::string> neighborhood_prompts;
  std::string essence_prompt = "{} is a";

  void validate() const;
  std::string prompt() const;
  std::string essence() const;
};

/// Replaces the single "{}" slot in `tmpl`; throws if there is not exactly one.
std::string fill_subject(const std::string& tmpl, const std::string& subject);

/// Targets are scored as the continuation " <target>".
Tokens target_tokens(const Tokenizer& tok, const std::string& target);

struct DeltaOptConfig {
  int steps = 25;
  double learning_rate = 0.5;
  double kl_weight = 0.0625;
  int n_prefixes = 8;
  int prefix_len_min = 2;
  int prefix_len_max = 10;
  double clamp_factor = 4.0;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class PolicyKind { fixed, wilke, no_delta, no_activation, no_weight_norm };

struct LayerPolicy {
  PolicyKind kind = PolicyKind::wilke;
  int layer = 0;  // fixed only

  static LayerPolicy fixed(int l) { return {PolicyKind::fixed, l}; }
  static LayerPolicy wilke() { return {PolicyKind::wilke, 0}; }

  /// "fixed:<l>", "wilke", "ablate:delta", "ablate:act", "ablate:norm".
  static LayerPolicy parse(const std::string& text);
  std::string to_string() const;
  bool operator==(const LayerPolicy&) const = default;
};

/// Shared state for a sequence of edits: tokenizer, hyper-parameters and the
/// random prefix contexts, sampled once from the unedited model so that every
/// later edit and rollback sees the same contexts.
struct EditEnv {
  const Tokenizer* tokenizer = nullptr;
  DeltaOptConfig cfg;
  std::vector<Tokens> prefixes;
};

/// Samples cfg.n_prefixes token prefixes from `model` at temperature 1.
std::vector<Tokens> sample_prefixes(const ModelF& model, const Tokenizer& tok, const DeltaOptConfig& cfg);
EditEnv make_env(const ModelF& model, const Tokenizer& tok, DeltaOptConfig cfg);

/// A tokenized context: the prompt (optionally behind a prefix) and the index
/// of the last subject token.
struct PromptContext {
  Tokens tokens;
  int subject_pos = 0;    // last subject token
  int subject_begin = 0;  // first subject token
};

/// Subject span of `tmpl` filled with `subject`. A space before the subject
/// belongs to its first token, as in GPT-2 vocabularies.
PromptContext subject_context(const Tokenizer& tok, const std::string& tmpl, const std::string& subject);

/// The bare prompt followed by every prefixed copy.
std::vector<PromptContext> edit_contexts(const EditEnv& env, const EditRequest& req);

/// Averaged FFN key sigma(x W_fc + b_fc) at the last subject token of each
/// edit context, for every layer (one forward pass per context).
std::vector<VectorF> compute_keys(const ModelF& model, const EditRequest& req, const EditEnv& env);
VectorF compute_key(const ModelF& model, int layer, const EditRequest& req, const EditEnv& env);

struct ValueStats {
  double initial_loss = 0;
  double final_loss = 0;
  int steps_taken = 0;
  std::vector<double> losses;  // one per evaluated iterate
  bool clamped = false;
};

struct ValueResult {
  VectorF v_star;
  VectorF delta;       // v_star - (key W_proj + b_proj)
  VectorF clean_value; // m at the last subject token of the bare prompt
  VectorF key;
  ValueStats stats;
};

/// Minimizes the rewrite loss over a replacement of the MLP output at the last
/// subject token of layer `layer`, steering toward `target`.
ValueResult optimize_value(const ModelF& model, int layer, const EditRequest& req, const EditEnv& env,
                           const std::string& target);
ValueResult optimize_value(const ModelF& model, int layer, const EditRequest& req, const EditEnv& env);

/// W' = W + key delta^T / |key|^2: the least-Frobenius-norm change with key W' = key W + delta.
template <typename Scalar>
Matrix<Scalar> apply_rank_one(const Matrix<Scalar>& w, const Vector<Scalar>& key, const Vector<Scalar>& delta);

/// In-place variant used by the editor.
template <typename Scalar>
void apply_rank_one_inplace(Matrix<Scalar>& w, const Vector<Scalar>& key, const Vector<Scalar>& delta);

enum class Stage { edit, rollback };

struct EditReceipt {
  Stage stage = Stage::edit;
  int layer = 0;
  VectorF key;
  double key_norm = 0;
  VectorF delta;
  double delta_norm = 0;
  double update_frobenius = 0;
  double pre_loss = 0;
  double post_loss = 0;
  bool edit_success = false;
  std::optional<bool> rollback_success;
  VectorF v_star;
  VectorF original_value;  // key W_proj + b_proj before this stage
};

/// Resolves `policy` to a layer (running the selector when needed), optimizes
/// the value there and writes the rank-one update into `model`.
EditReceipt edit(ModelF& model, const EditRequest& req, const LayerPolicy& policy, const EditEnv& env);

/// Same as edit() at `layer` with a caller-supplied value instead of an optimized one.
EditReceipt edit_with_value(ModelF& model, const EditRequest& req, int layer, const VectorF& v_star,
                            const EditEnv& env, const std::string& target);

enum class RollbackMode { optimize, oracle };

/// Rewrites the fact back to target_true at the layer the edit used. Oracle
/// mode writes back the value captured before the edit.
EditReceipt rollback(ModelF& model, const EditRequest& req, const EditReceipt& edit_receipt, const EditEnv& env,
                     RollbackMode mode = RollbackMode::optimize);

}  // namespace wilke
