#include "wilke/editor.hpp"

#include "wilke/selector.hpp"

#include <cmath>
#include <random>

namespace wilke {

std::string fill_subject(const std::string& tmpl, const std::string& subject) {
  const auto pos = tmpl.find("{}");
  if (pos == std::string::npos || tmpl.find("{}", pos + 2) != std::string::npos)
    throw ValidationError("template '" + tmpl + "' must contain exactly one {} subject slot");
  return tmpl.substr(0, pos) + subject + tmpl.substr(pos + 2);
}

void EditRequest::validate() const {
  fill_subject(prompt_template, subject);
  fill_subject(essence_prompt, subject);
  if (subject.empty()) throw ValidationError("request.subject: empty");
  if (target_new.empty()) throw ValidationError("request.target_new: empty");
  if (target_true.empty()) throw ValidationError("request.target_true: empty");
}

std::string EditRequest::prompt() const { return fill_subject(prompt_template, subject); }
std::string EditRequest::essence() const { return fill_subject(essence_prompt, subject); }

Tokens target_tokens(const Tokenizer& tok, const std::string& target) {
  if (target.empty()) throw ValidationError("target: zero-length target");
  return tok.encode(" " + target);
}

void DeltaOptConfig::validate() const {
  if (steps < 1) throw ValidationError("delta.steps: must be >= 1");
  if (!(learning_rate > 0)) throw ValidationError("delta.learning_rate: must be > 0");
  if (!(kl_weight >= 0)) throw ValidationError("delta.kl_weight: must be >= 0");
  if (n_prefixes < 0) throw ValidationError("delta.n_prefixes: must be >= 0");
  if (prefix_len_min < 1 || prefix_len_min > prefix_len_max)
    throw ValidationError("delta.prefix_len_range: need 1 <= min <= max");
  if (!(clamp_factor > 0)) throw ValidationError("delta.clamp_factor: must be > 0");
}

LayerPolicy LayerPolicy::parse(const std::string& text) {
  if (text == "wilke") return wilke();
  if (text.rfind("fixed:", 0) == 0) {
    try {
      std::size_t used = 0;
      const int l = std::stoi(text.substr(6), &used);
      if (used != text.size() - 6 || l < 0) throw std::invalid_argument("layer");
      return fixed(l);
    } catch (const std::exception&) {
      throw ValidationError("policy: bad layer in '" + text + "'");
    }
  }
  if (text == "ablate:delta") return {PolicyKind::no_delta, 0};
  if (text == "ablate:act") return {PolicyKind::no_activation, 0};
  if (text == "ablate:norm") return {PolicyKind::no_weight_norm, 0};
  throw ValidationError("policy: expected fixed:<l>, wilke or ablate:{delta|act|norm}, got '" + text + "'");
}

std::string LayerPolicy::to_string() const {
  switch (kind) {
    case PolicyKind::fixed: return "fixed:" + std::to_string(layer);
    case PolicyKind::wilke: return "wilke";
    case PolicyKind::no_delta: return "ablate:delta";
    case PolicyKind::no_activation: return "ablate:act";
    case PolicyKind::no_weight_norm: return "ablate:norm";
  }
  return "?";
}

std::vector<Tokens> sample_prefixes(const ModelF& model, const Tokenizer& tok, const DeltaOptConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed ^ 0x5eedf00dull);
  std::uniform_int_distribution<int> len_dist(cfg.prefix_len_min, cfg.prefix_len_max);
  const int vocab = model.config.vocab_size;
  std::vector<Tokens> out;
  for (int j = 0; j < cfg.n_prefixes; ++j) {
    const int len = std::min(len_dist(rng), model.config.max_seq);
    Tokens seq;
    if (tok.is_bpe()) {
      seq.push_back(std::uniform_int_distribution<Token>(0, vocab - 1)(rng));
    } else {
      seq.push_back(std::uniform_int_distribution<Token>('a', 'z')(rng));
    }
    while (static_cast<int>(seq.size()) < len) {
      const auto logits = forward(model, seq);
      const VectorF p = softmax<float>(logits.row(logits.rows() - 1).transpose());
      std::discrete_distribution<int> pick(p.data(), p.data() + p.size());
      seq.push_back(pick(rng));
    }
    out.push_back(std::move(seq));
  }
  return out;
}

EditEnv make_env(const ModelF& model, const Tokenizer& tok, DeltaOptConfig cfg) {
  cfg.validate();
  EditEnv env{&tok, cfg, {}};
  env.prefixes = sample_prefixes(model, tok, cfg);
  return env;
}

PromptContext subject_context(const Tokenizer& tok, const std::string& tmpl, const std::string& subject) {
  const std::string full = fill_subject(tmpl, subject);
  const std::string head = tmpl.substr(0, tmpl.find("{}"));
  const Tokens before = tok.encode(head.substr(0, head.find_last_not_of(' ') + 1));
  const Tokens through = tok.encode(head + subject);
  if (through.size() <= before.size() || subject.empty())
    throw ValidationError("subject '" + subject + "' tokenizes to an empty span");
  return {tok.encode(full), static_cast<int>(through.size()) - 1, static_cast<int>(before.size())};
}

std::vector<PromptContext> edit_contexts(const EditEnv& env, const EditRequest& req) {
  const auto& tok = *env.tokenizer;
  const PromptContext bare = subject_context(tok, req.prompt_template, req.subject);
  std::vector<PromptContext> out{bare};
  const Tokens sep = tok.encode(". ");
  for (const auto& prefix : env.prefixes) {
    PromptContext c;
    c.tokens = prefix;
    c.tokens.insert(c.tokens.end(), sep.begin(), sep.end());
    const int shift = static_cast<int>(c.tokens.size());
    c.tokens.insert(c.tokens.end(), bare.tokens.begin(), bare.tokens.end());
    c.subject_pos = bare.subject_pos + shift;
    c.subject_begin = bare.subject_begin + shift;
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<VectorF> compute_keys(const ModelF& model, const EditRequest& req, const EditEnv& env) {
  req.validate();
  const auto contexts = edit_contexts(env, req);
  const int layers = model.config.n_layers;
  std::vector<VectorD> sums(layers, VectorD::Zero(model.config.d_mlp));
  for (const auto& c : contexts) {
    const auto cache = forward_cached(model, c.tokens);
    for (int l = 0; l < layers; ++l) sums[l] += cache.blocks[l].act.row(c.subject_pos).transpose().cast<double>();
  }
  std::vector<VectorF> keys;
  for (auto& s : sums) keys.push_back((s / static_cast<double>(contexts.size())).cast<float>());
  return keys;
}

VectorF compute_key(const ModelF& model, int layer, const EditRequest& req, const EditEnv& env) {
  if (layer < 0 || layer >= model.config.n_layers) throw ValidationError("layer " + std::to_string(layer) + " out of range");
  return compute_keys(model, req, env)[layer];
}

namespace {

/// Clean MLP output (key W_proj + b_proj) for a given key.
VectorF value_of_key(const ModelF& model, int layer, const VectorF& key) {
  const auto& b = model.blocks[layer];
  return (key.transpose() * b.proj_w).transpose() + b.proj_b;
}

struct RewriteObjective {
  const ModelF& model;
  int layer;
  std::vector<PromptContext> contexts;
  Tokens target;
  PromptContext essence;
  VectorF essence_ref;  // clean log-probs after the essence prompt
  double kl_weight;

  double evaluate(const VectorF& z, VectorD& grad) const {
    grad = VectorD::Zero(z.size());
    double total = 0;
    const double w = 1.0 / static_cast<double>(contexts.size());
    for (const auto& c : contexts) {
      Tokens seq = c.tokens;
      seq.insert(seq.end(), target.begin(), target.end() - 1);
      std::vector<int> positions;
      for (std::size_t k = 0; k < target.size(); ++k) positions.push_back(static_cast<int>(c.tokens.size() + k) - 1);
      const Site site{layer, c.subject_pos, SiteKind::mlp_out};
      auto [v, g] = loss_and_grad_with_replacement<float>(model, seq, site, z, nll_loss<float>(positions, target));
      total += w * v;
      grad += w * g.cast<double>();
    }
    if (kl_weight > 0) {
      const Site site{layer, essence.subject_pos, SiteKind::mlp_out};
      const int last = static_cast<int>(essence.tokens.size()) - 1;
      auto [v, g] = loss_and_grad_with_replacement<float>(model, essence.tokens, site, z, kl_loss<float>(last, essence_ref));
      total += kl_weight * v;
      grad += kl_weight * g.cast<double>();
    }
    if (!std::isfinite(total)) throw NumericError("optimize_value: non-finite loss at layer " + std::to_string(layer));
    return total;
  }
};

/// Truncates prefix contexts from the left so prompt + target fits max_seq.
void fit_contexts(std::vector<PromptContext>& contexts, std::size_t target_len, int max_seq) {
  for (auto& c : contexts) {
    const std::size_t need = c.tokens.size() + target_len - 1;
    if (need <= static_cast<std::size_t>(max_seq)) continue;
    const std::size_t cut = need - static_cast<std::size_t>(max_seq);
    if (cut > static_cast<std::size_t>(c.subject_pos))
      throw ValidationError("prompt plus target exceeds max_seq");
    c.tokens.erase(c.tokens.begin(), c.tokens.begin() + static_cast<std::ptrdiff_t>(cut));
    c.subject_pos -= static_cast<int>(cut);
  }
}

}  // namespace

ValueResult optimize_value(const ModelF& model, int layer, const EditRequest& req, const EditEnv& env,
                           const std::string& target) {
  if (layer < 0 || layer >= model.config.n_layers) throw ValidationError("layer " + std::to_string(layer) + " out of range");
  req.validate();
  const auto& cfg = env.cfg;
  const auto& tok = *env.tokenizer;
  const Tokens tgt = target_tokens(tok, target);
  if (tgt.empty()) throw ValidationError("target: zero-length target");

  auto contexts = edit_contexts(env, req);
  fit_contexts(contexts, tgt.size(), model.config.max_seq);
  const PromptContext essence = subject_context(tok, req.essence_prompt, req.subject);
  const auto essence_logits = forward(model, essence.tokens);
  const VectorF essence_ref = log_softmax<float>(essence_logits.row(essence_logits.rows() - 1).transpose());

  const PromptContext& bare = contexts.front();
  const Site bare_site{layer, bare.subject_pos, SiteKind::mlp_out};
  const VectorF clean = forward_with<float>(model, bare.tokens, {}, {bare_site}).captured.at(bare_site);

  RewriteObjective obj{model, layer, contexts, tgt, essence, essence_ref, cfg.kl_weight};

  ValueResult out;
  out.clean_value = clean;
  out.key = compute_key(model, layer, req, env);
  const double max_norm = cfg.clamp_factor * static_cast<double>(clean.norm());

  VectorD z = clean.cast<double>();
  VectorD m1 = VectorD::Zero(z.size()), m2 = VectorD::Zero(z.size());
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double lr = cfg.learning_rate;
  VectorD grad;
  double loss = obj.evaluate(z.cast<float>(), grad);
  out.stats.initial_loss = loss;
  out.stats.losses.push_back(loss);
  double best_loss = loss;
  VectorD best = z;
  double prev = loss;
  for (int step = 1; step <= cfg.steps; ++step) {
    m1 = beta1 * m1 + (1 - beta1) * grad;
    m2 = beta2 * m2 + (1 - beta2) * grad.cwiseProduct(grad);
    const VectorD mhat = m1 / (1 - std::pow(beta1, step));
    const VectorD vhat = m2 / (1 - std::pow(beta2, step));
    z -= lr * (mhat.array() / (vhat.array().sqrt() + eps)).matrix();
    const double norm = z.norm();
    if (norm > max_norm) {
      z *= max_norm / norm;
      out.stats.clamped = true;
    }
    loss = obj.evaluate(z.cast<float>(), grad);
    out.stats.losses.push_back(loss);
    out.stats.steps_taken = step;
    if (loss < best_loss) {
      best_loss = loss;
      best = z;
    }
    if (loss > prev) lr *= 0.5;
    prev = loss;
  }
  out.stats.final_loss = best_loss;
  out.v_star = best.cast<float>();
  out.delta = out.v_star - value_of_key(model, layer, out.key);
  return out;
}

ValueResult optimize_value(const ModelF& model, int layer, const EditRequest& req, const EditEnv& env) {
  return optimize_value(model, layer, req, env, req.target_new);
}

template <typename Scalar>
void apply_rank_one_inplace(Matrix<Scalar>& w, const Vector<Scalar>& key, const Vector<Scalar>& delta) {
  if (key.size() != w.rows() || delta.size() != w.cols()) throw ValidationError("apply_rank_one: shape mismatch");
  const Scalar sq = key.squaredNorm();
  if (!(sq > 0)) throw ValidationError("apply_rank_one: zero key (degenerate pattern; do not edit this layer)");
  w.noalias() += (key / sq) * delta.transpose();
}

template <typename Scalar>
Matrix<Scalar> apply_rank_one(const Matrix<Scalar>& w, const Vector<Scalar>& key, const Vector<Scalar>& delta) {
  Matrix<Scalar> out = w;
  apply_rank_one_inplace(out, key, delta);
  return out;
}

template Matrix<float> apply_rank_one<float>(const Matrix<float>&, const Vector<float>&, const Vector<float>&);
template Matrix<double> apply_rank_one<double>(const Matrix<double>&, const Vector<double>&, const Vector<double>&);
template void apply_rank_one_inplace<float>(Matrix<float>&, const Vector<float>&, const Vector<float>&);
template void apply_rank_one_inplace<double>(Matrix<double>&, const Vector<double>&, const Vector<double>&);

namespace {

EditReceipt commit(ModelF& model, const EditRequest& req, int layer, const VectorF& key, const VectorF& v_star,
                   const EditEnv& env, const std::string& target, double pre_loss, double post_loss) {
  EditReceipt r;
  r.layer = layer;
  r.key = key;
  r.key_norm = key.cast<double>().norm();
  r.original_value = value_of_key(model, layer, key);
  r.v_star = v_star;
  r.delta = v_star - r.original_value;
  r.delta_norm = r.delta.cast<double>().norm();
  apply_rank_one_inplace<float>(model.blocks[layer].proj_w, key, r.delta);
  const VectorD scaled = key.cast<double>() / key.cast<double>().squaredNorm();
  r.update_frobenius = (scaled * r.delta.cast<double>().transpose()).norm();
  r.pre_loss = pre_loss;
  r.post_loss = post_loss;
  const Tokens prompt = env.tokenizer->encode(req.prompt());
  r.edit_success = teacher_forced_match(model, prompt, target_tokens(*env.tokenizer, target));
  return r;
}

}  // namespace

EditReceipt edit_with_value(ModelF& model, const EditRequest& req, int layer, const VectorF& v_star,
                            const EditEnv& env, const std::string& target) {
  if (v_star.size() != model.config.d_model) throw ValidationError("v_star: length must equal d_model");
  const VectorF key = compute_key(model, layer, req, env);
  return commit(model, req, layer, key, v_star, env, target, 0.0, 0.0);
}

EditReceipt edit(ModelF& model, const EditRequest& req, const LayerPolicy& policy, const EditEnv& env) {
  req.validate();
  std::optional<ValueResult> value;
  int layer = policy.layer;
  if (policy.kind == PolicyKind::fixed) {
    if (layer < 0 || layer >= model.config.n_layers)
      throw ValidationError("policy: fixed layer " + std::to_string(layer) + " out of range");
    value = optimize_value(model, layer, req, env);
  } else {
    auto profile = score_profile(model, req, env);
    layer = select_layer(profile, policy);
    value = std::move(profile.values[layer]);
  }
  return commit(model, req, layer, value->key, value->v_star, env, req.target_new, value->stats.initial_loss,
                value->stats.final_loss);
}

EditReceipt rollback(ModelF& model, const EditRequest& req, const EditReceipt& edit_receipt, const EditEnv& env,
                     RollbackMode mode) {
  req.validate();
  const int layer = edit_receipt.layer;
  EditReceipt r;
  if (mode == RollbackMode::oracle) {
    r = commit(model, req, layer, edit_receipt.key, edit_receipt.original_value, env, req.target_true, 0.0, 0.0);
  } else {
    const ValueResult value = optimize_value(model, layer, req, env, req.target_true);
    r = commit(model, req, layer, value.key, value.v_star, env, req.target_true, value.stats.initial_loss,
               value.stats.final_loss);
  }
  r.stage = Stage::rollback;
  r.rollback_success = r.edit_success;
  return r;
}

}  // namespace wilke
