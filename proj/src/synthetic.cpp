#include "wilke/synthetic.hpp"

#include "wilke/toy_kb.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace wilke {

void SyntheticSpec::validate() const {
  if (n_facts < 1) throw ValidationError("synthetic.n_facts: must be >= 1");
  if (n_layers < 1) throw ValidationError("synthetic.n_layers: must be >= 1");
  if (!fc_scale.empty() && static_cast<int>(fc_scale.size()) != n_layers)
    throw ValidationError("synthetic.fc_scale: need one entry per layer");
  if (!proj_scale.empty() && static_cast<int>(proj_scale.size()) != n_layers)
    throw ValidationError("synthetic.proj_scale: need one entry per layer");
  if (!fc_shift.empty() && static_cast<int>(fc_shift.size()) != n_layers)
    throw ValidationError("synthetic.fc_shift: need one entry per layer");
  if (n_flash < 0 || n_flash > n_facts) throw ValidationError("synthetic.n_flash: out of range");
  if (n_flash > 0 && (flash_layer < 0 || flash_layer >= n_layers))
    throw ValidationError("synthetic.flash_layer: out of range");
  if (route_gain < 0) throw ValidationError("synthetic.route_gain: must be >= 0");
  if (route_gain > 0 && (flash_layer < 0 || flash_layer + 1 >= n_layers))
    throw ValidationError("synthetic.route_gain: the routing head needs a layer after flash_layer");
  if (!(flash_depth > 0)) throw ValidationError("synthetic.flash_depth: must be > 0");
  if (!(context_depth > 0)) throw ValidationError("synthetic.context_depth: must be > 0");
}

namespace {

// Reserved residual coordinates, read only by the flash layer's W_fc. The flash
// flag is set on flash subjects, the subject flag on every other subject.
constexpr Eigen::Index kFlashFlag = 0;
constexpr Eigen::Index kSubjectFlag = 1;
// Layernorm output the flags are calibrated to at the flash layer.
constexpr double kFlagLevel = 3.0;
// Neurons that carry the flash keys.
constexpr Eigen::Index kFlashNeurons = 16;
// Pre-activation drop applied by the flags; gelu(-10) is about 1e-22.
constexpr double kSilence = 10.0;
// Attention logit per unit of flag seen by the routing head.
constexpr double kRouteSharpness = 5.0;

struct Candidate {
  std::string subject;
  int relation = 0;
  Tokens prompt;
  Eigen::Index subject_pos = 0;
  Token subject_token = 0;
};

/// Flash subjects silence every neuron outside the flash set, other subjects
/// silence the flash set, and context tokens keep a faint response there.
void reserve_flags(ModelF& m, int flash_layer, double depth, double context_depth) {
  for (Eigen::Index c : {kFlashFlag, kSubjectFlag}) {
    m.tok_emb.col(c).setZero();
    m.pos_emb.col(c).setZero();
    m.unembed.col(c).setZero();
    for (auto& b : m.blocks) {
      b.ln1_w(c) = b.ln1_b(c) = 0;
      b.ln2_w(c) = b.ln2_b(c) = 0;
      b.o_w.col(c).setZero();
      b.o_b(c) = 0;
      b.proj_w.col(c).setZero();
      b.proj_b(c) = 0;
      b.fc_w.row(c).setZero();
    }
    m.lnf_w(c) = m.lnf_b(c) = 0;
  }
  auto& b = m.blocks[flash_layer];
  b.ln2_w(kFlashFlag) = b.ln2_w(kSubjectFlag) = 1;
  const auto rest = b.fc_w.cols() - kFlashNeurons;
  b.fc_w.leftCols(kFlashNeurons).setZero();
  b.fc_b.head(kFlashNeurons).setConstant(static_cast<float>(-context_depth));
  b.fc_w.row(kSubjectFlag).head(kFlashNeurons).setConstant(static_cast<float>(kSilence / kFlagLevel));
  b.fc_w.row(kFlashFlag).head(kFlashNeurons).setConstant(static_cast<float>((context_depth - depth) / kFlagLevel));
  b.fc_w.row(kFlashFlag).tail(rest).setConstant(static_cast<float>(-kSilence / kFlagLevel));
}

/// Head 0 of `layer` attends from every position to the nearest flagged
/// subject and copies it, so a prompt that ends after the subject still reads
/// the subject's edited value, as a trained model's mover heads would.
void route_subject(ModelF& m, int layer, double gain) {
  auto& b = m.blocks[layer];
  const auto hd = m.config.head_dim();
  b.ln1_w(kFlashFlag) = b.ln1_w(kSubjectFlag) = 1;
  b.q_w.leftCols(hd).setZero();
  b.k_w.leftCols(hd).setZero();
  b.q_b.head(hd).setZero();
  b.k_b.head(hd).setZero();
  b.q_b(0) = static_cast<float>(kRouteSharpness * std::sqrt(static_cast<double>(hd)));
  b.k_w(kFlashFlag, 0) = 1;
  b.k_w(kSubjectFlag, 0) = -1;
  b.v_w.leftCols(hd) *= static_cast<float>(gain);
}

/// Bisects the subject's embedding at `coord` until `probe`, read on the bare
/// prompt and increasing in that embedding value, reaches `target`.
template <typename Probe>
void calibrate(ModelF& m, const Candidate& c, Eigen::Index coord, double sign, double target, Probe probe) {
  auto at = [&](double f) {
    m.tok_emb(c.subject_token, coord) = static_cast<float>(sign * f);
    return probe(forward_cached(m, c.prompt));
  };
  double lo = 0, hi = 1;
  while (at(hi) < target && hi < 1e6) hi *= 2;
  for (int it = 0; it < 40; ++it) {
    const double mid = 0.5 * (lo + hi);
    (at(mid) < target ? lo : hi) = mid;
  }
  at(hi);
}

std::optional<std::string> predicted_object(const ModelF& m, const Tokenizer& tok, const Tokens& prompt,
                                            const std::set<std::string>& objects) {
  const MatrixF logits = forward(m, prompt);
  Eigen::Index best = 0;
  logits.row(logits.rows() - 1).maxCoeff(&best);
  const std::string text = tok.decode({static_cast<Token>(best)});
  if (text.size() < 2 || text[0] != ' ' || !objects.count(text.substr(1))) return std::nullopt;
  return text.substr(1);
}

}  // namespace

SyntheticLab make_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  // Twice as many candidate subjects as facts; predictions that are not an
  // object token are discarded.
  const int subjects_needed = 2 * spec.n_facts + 16;
  const ToyKb kb = make_toy_kb(spec.seed, 16 * ((subjects_needed + 3) / 4), 0);
  SyntheticLab lab{ModelF{}, toy_tokenizer(kb), {}, {}};
  const Tokenizer& tok = lab.tokenizer;

  std::vector<Candidate> cands;
  std::set<std::string> seen;
  for (const auto& f : kb.facts) {
    if (!seen.insert(f.subject).second) continue;
    Candidate c;
    c.subject = f.subject;
    c.relation = static_cast<int>(cands.size() % 4);
    const auto ctx = subject_context(tok, kb.relations[c.relation].templates.front() + spec.prompt_suffix, c.subject);
    c.prompt = ctx.tokens;
    c.subject_pos = static_cast<Eigen::Index>(ctx.subject_pos);
    c.subject_token = ctx.tokens[ctx.subject_pos];
    cands.push_back(std::move(c));
  }

  ModelConfig cfg = toy_model_config(tok);
  cfg.n_layers = spec.n_layers;
  cfg.d_model = spec.d_model;
  cfg.d_mlp = spec.d_mlp;
  ModelF& m = lab.model;
  m = ModelF::random(cfg, spec.seed, spec.init_std);
  std::mt19937_64 rng(spec.seed ^ 0x5e7a11ull);
  std::normal_distribution<float> normal(0.f, static_cast<float>(spec.init_std));
  for (int l = 0; l < spec.n_layers; ++l) {
    auto& b = m.blocks[l];
    for (Eigen::Index i = 0; i < b.fc_b.size(); ++i) b.fc_b(i) = normal(rng);
    for (Eigen::Index i = 0; i < b.proj_b.size(); ++i) b.proj_b(i) = normal(rng);
    if (!spec.fc_scale.empty()) {
      b.fc_w *= static_cast<float>(spec.fc_scale[l]);
      b.fc_b *= static_cast<float>(spec.fc_scale[l]);
    }
    if (!spec.proj_scale.empty()) b.proj_w *= static_cast<float>(spec.proj_scale[l]);
    if (!spec.fc_shift.empty()) b.fc_b.array() += static_cast<float>(spec.fc_shift[l]);
  }
  std::set<std::string> objects;
  for (const auto& r : kb.relations)
    for (const auto& o : r.objects) {
      objects.insert(o);
      m.unembed.row(tok.encode(" " + o).front()) *= static_cast<float>(spec.object_boost);
    }

  std::vector<bool> flagged(cands.size(), false);
  std::vector<std::optional<std::string>> truth(cands.size());
  if (spec.n_flash > 0 || spec.route_gain > 0) {
    const int L = spec.flash_layer;
    reserve_flags(m, L, spec.flash_depth, spec.context_depth);
    if (spec.route_gain > 0) route_subject(m, L + 1, spec.route_gain);
    // Normal subjects: normalized subject flag at -kFlagLevel.
    for (const auto& c : cands)
      calibrate(m, c, kSubjectFlag, -1.0, kFlagLevel, [&](const auto& cache) {
        return -static_cast<double>(cache.blocks[L].ln2_hat(c.subject_pos, kSubjectFlag));
      });
    std::vector<std::size_t> order(cands.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    int found = 0;
    for (std::size_t i : order) {
      if (found == spec.n_flash) break;
      const float subject_flag = m.tok_emb(cands[i].subject_token, kSubjectFlag);
      m.tok_emb(cands[i].subject_token, kSubjectFlag) = 0;
      // Flash subjects: the flash neurons' pre-activation sits at -flash_depth.
      // Layernorm centering leaks into the other flag, so target the neuron itself.
      calibrate(m, cands[i], kFlashFlag, 1.0, spec.flash_depth, [&](const auto& cache) {
        return -static_cast<double>(cache.blocks[L].pre(cands[i].subject_pos, 0));
      });
      truth[i] = predicted_object(m, tok, cands[i].prompt, objects);
      if (truth[i]) {
        flagged[i] = true;
        ++found;
      } else {
        m.tok_emb(cands[i].subject_token, kFlashFlag) = 0;
        m.tok_emb(cands[i].subject_token, kSubjectFlag) = subject_flag;
      }
    }
    if (found < spec.n_flash) throw ValidationError("synthetic: could not plant enough flash facts");
  }
  for (std::size_t i = 0; i < cands.size(); ++i)
    if (!flagged[i]) truth[i] = predicted_object(m, tok, cands[i].prompt, objects);

  // Keep every flash fact plus the first known normal facts, in candidate order.
  std::vector<std::size_t> keep;
  int normals = spec.n_facts - spec.n_flash;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (!truth[i]) continue;
    if (flagged[i]) {
      keep.push_back(i);
    } else if (normals > 0) {
      keep.push_back(i);
      --normals;
    }
  }
  if (normals > 0) throw ValidationError("synthetic: too few known facts; raise object_boost");

  for (std::size_t n = 0; n < keep.size(); ++n) {
    const Candidate& c = cands[keep[n]];
    const ToyRelation& rel = kb.relations[c.relation];
    KnowledgeRecord r;
    r.case_id = static_cast<std::int64_t>(n);
    r.prompt = rel.templates.front() + spec.prompt_suffix;
    r.subject = c.subject;
    r.target_true = *truth[keep[n]];
    r.relation_id = rel.id;
    std::vector<std::string> others;
    for (const auto& o : rel.objects)
      if (o != r.target_true) others.push_back(o);
    r.target_new = others[std::uniform_int_distribution<std::size_t>(0, others.size() - 1)(rng)];
    for (std::size_t t = 1; t < rel.templates.size(); ++t) r.paraphrase_prompts.push_back(fill_subject(rel.templates[t] + spec.prompt_suffix, c.subject));
    for (std::size_t k : keep) {
      if (k == keep[n] || cands[k].relation != c.relation || *truth[k] != r.target_true) continue;
      if (r.neighborhood_prompts.size() == 4) break;
      r.neighborhood_prompts.push_back(fill_subject(rel.templates.front() + spec.prompt_suffix, cands[k].subject));
    }
    if (flagged[keep[n]]) lab.flash_ids.insert(r.case_id);
    lab.records.push_back(std::move(r));
  }
  return lab;
}

SyntheticSpec planted_pattern_spec(std::uint64_t seed, int planted_layer, int n_layers) {
  if (planted_layer < 0 || planted_layer >= n_layers) throw ValidationError("planted_layer out of range");
  SyntheticSpec s;
  s.seed = seed;
  s.n_facts = 16;
  s.n_layers = n_layers;
  s.fc_scale.assign(n_layers, 1e-3);
  s.fc_scale[planted_layer] = 1.0;
  return s;
}

SyntheticSpec flash_spec(std::uint64_t seed, int n_flash, int n_facts) {
  SyntheticSpec s;
  s.seed = seed;
  s.n_facts = n_facts;
  s.n_flash = n_flash;
  s.prompt_suffix = " is";
  s.route_gain = 32;
  return s;
}

SyntheticSpec adversarial_spec(AblationKind kind, std::uint64_t seed) {
  SyntheticSpec s;
  s.seed = seed;
  s.fc_scale.assign(s.n_layers, 1.0);
  s.proj_scale.assign(s.n_layers, 1.0);
  s.fc_shift.assign(s.n_layers, 0.0);
  switch (kind) {
    case AblationKind::no_delta:  // loudest keys are one shared bias vector behind a small W_proj
      s.fc_shift[2] = 3.0;
      s.proj_scale[2] = 0.02;
      break;
    case AblationKind::no_activation:  // every subject flash-keyed on a heavy W_proj
      s.n_flash = s.n_facts;
      s.proj_scale[1] = 5.0;
      break;
    case AblationKind::no_weight_norm:  // W_proj norms spread 10x
      s.fc_scale[1] = 5.0;
      s.proj_scale[1] = 0.1;
      break;
  }
  return s;
}

}  // namespace wilke
