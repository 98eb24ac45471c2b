#include "wilke/selector.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <ostream>
#include <thread>

namespace wilke {

double weight_norm(const MatrixF& w, WeightNorm kind) {
  const MatrixD wd = w.cast<double>();
  if (kind == WeightNorm::frobenius) return wd.norm();
  // power iteration on W^T W from a fixed start vector
  VectorD v = VectorD::Ones(wd.cols()).normalized();
  double sigma = 0;
  for (int it = 0; it < 500; ++it) {
    VectorD u = wd * v;
    VectorD next = wd.transpose() * u;
    const double n = next.norm();
    if (n == 0) return 0;
    next /= n;
    const double s = std::sqrt(n);
    const bool done = std::abs(s - sigma) <= 1e-12 * s;
    sigma = s;
    v = next;
    if (done) break;
  }
  return sigma;
}

std::vector<double> activation_profile(const ModelF& model, const EditRequest& req, const EditEnv& env) {
  std::vector<double> out;
  for (const auto& k : compute_keys(model, req, env)) out.push_back(k.cast<double>().norm());
  return out;
}

std::vector<std::optional<ValueResult>> delta_profile(const ModelF& model, const EditRequest& req, const EditEnv& env,
                                                      std::vector<std::string>* errors, int threads) {
  const int n = model.config.n_layers;
  std::vector<std::optional<ValueResult>> out(n);
  std::vector<std::string> errs(n);
  std::atomic<int> next{0};
  auto work = [&] {
    for (int l = next++; l < n; l = next++) {
      try {
        out[l] = optimize_value(model, l, req, env);
      } catch (const std::exception& e) {
        errs[l] = e.what();
      }
    }
  };
  const int workers = std::clamp(threads, 1, n);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
  }
  if (errors) *errors = std::move(errs);
  return out;
}

LayerScoreProfile make_profile(const std::vector<double>& activation, const std::vector<double>& delta_strength,
                               const std::vector<double>& weight_norms) {
  if (activation.size() != delta_strength.size() || activation.size() != weight_norms.size())
    throw ValidationError("profile: per-layer vectors differ in length");
  LayerScoreProfile p;
  for (std::size_t l = 0; l < activation.size(); ++l) {
    LayerScore s;
    s.layer = static_cast<int>(l);
    s.activation = activation[l];
    s.delta_strength = delta_strength[l];
    s.weight_norm = weight_norms[l];
    s.valid = s.activation >= kMinActivation && s.weight_norm > 0 && std::isfinite(s.delta_strength);
    s.score = s.valid ? s.delta_strength / (s.weight_norm * s.activation) : std::numeric_limits<double>::infinity();
    p.layers.push_back(s);
  }
  bool any = false;
  for (const auto& s : p.layers) any = any || s.valid;
  if (any) p.chosen = wise_layer(p);
  return p;
}

LayerScoreProfile score_profile(const ModelF& model, const EditRequest& req, const EditEnv& env, WeightNorm norm,
                                int threads) {
  const auto act = activation_profile(model, req, env);
  std::vector<std::string> errors;
  auto values = delta_profile(model, req, env, &errors, threads);
  std::vector<double> d, w;
  for (int l = 0; l < model.config.n_layers; ++l) {
    d.push_back(values[l] ? values[l]->delta.cast<double>().norm() : std::numeric_limits<double>::quiet_NaN());
    w.push_back(weight_norm(model.blocks[l].proj_w, norm));
  }
  LayerScoreProfile p = make_profile(act, d, w);
  for (int l = 0; l < model.config.n_layers; ++l) p.layers[l].error = errors[l];
  p.values = std::move(values);
  return p;
}

std::vector<double> policy_scores(const LayerScoreProfile& profile, PolicyKind kind) {
  std::vector<double> out;
  for (const auto& s : profile.layers) {
    switch (kind) {
      case PolicyKind::wilke: out.push_back(s.delta_strength / (s.weight_norm * s.activation)); break;
      case PolicyKind::no_delta: out.push_back(-s.activation); break;
      case PolicyKind::no_activation: out.push_back(s.delta_strength / s.weight_norm); break;
      case PolicyKind::no_weight_norm: out.push_back(s.delta_strength / s.activation); break;
      case PolicyKind::fixed: out.push_back(0); break;
    }
  }
  return out;
}

namespace {

int argmin_valid(const LayerScoreProfile& profile, const std::vector<double>& scores) {
  int best = -1;
  for (std::size_t l = 0; l < scores.size(); ++l) {
    if (!profile.layers[l].valid) continue;
    if (best < 0 || scores[l] < scores[best]) best = static_cast<int>(l);
  }
  if (best < 0) throw ValidationError("no valid layer: every layer has activation strength below threshold");
  return best;
}

}  // namespace

int wise_layer(const LayerScoreProfile& profile) {
  return argmin_valid(profile, policy_scores(profile, PolicyKind::wilke));
}

int select_layer(const LayerScoreProfile& profile, const LayerPolicy& policy) {
  if (policy.kind == PolicyKind::fixed) return policy.layer;
  return argmin_valid(profile, policy_scores(profile, policy.kind));
}

LayerPolicy ablation_policy(AblationKind kind) {
  switch (kind) {
    case AblationKind::no_delta: return {PolicyKind::no_delta, 0};
    case AblationKind::no_activation: return {PolicyKind::no_activation, 0};
    case AblationKind::no_weight_norm: return {PolicyKind::no_weight_norm, 0};
  }
  throw ValidationError("unknown ablation");
}

void write_profile_csv(const LayerScoreProfile& profile, std::ostream& out) {
  out << "layer,a_l,d_l,w_l,s_l,chosen\n";
  const auto old = out.precision(9);
  for (const auto& s : profile.layers) {
    out << s.layer << ',' << s.activation << ',' << s.delta_strength << ',' << s.weight_norm << ',';
    if (s.valid) out << s.score; else out << "nan";
    out << ',' << (s.layer == profile.chosen ? 1 : 0) << '\n';
  }
  out.precision(old);
}

}  // namespace wilke
