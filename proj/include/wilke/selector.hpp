#pragma once

#include "wilke/editor.hpp"

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace wilke {

/// Layers whose activation strength falls below this are never selected.
inline constexpr double kMinActivation = 1e-8;

enum class WeightNorm { frobenius, spectral };

struct LayerScore {
  int layer = 0;
  double activation = 0;      // |sigma(x W_fc + b_fc)|_2 of the averaged key
  double delta_strength = 0;  // |delta|_2
  double weight_norm = 0;     // |W_proj|
  double score = 0;           // delta / (weight_norm * activation)
  bool valid = false;         // activation above threshold and delta optimized
  std::string error;          // per-layer optimization failure, if any
};

struct LayerScoreProfile {
  std::vector<LayerScore> layers;
  int chosen = -1;
  std::vector<std::optional<ValueResult>> values;  // per layer, when delta_profile ran
};

/// Frobenius norm, or the largest singular value by power iteration.
double weight_norm(const MatrixF& w, WeightNorm kind = WeightNorm::frobenius);

std::vector<double> activation_profile(const ModelF& model, const EditRequest& req, const EditEnv& env);

/// optimize_value at every layer on the same immutable model. A layer whose
/// optimization throws yields an empty slot and an error string.
std::vector<std::optional<ValueResult>> delta_profile(const ModelF& model, const EditRequest& req,
                                                      const EditEnv& env, std::vector<std::string>* errors = nullptr,
                                                      int threads = 1);

/// Activation, delta and weight norms for every layer plus the WilKE choice.
LayerScoreProfile score_profile(const ModelF& model, const EditRequest& req, const EditEnv& env,
                                WeightNorm norm = WeightNorm::frobenius, int threads = 1);

/// Builds a profile from precomputed per-layer numbers (scores filled in).
LayerScoreProfile make_profile(const std::vector<double>& activation, const std::vector<double>& delta_strength,
                               const std::vector<double>& weight_norms);

/// argmin delta / (|W_proj| a) over valid layers; ties go to the earlier layer.
int wise_layer(const LayerScoreProfile& profile);

/// The layer each policy picks from a profile. Fixed policies return their layer.
int select_layer(const LayerScoreProfile& profile, const LayerPolicy& policy);

enum class AblationKind { no_delta, no_activation, no_weight_norm };
LayerPolicy ablation_policy(AblationKind kind);

/// Per-layer score used by a policy (lower is better; no_delta is negated activation).
std::vector<double> policy_scores(const LayerScoreProfile& profile, PolicyKind kind);

/// CSV with columns layer,a_l,d_l,w_l,s_l,chosen.
void write_profile_csv(const LayerScoreProfile& profile, std::ostream& out);

}  // namespace wilke
