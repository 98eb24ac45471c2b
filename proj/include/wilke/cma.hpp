#pragma once

#include "wilke/model.hpp"

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace wilke {

/// A prompt with a subject span and the object whose probability is traced.
struct CmaInput {
  std::string record_id;
  Tokens prompt;
  int subject_begin = 0;  // [begin, end) token span of the subject
  int subject_end = 0;
  Tokens target;          // scored teacher-forced; probability is the product over tokens
};

struct CmaOptions {
  double noise_scale = -1;  // < 0 selects 3x the token-embedding standard deviation
  int n_samples = 8;
  std::vector<SiteKind> sites{SiteKind::hidden_state, SiteKind::mlp_out, SiteKind::attn_out};
  std::uint64_t seed = 0;
  int threads = 1;
};

struct CmaReport {
  std::string record_id;
  double p_clean = 0;
  double p_corrupt = 0;
  std::map<SiteKind, MatrixD> grids;  // [layers x tokens] indirect effects
  double noise_scale = 0;
  int n_samples = 0;
  double total_effect() const { return p_clean - p_corrupt; }
};

/// Standard deviation over every token-embedding entry.
double embedding_std(const ModelF& model);

/// Probability of `input.target` after `input.prompt` under the given interventions.
double target_probability(const ModelF& model, const CmaInput& input, const std::vector<Intervention<float>>& interventions);

/// Corruption interventions for sample `s`: Gaussian noise on every subject embedding.
std::vector<Intervention<float>> subject_corruption(const CmaInput& input, double noise_scale, std::uint64_t seed);

/// Mean over samples of p with the given clean states restored under corruption.
double restored_probability(const ModelF& model, const CmaInput& input, const std::vector<Site>& restore,
                            double noise_scale, int n_samples, std::uint64_t seed);

CmaReport run_cma(const ModelF& model, const CmaInput& input, const CmaOptions& options = {});

/// site,layer,token,IE
void write_cma_csv(const CmaReport& report, std::ostream& out);

/// Layer holding the largest indirect effect of `kind` (earliest on ties).
int peak_layer(const CmaReport& report, SiteKind kind);

}  // namespace wilke
