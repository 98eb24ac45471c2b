#include "wilke/cma.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <ostream>
#include <thread>

namespace wilke {

double embedding_std(const ModelF& model) {
  const MatrixD e = model.tok_emb.cast<double>();
  const double mean = e.mean();
  return std::sqrt((e.array() - mean).square().mean());
}

namespace {

Tokens scored_sequence(const CmaInput& in) {
  Tokens seq = in.prompt;
  seq.insert(seq.end(), in.target.begin(), in.target.end() - 1);
  return seq;
}

double probability_from_logits(const MatrixF& logits, const CmaInput& in) {
  double logp = 0;
  const auto base = static_cast<Eigen::Index>(in.prompt.size()) - 1;
  for (std::size_t k = 0; k < in.target.size(); ++k) {
    const VectorF lp = log_softmax<float>(logits.row(base + static_cast<Eigen::Index>(k)).transpose());
    logp += lp(in.target[k]);
  }
  return std::exp(logp);
}

void check_input(const ModelF& model, const CmaInput& in) {
  if (in.prompt.empty()) throw ValidationError("cma: empty prompt");
  if (in.target.empty()) throw ValidationError("cma: empty target");
  if (in.subject_begin < 0 || in.subject_end <= in.subject_begin || in.subject_end > static_cast<int>(in.prompt.size()))
    throw ValidationError("cma: subject span out of range");
  if (static_cast<int>(in.prompt.size() + in.target.size()) - 1 > model.config.max_seq)
    throw ValidationError("cma: prompt plus target exceeds max_seq");
}

}  // namespace

double target_probability(const ModelF& model, const CmaInput& input, const std::vector<Intervention<float>>& interventions) {
  return probability_from_logits(forward_with<float>(model, scored_sequence(input), interventions, {}).logits, input);
}

std::vector<Intervention<float>> subject_corruption(const CmaInput& input, double noise_scale, std::uint64_t seed) {
  std::vector<Intervention<float>> out;
  for (int t = input.subject_begin; t < input.subject_end; ++t)
    out.push_back(Intervention<float>::corrupt({0, t, SiteKind::embedding}, static_cast<float>(noise_scale), seed));
  return out;
}

namespace {

struct Tracer {
  const ModelF& model;
  const CmaInput& input;
  Tokens seq;
  std::map<Site, VectorF> clean;
  double noise_scale;
  int n_samples;
  std::uint64_t seed;

  double restored(const std::vector<Site>& restore) const {
    double sum = 0;
    for (int s = 0; s < n_samples; ++s) {
      auto iv = subject_corruption(input, noise_scale, seed + static_cast<std::uint64_t>(s));
      for (const auto& site : restore) iv.push_back(Intervention<float>::replace_with(site, clean.at(site)));
      sum += probability_from_logits(forward_with<float>(model, seq, iv, {}).logits, input);
    }
    return sum / n_samples;
  }
};

Tracer make_tracer(const ModelF& model, const CmaInput& input, const std::vector<Site>& needed, double noise_scale,
                   int n_samples, std::uint64_t seed) {
  Tracer t{model, input, scored_sequence(input), {}, noise_scale, n_samples, seed};
  t.clean = forward_with<float>(model, t.seq, {}, needed).captured;
  return t;
}

}  // namespace

double restored_probability(const ModelF& model, const CmaInput& input, const std::vector<Site>& restore,
                            double noise_scale, int n_samples, std::uint64_t seed) {
  check_input(model, input);
  if (n_samples < 1) throw ValidationError("cma.n_samples: must be >= 1");
  return make_tracer(model, input, restore, noise_scale, n_samples, seed).restored(restore);
}

CmaReport run_cma(const ModelF& model, const CmaInput& input, const CmaOptions& options) {
  check_input(model, input);
  if (options.n_samples < 1) throw ValidationError("cma.n_samples: must be >= 1");
  const double nu = options.noise_scale < 0 ? 3.0 * embedding_std(model) : options.noise_scale;
  if (!std::isfinite(nu)) throw ValidationError("cma.noise_scale: not finite");

  const int layers = model.config.n_layers;
  const int tokens = static_cast<int>(input.prompt.size());
  std::vector<Site> all;
  for (SiteKind kind : options.sites)
    for (int l = 0; l < layers; ++l)
      for (int t = 0; t < tokens; ++t) all.push_back({l, t, kind});
  const Tracer tracer = make_tracer(model, input, all, nu, options.n_samples, options.seed);

  CmaReport r;
  r.record_id = input.record_id;
  r.noise_scale = nu;
  r.n_samples = options.n_samples;
  r.p_clean = target_probability(model, input, {});
  r.p_corrupt = tracer.restored({});
  for (SiteKind kind : options.sites) r.grids[kind] = MatrixD::Zero(layers, tokens);

  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < all.size(); i = next++) {
      const Site& s = all[i];
      r.grids.at(s.kind)(s.layer, s.token) = tracer.restored({s}) - r.p_corrupt;
    }
  };
  const int workers = std::clamp<int>(options.threads, 1, static_cast<int>(std::max<std::size_t>(all.size(), 1)));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
  }
  return r;
}

void write_cma_csv(const CmaReport& report, std::ostream& out) {
  out << "site,layer,token,IE\n";
  const auto old = out.precision(10);
  for (const auto& [kind, grid] : report.grids)
    for (Eigen::Index l = 0; l < grid.rows(); ++l)
      for (Eigen::Index t = 0; t < grid.cols(); ++t) out << to_string(kind) << ',' << l << ',' << t << ',' << grid(l, t) << '\n';
  out.precision(old);
}

int peak_layer(const CmaReport& report, SiteKind kind) {
  const auto it = report.grids.find(kind);
  if (it == report.grids.end()) throw ValidationError("cma: no grid for site kind");
  Eigen::Index best = 0;
  double best_v = -INFINITY;
  for (Eigen::Index l = 0; l < it->second.rows(); ++l) {
    const double v = it->second.row(l).maxCoeff();
    if (v > best_v) best_v = v, best = l;
  }
  return static_cast<int>(best);
}

}  // namespace wilke
