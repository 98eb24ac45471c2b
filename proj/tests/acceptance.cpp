// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Slow criteria reuse a trained toy model cached under --cache.

#include "wilke/cma.hpp"
#include "wilke/harness.hpp"
#include "wilke/selector.hpp"
#include "wilke/synthetic.hpp"
#include "wilke/tensor_io.hpp"
#include "wilke/toxicity.hpp"
#include "wilke/toy_kb.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <thread>

using namespace wilke;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Verdict()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int g_threads = 1;
fs::path g_cache;

// ---------------------------------------------------------------------------

Verdict rank_one_algebra() {
  std::mt19937_64 rng(20240101);
  std::normal_distribution<double> n01;
  std::uniform_int_distribution<int> dim(8, 256);
  double worst_hit = 0, worst_frob = 0, worst_orth = 0;
  bool exact = true;
  for (int trial = 0; trial < 1000; ++trial) {
    const int d_mlp = dim(rng), d_model = dim(rng);
    const MatrixD w = MatrixD::NullaryExpr(d_mlp, d_model, [&](Eigen::Index, Eigen::Index) { return n01(rng); });
    const VectorD k = VectorD::NullaryExpr(d_mlp, [&](Eigen::Index) { return n01(rng); });
    const VectorD delta = VectorD::NullaryExpr(d_model, [&](Eigen::Index) { return n01(rng); });
    const MatrixD w2 = apply_rank_one(w, k, delta);

    const VectorD moved = w2.transpose() * k - w.transpose() * k;
    worst_hit = std::max(worst_hit, (moved - delta).norm() / delta.norm());
    const double want = delta.norm() / k.norm();
    worst_frob = std::max(worst_frob, std::abs((w2 - w).norm() - want) / want);

    VectorD u = VectorD::NullaryExpr(d_mlp, [&](Eigen::Index) { return n01(rng); });
    u -= (u.dot(k) / k.squaredNorm()) * k;
    worst_orth = std::max(worst_orth, (w2.transpose() * u - w.transpose() * u).norm() / (u.norm() * want));

    // A key supported on part of the neurons leaves every other row, and so
    // every activation living on those rows, bit-for-bit unchanged.
    const int split = 1 + static_cast<int>(rng() % (d_mlp - 1));
    VectorF ks = VectorF::Zero(d_mlp);
    ks.head(split) = k.head(split).cast<float>();
    const MatrixF wf = w.cast<float>();
    const MatrixF wf2 = apply_rank_one<float>(wf, ks, delta.cast<float>());
    VectorF us = VectorF::Zero(d_mlp);
    us.tail(d_mlp - split) = u.tail(d_mlp - split).cast<float>();
    exact = exact && wf2.bottomRows(d_mlp - split) == wf.bottomRows(d_mlp - split) &&
            wf2.transpose() * us == wf.transpose() * us;
  }
  return {worst_hit < 1e-5 && worst_frob < 1e-6 && exact && worst_orth < 1e-10,
          fmt("1000 trials: max rel err k.dW vs delta %.2e, |dW|_F vs |delta|/|k| %.2e, orthogonal leak %.2e, "
              "disjoint-support rows exact %s",
              worst_hit, worst_frob, worst_orth, exact ? "yes" : "no")};
}

Verdict gradient_oracle() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.d_mlp = 128;
  c.n_heads = 4;
  c.vocab_size = 64;
  c.max_seq = 16;
  const ModelD m = ModelD::random(c, 7, 0.2);
  std::mt19937_64 rng(77);
  std::normal_distribution<double> n01;
  double worst = 0;
  for (int k = 0; k < 20; ++k) {
    const int n = 4 + static_cast<int>(rng() % 8);
    Tokens toks(n);
    for (auto& t : toks) t = static_cast<Token>(rng() % 64);
    const Site site{static_cast<int>(rng() % 2), static_cast<int>(rng() % (n - 1)),
                    k % 2 ? SiteKind::mlp_out : SiteKind::hidden_state};
    LogitLoss<double> loss;
    if (k % 4 < 2) {
      loss = nll_loss<double>({n - 1}, {toks[0]});
    } else {
      const MatrixD cot = MatrixD::NullaryExpr(n, 64, [&](Eigen::Index, Eigen::Index) { return n01(rng); });
      loss = linear_loss<double>(cot);
    }
    const VectorD g = grad_at_site(m, toks, site, loss);
    for (int i = 0; i < g.size(); ++i) {
      auto at = [&](double step) {
        VectorD bump = VectorD::Zero(32);
        bump(i) = step;
        const auto r = forward_with(m, toks, {Intervention<double>::add(site, bump)}, {});
        MatrixD d = MatrixD::Zero(r.logits.rows(), r.logits.cols());
        return loss(r.logits, d);
      };
      const double fd = (at(1e-5) - at(-1e-5)) / 2e-5;
      worst = std::max(worst, std::abs(fd - g(i)) / std::max({std::abs(fd), std::abs(g(i)), 1e-6}));
    }
  }
  return {worst < 1e-3, fmt("20 cases x 32 coordinates on a 2-layer d=32 model: max rel err %.2e", worst)};
}

Verdict oracle_rollback() {
  SyntheticSpec s;
  s.seed = 3;
  s.n_facts = 5;
  const auto lab = make_synthetic(s);
  const EditEnv env = make_env(lab.model, lab.tokenizer, DeltaOptConfig{});
  double worst_w = 0, worst_tox = 0;
  for (const auto& rec : lab.records) {
    for (int layer = 0; layer < s.n_layers; ++layer) {
      ModelF m = lab.model;
      const auto req = rec.request();
      const EditReceipt e = edit(m, req, LayerPolicy::fixed(layer), env);
      rollback(m, req, e, env, RollbackMode::oracle);
      const MatrixD w0 = lab.model.blocks[layer].proj_w.cast<double>();
      worst_w = std::max(worst_w, (m.blocks[layer].proj_w.cast<double>() - w0).norm() / w0.norm());
      for (const auto& t : toxicity_of(lab.model, m)) worst_tox = std::max(worst_tox, t.norm / t.baseline_norm);
    }
  }
  return {worst_w < 1e-5 && worst_tox < 1e-5,
          fmt("5 facts x 4 layers: max rel |W' - W|_F %.2e, max toxicity / baseline %.2e", worst_w, worst_tox)};
}

Verdict composite_metric() {
  const double s = *harmonic_mean({15.8, 8.8, 6.8, 12.2, 7.9});
  const double z = *harmonic_mean({0.0, 99.0, 60.0, 80.0, 70.0});
  return {std::abs(s - 9.3) <= 0.15 && z == 0.0, fmt("S(15.8, 8.8, 6.8, 12.2, 7.9) = %.3f; with a zero component S = %g", s, z)};
}

Verdict flash_mechanism() {
  int hits = 0;
  double min_ratio = 1e300;
  for (int seed = 0; seed < 50; ++seed) {
    const int planted = seed % 4, fixed = (planted + 1) % 4;
    const auto lab = make_synthetic(planted_pattern_spec(static_cast<std::uint64_t>(seed), planted));
    const EditEnv env = make_env(lab.model, lab.tokenizer, DeltaOptConfig{});
    const auto req = lab.records[0].request();
    const auto prof = score_profile(lab.model, req, env, WeightNorm::frobenius, g_threads);
    hits += prof.chosen == planted;
    ModelF a = lab.model, b = lab.model;
    const auto rw = edit_with_value(a, req, prof.chosen, prof.values[prof.chosen]->v_star, env, req.target_new);
    const auto rf = edit_with_value(b, req, fixed, prof.values[fixed]->v_star, env, req.target_new);
    min_ratio = std::min(min_ratio, rf.update_frobenius / rw.update_frobenius);
  }
  return {hits >= 48 && min_ratio >= 100,
          fmt("wise layer = planted layer in %d/50; min fixed/wilke update norm ratio %.3g", hits, min_ratio)};
}

Verdict flash_splitter() {
  const SyntheticSpec spec = flash_spec(0);
  const auto lab = make_synthetic(spec);
  RunConfig cfg;
  cfg.policy = LayerPolicy::fixed(spec.flash_layer);
  cfg.threads = g_threads;
  const auto steps = screen_cases(lab.model, lab.tokenizer, lab.records, cfg);
  const auto split = flash_split(case_outcomes(steps), 5.0);
  const std::set<std::int64_t> flagged(split.flash.begin(), split.flash.end());
  std::string ids;
  for (auto id : split.flash) ids += " " + std::to_string(id);
  std::string planted;
  for (auto id : lab.flash_ids) planted += " " + std::to_string(id);
  return {flagged == lab.flash_ids,
          fmt("%zu facts, planted {%s }, flagged {%s }", lab.records.size(), planted.c_str(), ids.c_str())};
}

struct ToyLab {
  ModelF model;
  Tokenizer tok;
  std::vector<KnowledgeRecord> known;
};

const ToyLab& toy_lab() {
  static const ToyLab lab = [] {
    const ToyKb kb = make_toy_kb(1);
    Tokenizer tok = toy_tokenizer(kb);
    const fs::path path = g_cache / "toy_kb1_seed1.st";
    ModelF m;
    if (fs::exists(path)) {
      m = load_weights(path).model;
    } else {
      TrainConfig tc;
      tc.seed = 1;
      m = train_toy_kb(toy_model_config(tok), kb, tok, tc);
      fs::create_directories(g_cache);
      save_weights(m, path);
    }
    auto known = filter_known(m, tok, kb.records(0));
    return ToyLab{std::move(m), std::move(tok), std::move(known)};
  }();
  return lab;
}

double lifelong_s(const ModelF& model, const Tokenizer& tok, const std::vector<KnowledgeRecord>& p, LayerPolicy policy,
                  std::uint64_t seed) {
  RunConfig cfg;
  cfg.policy = policy;
  cfg.seed = seed;
  cfg.order = EditOrder::shuffled;
  cfg.threads = g_threads;
  return run_lifelong(model, tok, p, {}, cfg).metrics.s.value.value_or(0.0);
}

Verdict lifelong_ordering() {
  const ToyLab& lab = toy_lab();
  bool ok = lab.known.size() == 64;
  std::string detail = fmt("%zu known facts; S wilke/fixed:1 by seed", lab.known.size());
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const double w = lifelong_s(lab.model, lab.tok, lab.known, LayerPolicy::wilke(), seed);
    const double f = lifelong_s(lab.model, lab.tok, lab.known, LayerPolicy::fixed(1), seed);
    ok = ok && w >= f;
    detail += fmt(" %.3f/%.3f", w, f);
  }
  detail += "; adversarial wilke/ablation";
  for (AblationKind kind : {AblationKind::no_delta, AblationKind::no_activation, AblationKind::no_weight_norm}) {
    const auto adv = make_synthetic(adversarial_spec(kind, 0));
    const LayerPolicy abl = ablation_policy(kind);
    const double w = lifelong_s(adv.model, adv.tokenizer, adv.records, LayerPolicy::wilke(), 0);
    const double a = lifelong_s(adv.model, adv.tokenizer, adv.records, abl, 0);
    ok = ok && a <= w;
    detail += fmt(" %s %.3f/%.3f", abl.to_string().c_str(), w, a);
  }
  return {ok, detail};
}

Verdict cma_identities() {
  SyntheticSpec s;
  s.seed = 5;
  s.n_facts = 10;
  const auto lab = make_synthetic(s);
  const ModelF& m = lab.model;
  double worst_zero = 0, worst_restore = 0;
  bool shapes = true;
  for (const auto& r : lab.records) {
    const PromptContext c = subject_context(lab.tokenizer, r.prompt, r.subject);
    const CmaInput in{std::to_string(r.case_id), c.tokens, c.subject_begin, c.subject_pos + 1,
                      target_tokens(lab.tokenizer, r.target_true)};
    CmaOptions zero;
    zero.noise_scale = 0;
    zero.n_samples = 2;
    zero.threads = g_threads;
    const CmaReport z = run_cma(m, in, zero);
    for (const auto& [kind, grid] : z.grids) worst_zero = std::max(worst_zero, grid.cwiseAbs().maxCoeff());

    std::vector<Site> last;
    const int n = static_cast<int>(in.prompt.size() + in.target.size()) - 1;
    for (int t = 0; t < n; ++t) last.push_back({m.config.n_layers - 1, t, SiteKind::hidden_state});
    const double p_clean = target_probability(m, in, {});
    worst_restore = std::max(worst_restore, std::abs(restored_probability(m, in, last, 3 * embedding_std(m), 4, 1) - p_clean));

    CmaOptions o;
    o.n_samples = 4;
    o.threads = g_threads;
    const CmaReport rep = run_cma(m, in, o);
    shapes = shapes && rep.grids.size() == 3;
    for (const auto& [kind, grid] : rep.grids)
      shapes = shapes && grid.rows() == m.config.n_layers && grid.cols() == static_cast<int>(in.prompt.size()) &&
               grid.minCoeff() >= -rep.p_corrupt - 1e-12 && grid.maxCoeff() <= 1 - rep.p_corrupt + 1e-12;
  }
  return {worst_zero == 0 && worst_restore < 1e-5 && shapes,
          fmt("10 records: max |IE| at nu=0 %.2e, max |p_restored - p_clean| %.2e, shapes and bounds %s", worst_zero,
              worst_restore, shapes ? "hold" : "violated")};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Verdict determinism() {
  const ToyLab& lab = toy_lab();
  const fs::path dir = g_cache / "determinism";
  fs::remove_all(dir);
  fs::create_directories(dir);
  RunConfig cfg;
  cfg.seed = 3;
  cfg.n_edits = 16;
  cfg.order = EditOrder::shuffled;
  cfg.threads = g_threads;
  const auto [p, q] = split_pq(lab.known, 0.5, cfg.seed);

  auto run = [&](const std::string& name, const RunConfig& c) {
    const auto r = run_lifelong(lab.model, lab.tok, p, q, c, dir / (name + ".jsonl"));
    return std::pair{report_json(r.metrics, "h"), serialize_weights(r.final_model)};
  };
  const auto a = run("a", cfg), b = run("b", cfg);
  RunConfig first = cfg;
  first.stop_after = 7;
  run("c", first);
  const auto c = run("c", cfg);

  const bool same_ab = a == b && slurp(dir / "a.jsonl") == slurp(dir / "b.jsonl");
  const bool same_ac = a == c && slurp(dir / "a.jsonl") == slurp(dir / "c.jsonl");
  return {same_ab && same_ac, fmt("16 edits, |P| = %zu, |Q| = %zu: repeat run identical %s, resumed after 7 identical %s",
                                   p.size(), q.size(), same_ab ? "yes" : "no", same_ac ? "yes" : "no")};
}

Verdict format_fidelity() {
  const fs::path path = g_cache / "round_trip.st";
  fs::create_directories(g_cache);
  ModelConfig cfg;
  cfg.vocab_size = 300;
  const ModelF m = ModelF::random(cfg, 10, 0.05);
  save_weights(m, path);
  const std::vector<std::uint8_t> bytes = serialize_weights(m);
  const bool bits = serialize_weights(load_weights(path).model) == bytes &&
                    slurp(path) == std::string(bytes.begin(), bytes.end());
  const auto recs = parse_records(darrieux_fixture());
  const bool fields = recs.size() == 1 && recs[0].prompt == "The mother tongue of {} is" &&
                      recs[0].subject == "Danielle Darrieux" && recs[0].target_new == "English" &&
                      recs[0].target_true == "French" && recs[0].relation_id == "P103";
  return {bits && fields, fmt("container round trip bitwise %s; fixture record fields %s", bits ? "exact" : "differs",
                              fields ? "exact" : "differ")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"WilKE acceptance checks"};
  std::vector<int> only;
  std::string cache = "acceptance_cache";
  g_threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  app.add_option("--only", only, "run just these criteria");
  app.add_option("--cache", cache, "directory for the trained toy model and run logs");
  app.add_option("--threads", g_threads, "worker threads")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  g_cache = cache;

  const std::vector<Criterion> criteria{
      {1, "rank-one algebra", 10, rank_one_algebra},
      {2, "gradient oracle", 30, gradient_oracle},
      {3, "oracle rollback", 10, oracle_rollback},
      {4, "composite metric", 1, composite_metric},
      {5, "flash mechanism", 300, flash_mechanism},
      {6, "flash splitter", 600, flash_splitter},
      {7, "lifelong ordering", 1800, lifelong_ordering},
      {8, "CMA identities", 300, cma_identities},
      {9, "protocol determinism", 1800, determinism},
      {10, "format fidelity", 60, format_fidelity},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_s;
    const bool pass = v.pass && in_time;
    failed += !pass;
    std::cout << "criterion " << c.id << " " << (pass ? "PASS" : "FAIL") << " " << c.name << ": " << v.detail
              << fmt(" (%.1fs of %.0fs%s)", secs, c.budget_s, in_time ? "" : ", over budget") << std::endl;
  }
  return failed ? 1 : 0;
}
