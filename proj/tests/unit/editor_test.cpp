#include "doctest.h"
#include "support.hpp"

#include "wilke/editor.hpp"
#include "wilke/synthetic.hpp"
#include "wilke/toxicity.hpp"

using namespace wilke;

namespace {

const SyntheticLab& small_lab() {
  static const SyntheticLab lab = [] {
    SyntheticSpec s;
    s.seed = 4;
    s.n_facts = 8;
    return make_synthetic(s);
  }();
  return lab;
}

}  // namespace

TEST_CASE("rank-one update hits the key exactly and nothing orthogonal") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 200; ++trial) {
    const int d_mlp = 8 + static_cast<int>(rng() % 120), d_model = 8 + static_cast<int>(rng() % 120);
    const MatrixD w = MatrixD::NullaryExpr(d_mlp, d_model, [&](Eigen::Index, Eigen::Index) { return n01(rng); });
    VectorD k = VectorD::NullaryExpr(d_mlp, [&](Eigen::Index) { return n01(rng); });
    const VectorD delta = VectorD::NullaryExpr(d_model, [&](Eigen::Index) { return n01(rng); });
    const MatrixD w2 = apply_rank_one(w, k, delta);

    const VectorD moved = w2.transpose() * k - w.transpose() * k;
    CHECK((moved - delta).norm() / delta.norm() < 1e-10);
    CHECK(test::rel_err((w2 - w).norm(), delta.norm() / k.norm()) < 1e-12);

    VectorD u = VectorD::NullaryExpr(d_mlp, [&](Eigen::Index) { return n01(rng); });
    u -= (u.dot(k) / k.squaredNorm()) * k;
    CHECK((w2.transpose() * u - w.transpose() * u).norm() < 1e-10 * u.norm() * delta.norm() / k.norm());
  }
}

TEST_CASE("rows outside the key's support are untouched bit for bit") {
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n01;
  MatrixF w = MatrixF::NullaryExpr(32, 16, [&](Eigen::Index, Eigen::Index) { return n01(rng); });
  VectorF k = VectorF::Zero(32);
  k.head(10) = VectorF::NullaryExpr(10, [&](Eigen::Index) { return n01(rng); });
  const VectorF delta = VectorF::NullaryExpr(16, [&](Eigen::Index) { return n01(rng); });
  const MatrixF w2 = apply_rank_one(w, k, delta);
  CHECK(w2.bottomRows(22) == w.bottomRows(22));
  VectorF u = VectorF::Zero(32);
  u.tail(22).setOnes();
  CHECK(w2.transpose() * u == w.transpose() * u);
}

TEST_CASE("degenerate keys and shapes are refused") {
  const MatrixF w = MatrixF::Ones(4, 3);
  CHECK_THROWS_WITH_AS(apply_rank_one<float>(w, VectorF::Zero(4), VectorF::Ones(3)), doctest::Contains("zero key"),
                       ValidationError);
  CHECK_THROWS_AS(apply_rank_one<float>(w, VectorF::Ones(3), VectorF::Ones(3)), ValidationError);
}

TEST_CASE("subject filling and targets") {
  CHECK(fill_subject("The mother tongue of {} is", "X") == "The mother tongue of X is");
  CHECK_THROWS_AS(fill_subject("no slot", "X"), ValidationError);
  CHECK_THROWS_AS(fill_subject("{} and {}", "X"), ValidationError);
  const Tokenizer bytes;
  CHECK(target_tokens(bytes, "Ab") == Tokens{' ', 'A', 'b'});
  const PromptContext c = subject_context(bytes, "In {} x", "Paris");
  CHECK(c.subject_begin == 2);
  CHECK(c.subject_pos == 7);
}

TEST_CASE("layer policies round-trip through text") {
  for (const std::string s : {"wilke", "fixed:2", "ablate:delta", "ablate:act", "ablate:norm"})
    CHECK(LayerPolicy::parse(s).to_string() == s);
  CHECK_THROWS_AS(LayerPolicy::parse("fixed:"), ValidationError);
  CHECK_THROWS_AS(LayerPolicy::parse("best"), ValidationError);
}

TEST_CASE("edit receipt arithmetic") {
  const auto& lab = small_lab();
  const EditEnv env = make_env(lab.model, lab.tokenizer, DeltaOptConfig{});
  ModelF m = lab.model;
  const auto req = lab.records[0].request();
  const EditReceipt r = edit(m, req, LayerPolicy::fixed(1), env);
  CHECK(r.layer == 1);
  CHECK(test::rel_err(r.update_frobenius, r.delta_norm / r.key_norm) < 1e-6);
  CHECK(test::rel_err((m.blocks[1].proj_w - lab.model.blocks[1].proj_w).cast<double>().norm(), r.update_frobenius) < 1e-3);
  for (int l : {0, 2, 3}) CHECK(m.blocks[l].proj_w == lab.model.blocks[l].proj_w);
  CHECK(r.post_loss < r.pre_loss);
}

TEST_CASE("oracle rollback restores the weights") {
  const auto& lab = small_lab();
  const EditEnv env = make_env(lab.model, lab.tokenizer, DeltaOptConfig{});
  for (int layer = 0; layer < 4; ++layer) {
    ModelF m = lab.model;
    const auto req = lab.records[1].request();
    const EditReceipt e = edit(m, req, LayerPolicy::fixed(layer), env);
    const EditReceipt rb = rollback(m, req, e, env, RollbackMode::oracle);
    CHECK(rb.layer == layer);
    const auto tox = toxicity_of(lab.model, m);
    CHECK(tox[layer].norm < 1e-5 * tox[layer].baseline_norm);
    CHECK(*rb.rollback_success);
  }
}

TEST_CASE("prefix contexts are sampled once per environment") {
  const auto& lab = small_lab();
  DeltaOptConfig cfg;
  cfg.seed = 3;
  const EditEnv a = make_env(lab.model, lab.tokenizer, cfg), b = make_env(lab.model, lab.tokenizer, cfg);
  CHECK(a.prefixes == b.prefixes);
  CHECK(static_cast<int>(a.prefixes.size()) == cfg.n_prefixes);
  const auto ctx = edit_contexts(a, lab.records[0].request());
  CHECK(ctx.size() == a.prefixes.size() + 1);
  const int sep = static_cast<int>(lab.tokenizer.encode(". ").size());
  for (std::size_t i = 1; i < ctx.size(); ++i)
    CHECK(ctx[i].subject_pos == ctx[0].subject_pos + static_cast<int>(a.prefixes[i - 1].size()) + sep);
}

TEST_CASE("optimizer config validation") {
  DeltaOptConfig c;
  c.steps = 0;
  CHECK_THROWS_AS(c.validate(), ValidationError);
  c = {};
  c.prefix_len_min = 5;
  c.prefix_len_max = 2;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}
