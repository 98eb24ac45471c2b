#include "doctest.h"
#include "support.hpp"

#include "wilke/model.hpp"
#include "wilke/tensor_io.hpp"

#include <json.hpp>

#include <fstream>

using namespace wilke;

namespace {

nlohmann::json oracles() {
  std::ifstream in(test::data_dir() / "oracles.json");
  return nlohmann::json::parse(in);
}

double central_difference(const ModelD& m, const Tokens& toks, const Site& site, int coord,
                          const LogitLoss<double>& loss, double eps) {
  auto eval = [&](double step) {
    VectorD bump = VectorD::Zero(m.config.d_model);
    bump(coord) = step;
    const auto r = forward_with(m, toks, {Intervention<double>::add(site, bump)}, {});
    MatrixD d = MatrixD::Zero(r.logits.rows(), r.logits.cols());
    return loss(r.logits, d);
  };
  return (eval(eps) - eval(-eps)) / (2 * eps);
}

}  // namespace

TEST_CASE("forward matches the numpy reference on the fixture model") {
  const auto j = oracles();
  const Tokens toks = j["tokens"].get<Tokens>();
  const auto want = j["logits"].get<std::vector<std::vector<double>>>();
  const ModelF mf = load_weights(test::data_dir() / "tiny_model.st").model;

  const MatrixF lf = forward(mf, toks);
  const MatrixD ld = forward(mf.cast<double>(), toks);
  REQUIRE(lf.rows() == static_cast<int>(want.size()));
  for (int t = 0; t < lf.rows(); ++t) {
    for (int v = 0; v < lf.cols(); ++v) {
      CHECK(ld(t, v) == doctest::Approx(want[t][v]).epsilon(1e-9));
      CHECK(std::abs(lf(t, v) - want[t][v]) < 1e-4);
    }
  }
}

TEST_CASE("later tokens never change earlier logits") {
  const ModelD m = ModelD::random(test::small_config(), 3, 0.1);
  std::mt19937_64 rng(11);
  const Tokens a = test::random_tokens(rng, 10, 256);
  Tokens b = a;
  b[7] = (b[7] + 1) % 256;
  b[9] = (b[9] + 5) % 256;
  const MatrixD la = forward(m, a), lb = forward(m, b);
  CHECK((la.topRows(7) - lb.topRows(7)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((la.row(7) - lb.row(7)).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("interventions") {
  const ModelD m = ModelD::random(test::small_config(), 5, 0.1);
  std::mt19937_64 rng(2);
  const Tokens toks = test::random_tokens(rng, 8, 256);
  const MatrixD clean = forward(m, toks);

  SUBCASE("adding zero is the identity") {
    const Site s{1, 3, SiteKind::mlp_out};
    const auto r = forward_with(m, toks, {Intervention<double>::add(s, VectorD::Zero(32))}, {s});
    CHECK((r.logits - clean).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("replacing a state with its captured value is the identity") {
    const Site s{0, 4, SiteKind::hidden_state};
    const auto cap = forward_with(m, toks, {}, {s});
    const auto r = forward_with(m, toks, {Intervention<double>::replace_with(s, cap.captured.at(s))}, {});
    CHECK((r.logits - clean).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("corruption noise is a pure function of seed and token") {
    const VectorD a = corruption_noise<double>(7, 2, 32), b = corruption_noise<double>(7, 2, 32);
    const VectorD c = corruption_noise<double>(7, 3, 32);
    CHECK(a == b);
    CHECK(a != c);
  }
}

TEST_CASE("grad_at_site agrees with central differences") {
  // 20 random cases on a 2-layer d=32 model, double precision throughout.
  const ModelD m = ModelD::random(test::small_config(2, 32, 4, 64), 17, 0.2);
  std::mt19937_64 rng(99);
  const SiteKind kinds[] = {SiteKind::hidden_state, SiteKind::mlp_out};
  double worst = 0;
  for (int c = 0; c < 20; ++c) {
    const int n = 4 + static_cast<int>(rng() % 6);
    const Tokens toks = test::random_tokens(rng, n, 64);
    const Site site{static_cast<int>(rng() % 2), static_cast<int>(rng() % (n - 1)), kinds[c % 2]};
    LogitLoss<double> loss;
    if (c % 4 < 2) {
      loss = nll_loss<double>({n - 1, n - 2}, {toks[0], toks[1]});
    } else {
      MatrixD cot = MatrixD::NullaryExpr(n, 64, [&](Eigen::Index, Eigen::Index) {
        return std::normal_distribution<double>()(rng);
      });
      loss = linear_loss<double>(cot);
    }
    const VectorD g = grad_at_site(m, toks, site, loss);
    for (int i = 0; i < g.size(); ++i) {
      const double fd = central_difference(m, toks, site, i, loss, 1e-5);
      const double denom = std::max({std::abs(fd), std::abs(g(i)), 1e-6});
      worst = std::max(worst, std::abs(fd - g(i)) / denom);
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("replacement gradient matches the clean gradient at the clean value") {
  const ModelD m = ModelD::random(test::small_config(), 21, 0.1);
  std::mt19937_64 rng(4);
  const Tokens toks = test::random_tokens(rng, 6, 256);
  const Site s{1, 2, SiteKind::mlp_out};
  const auto loss = nll_loss<double>({5}, {toks[1]});
  const auto cap = forward_with(m, toks, {}, {s});
  const auto [value, g_rep] = loss_and_grad_with_replacement(m, toks, s, cap.captured.at(s), loss);
  const VectorD g = grad_at_site(m, toks, s, loss);
  CHECK((g - g_rep).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(std::isfinite(value));
}

TEST_CASE("config validation names the field") {
  ModelConfig c = test::small_config();
  c.n_heads = 5;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("n_heads"), ValidationError);
}
