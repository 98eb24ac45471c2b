#include "doctest.h"
#include "support.hpp"

#include "wilke/selector.hpp"
#include "wilke/synthetic.hpp"

#include <sstream>

using namespace wilke;

TEST_CASE("wise layer is the argmin of delta over norm times activation") {
  const auto p = make_profile({1.0, 4.0, 2.0}, {2.0, 2.0, 2.0}, {1.0, 1.0, 1.0});
  CHECK(p.layers[0].score == doctest::Approx(2.0));
  CHECK(p.layers[1].score == doctest::Approx(0.5));
  CHECK(wise_layer(p) == 1);
  CHECK(select_layer(p, LayerPolicy::fixed(2)) == 2);
}

TEST_CASE("ties go to the earlier layer") {
  const auto p = make_profile({2.0, 1.0, 2.0}, {1.0, 0.5, 1.0}, {1.0, 1.0, 1.0});
  CHECK(wise_layer(p) == 0);
}

TEST_CASE("silent layers are never chosen") {
  const auto p = make_profile({0.0, 1e-12, 3.0}, {1e-9, 1e-9, 10.0}, {1.0, 1.0, 1.0});
  CHECK_FALSE(p.layers[0].valid);
  CHECK_FALSE(p.layers[1].valid);
  CHECK(wise_layer(p) == 2);
  CHECK_THROWS_AS(wise_layer(make_profile({0.0, 0.0}, {1.0, 1.0}, {1.0, 1.0})), ValidationError);
}

TEST_CASE("the choice is invariant to a common rescaling of any factor") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.01, 10.0);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> a(6), d(6), w(6);
    for (int l = 0; l < 6; ++l) a[l] = u(rng), d[l] = u(rng), w[l] = u(rng);
    const int base = wise_layer(make_profile(a, d, w));
    const double c = u(rng);
    auto scaled = [c](std::vector<double> v) {
      for (auto& x : v) x *= c;
      return v;
    };
    CHECK(wise_layer(make_profile(scaled(a), d, w)) == base);
    CHECK(wise_layer(make_profile(a, scaled(d), w)) == base);
    CHECK(wise_layer(make_profile(a, d, scaled(w))) == base);
  }
}

TEST_CASE("ablation scores drop one factor each") {
  const auto p = make_profile({1.0, 3.0, 2.0}, {1.0, 6.0, 1.0}, {1.0, 1.0, 4.0});
  CHECK(select_layer(p, ablation_policy(AblationKind::no_delta)) == 1);        // largest activation
  CHECK(select_layer(p, ablation_policy(AblationKind::no_activation)) == 2);   // smallest d / w
  CHECK(select_layer(p, ablation_policy(AblationKind::no_weight_norm)) == 2); // smallest d / a
  CHECK(select_layer(p, LayerPolicy::wilke()) == 2);
  const auto s = policy_scores(p, PolicyKind::no_weight_norm);
  for (int l = 0; l < 3; ++l) CHECK(s[l] == doctest::Approx(p.layers[l].score * p.layers[l].weight_norm));
}

TEST_CASE("weight norms") {
  MatrixF w = MatrixF::Zero(3, 2);
  w(0, 0) = 3;
  w(1, 1) = 4;
  CHECK(weight_norm(w) == doctest::Approx(5.0));
  CHECK(weight_norm(w, WeightNorm::spectral) == doctest::Approx(4.0).epsilon(1e-4));
}

TEST_CASE("planted pattern: the selector finds the only firing layer") {
  const auto lab = make_synthetic(planted_pattern_spec(1, 2));
  const EditEnv env = make_env(lab.model, lab.tokenizer, DeltaOptConfig{});
  const auto a = activation_profile(lab.model, lab.records[0].request(), env);
  for (int l : {0, 1, 3}) CHECK(a[2] > 100 * a[l]);
  const auto p = score_profile(lab.model, lab.records[0].request(), env);
  CHECK(p.chosen == 2);
  std::ostringstream csv;
  write_profile_csv(p, csv);
  CHECK(csv.str().rfind("layer,a_l,d_l,w_l,s_l,chosen\n", 0) == 0);
}
