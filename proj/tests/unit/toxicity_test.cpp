#include "doctest.h"
#include "support.hpp"

#include "wilke/toxicity.hpp"

#include <sstream>

using namespace wilke;

namespace {

std::vector<CaseOutcome> outcomes(const std::vector<double>& updates, const std::vector<double>& rates) {
  std::vector<CaseOutcome> out;
  for (std::size_t i = 0; i < updates.size(); ++i) out.push_back({static_cast<std::int64_t>(i), updates[i], rates[i]});
  return out;
}

}  // namespace

TEST_CASE("flash split needs both a failed rollback and a large update") {
  const auto s = flash_split(outcomes({1, 1.2, 0.9, 20, 1.1, 30, 1, 0.05}, {1, 1, 1, 0, 1, 0.5, 0, 0}), 5.0);
  CHECK(s.flash == std::vector<std::int64_t>{3});
  CHECK(s.buildup.size() == 7);
  CHECK(s.verdicts[3].update_norm_ratio == doctest::Approx(20.0 / 1.1));
  CHECK_FALSE(s.verdicts[5].flagged);  // large update, rollback half works
  CHECK_FALSE(s.verdicts[7].flagged);  // failed rollback, ordinary update
}

TEST_CASE("flash split uses the median of updates seen so far") {
  // The same 10x update is a flash early in the run and ordinary once large updates dominate.
  const auto s = flash_split(outcomes({1, 1, 10, 50, 60, 70, 10}, {1, 1, 0, 1, 1, 1, 0}), 5.0);
  CHECK(s.verdicts[2].flagged);
  CHECK_FALSE(s.verdicts[6].flagged);
  CHECK(s.verdicts[6].update_norm_ratio == doctest::Approx(1.0));
}

TEST_CASE("flash split validates its inputs") {
  CHECK_THROWS_AS(flash_split(outcomes({1}, {1}), 0.0), ValidationError);
  CHECK_THROWS_WITH_AS(flash_split(outcomes({1}, {-1}), 5.0), doctest::Contains("rollback"), ValidationError);
  CHECK(flash_split({}, 5.0).verdicts.empty());
}

TEST_CASE("toxicity of an untouched model is zero") {
  const ModelF m = ModelF::random(test::small_config(3, 16, 2, 32), 2);
  for (const auto& t : toxicity_of(m, m)) {
    CHECK(t.norm == 0.0);
    CHECK(t.baseline_norm == doctest::Approx(m.blocks[t.layer].proj_w.cast<double>().norm()));
  }
}

TEST_CASE("trace accumulates per-layer deltas at checkpoints") {
  const ModelF m0 = ModelF::random(test::small_config(2, 16, 2, 32), 2);
  ToxicityTrace trace(m0, {2, 3});
  ModelF m = m0;
  for (int step = 1; step <= 3; ++step) {
    m.blocks[1].proj_w(0, 0) += 1.0f;
    trace.record(m, step, 1, 1.0);
  }
  CHECK(trace.recorded_checkpoints() == std::vector<int>{2, 3});
  CHECK(trace.delta_at(2, 1)(0, 0) == doctest::Approx(2.0));
  CHECK(trace.delta_at(3, 1).cwiseAbs().sum() == doctest::Approx(3.0));
  CHECK(trace.delta_at(3, 0).cwiseAbs().sum() == 0.0);
  CHECK(trace.norms_at(0) == trace.baseline());
  CHECK_THROWS(trace.record(m, 7));

  std::ostringstream csv;
  trace.write_csv(csv);
  CHECK(csv.str().rfind("step,layer,frobenius_norm,baseline_norm\n", 0) == 0);
}

TEST_CASE("pooling keeps the total mass") {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n01;
  const MatrixF w = MatrixF::NullaryExpr(200, 70, [&](Eigen::Index, Eigen::Index) { return n01(rng); });
  const PooledGrid g = pool_abs(w, 64);
  CHECK(g.rows == 64);
  CHECK(g.cols == 64);
  CHECK(g.total() == doctest::Approx(w.cwiseAbs().cast<double>().sum()).epsilon(1e-6));
}
