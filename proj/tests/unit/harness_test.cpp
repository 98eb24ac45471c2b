#include "doctest.h"
#include "support.hpp"

#include "wilke/harness.hpp"
#include "wilke/synthetic.hpp"

#include <json.hpp>

#include <set>

using namespace wilke;

TEST_CASE("harmonic mean reproduces a published composite") {
  const auto s = harmonic_mean({15.8, 8.8, 6.8, 12.2, 7.9});
  REQUIRE(s);
  CHECK(std::abs(*s - 9.3) < 0.15);
}

TEST_CASE("any zero component forces the composite to zero") {
  CHECK(*harmonic_mean({0.0, 90.0, 80.0, 70.0, 60.0}) == 0.0);
  CHECK(*harmonic_mean({50.0, 90.0, 80.0, 0.0, std::nullopt}) == 0.0);
}

TEST_CASE("missing components are skipped") {
  CHECK(*harmonic_mean({2.0, std::nullopt, 2.0}) == doctest::Approx(2.0));
  CHECK_FALSE(harmonic_mean({std::nullopt, std::nullopt}).has_value());
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.1, 100.0);
  for (int i = 0; i < 200; ++i) {
    const std::vector<std::optional<double>> v{u(rng), u(rng), u(rng), u(rng), u(rng)};
    const double h = *harmonic_mean(v);
    double lo = 1e300, hi = 0;
    for (const auto& x : v) lo = std::min(lo, *x), hi = std::max(hi, *x);
    CHECK(h >= lo - 1e-9);
    CHECK(h <= hi + 1e-9);
  }
}

TEST_CASE("P/Q split is a deterministic partition") {
  std::vector<KnowledgeRecord> recs(40);
  for (int i = 0; i < 40; ++i) recs[i].case_id = 100 + i;
  const auto [p, q] = split_pq(recs, 0.25, 7);
  CHECK(p.size() == 10);
  CHECK(q.size() == 30);
  std::set<std::int64_t> ids;
  for (const auto& r : p) ids.insert(r.case_id);
  for (const auto& r : q) ids.insert(r.case_id);
  CHECK(ids.size() == 40);

  std::vector<KnowledgeRecord> reversed(recs.rbegin(), recs.rend());
  const auto [p2, q2] = split_pq(reversed, 0.25, 7);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i].case_id == p2[i].case_id);
  CHECK_THROWS_AS(split_pq(recs, 1.5, 0), ValidationError);
}

TEST_CASE("metrics with an empty Q leave ORS undefined") {
  MetricInputs in;
  for (int i = 0; i < 4; ++i) {
    StepLog s;
    s.es = i != 0;
    s.gs_hits = 1;
    s.gs_total = 2;
    s.ls_hits = 2;
    s.ls_total = 2;
    in.steps.push_back(s);
    in.ers_hits.push_back(true);
  }
  const MetricsReport m = compute_metrics(in, 50, 1);
  CHECK(*m.es.value == doctest::Approx(0.75));
  CHECK(*m.gs.value == doctest::Approx(0.5));
  CHECK(*m.ls.value == doctest::Approx(1.0));
  CHECK(*m.ers.value == doctest::Approx(1.0));
  CHECK_FALSE(m.ors.value.has_value());
  CHECK(*m.s.value == doctest::Approx(*harmonic_mean({0.75, 0.5, 1.0, 1.0})));
  CHECK(m.es.ci95 > 0);
  const auto j = nlohmann::json::parse(report_json(m, "abc"));
  CHECK(j.contains("config_hash"));
}

TEST_CASE("run config validation and canonical form") {
  RunConfig c;
  CHECK_NOTHROW(c.validate());
  RunConfig d = c;
  d.seed = 1;
  CHECK(c.canonical() != d.canonical());
  c.p_fraction = -0.1;
  CHECK_THROWS_AS(c.validate(), ValidationError);
}

TEST_CASE("screening leaves the initial model alone and is order-stable") {
  SyntheticSpec spec;
  spec.seed = 2;
  spec.n_facts = 6;
  const auto lab = make_synthetic(spec);
  RunConfig cfg;
  cfg.policy = LayerPolicy::fixed(1);
  const auto one = screen_cases(lab.model, lab.tokenizer, lab.records, cfg);
  cfg.threads = 3;
  const auto three = screen_cases(lab.model, lab.tokenizer, lab.records, cfg);
  REQUIRE(one.size() == lab.records.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    CHECK(one[i].case_id == lab.records[i].case_id);
    CHECK(one[i].edit.update_frobenius == three[i].edit.update_frobenius);
    CHECK(one[i].rollback_success_rate == three[i].rollback_success_rate);
  }
}
