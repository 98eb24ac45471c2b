#include "doctest.h"
#include "support.hpp"

#include "wilke/synthetic.hpp"

using namespace wilke;

TEST_CASE("every synthetic record is a known fact") {
  SyntheticSpec s;
  s.seed = 9;
  s.n_facts = 12;
  const auto lab = make_synthetic(s);
  CHECK(lab.records.size() == 12);
  CHECK(filter_known(lab.model, lab.tokenizer, lab.records).size() == 12);
  std::size_t neighbors = 0;
  for (const auto& r : lab.records) {
    CHECK(r.target_new != r.target_true);
    CHECK_FALSE(r.paraphrase_prompts.empty());
    neighbors += r.neighborhood_prompts.size();
  }
  CHECK(neighbors > 0);
}

TEST_CASE("flash subjects have keys orders of magnitude below the rest") {
  const SyntheticSpec spec = flash_spec(1, 3, 16);
  const auto lab = make_synthetic(spec);
  REQUIRE(lab.flash_ids.size() == 3);
  const EditEnv env = make_env(lab.model, lab.tokenizer, DeltaOptConfig{});
  double flash_max = 0, normal_min = 1e300;
  for (const auto& r : lab.records) {
    const double k = compute_key(lab.model, spec.flash_layer, r.request(), env).norm();
    if (lab.flash_ids.count(r.case_id))
      flash_max = std::max(flash_max, k);
    else
      normal_min = std::min(normal_min, k);
  }
  CHECK(flash_max > 0);
  CHECK(flash_max < 1e-2 * normal_min);
}

TEST_CASE("construction is deterministic in the seed") {
  const auto a = make_synthetic(flash_spec(3, 3, 8)), b = make_synthetic(flash_spec(3, 3, 8));
  CHECK(a.flash_ids == b.flash_ids);
  CHECK(a.model.blocks[1].fc_w == b.model.blocks[1].fc_w);
  CHECK(a.records[0].target_new == b.records[0].target_new);
}

TEST_CASE("spec validation") {
  SyntheticSpec s;
  s.fc_scale = {1, 2};
  CHECK_THROWS_AS(make_synthetic(s), ValidationError);
  s = {};
  s.route_gain = 4;
  s.flash_layer = 3;
  CHECK_THROWS_AS(make_synthetic(s), ValidationError);
}
