#include "doctest.h"
#include "support.hpp"

#include "wilke/shared_model.hpp"

#include <thread>

using namespace wilke;

TEST_CASE("snapshots taken before a write keep the old weights") {
  SharedModel shared(ModelF::random(test::small_config(2, 16, 2, 32), 1));
  const auto before = shared.snapshot();
  const float old = before->blocks[0].proj_w(0, 0);
  const int step = shared.mutate([](ModelF& m) {
    m.blocks[0].proj_w(0, 0) += 1.0f;
    return 1;
  });
  CHECK(step == 1);
  CHECK(before->blocks[0].proj_w(0, 0) == old);
  CHECK(shared.snapshot()->blocks[0].proj_w(0, 0) == old + 1.0f);
}

TEST_CASE("readers racing writers see whole models only") {
  SharedModel shared(ModelF::zeros(test::small_config(1, 8, 2, 16)));
  std::atomic<bool> torn{false};
  {
    std::vector<std::jthread> readers;
    for (int r = 0; r < 3; ++r)
      readers.emplace_back([&] {
        for (int i = 0; i < 2000; ++i) {
          const auto s = shared.snapshot();
          const MatrixF& w = s->blocks[0].proj_w;
          if (w.maxCoeff() != w.minCoeff()) torn = true;
        }
      });
    for (int i = 0; i < 200; ++i) shared.mutate([](ModelF& m) { m.blocks[0].proj_w.array() += 1.0f; });
  }
  CHECK_FALSE(torn);
  CHECK(shared.snapshot()->blocks[0].proj_w(3, 3) == 200.0f);
}
