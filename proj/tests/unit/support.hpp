#pragma once

#include "wilke/model.hpp"

#include <filesystem>
#include <random>

namespace wilke::test {

inline std::filesystem::path data_dir() { return WILKE_TEST_DATA; }

inline ModelConfig small_config(int layers = 2, int d = 32, int heads = 4, int vocab = 256) {
  ModelConfig c;
  c.n_layers = layers;
  c.d_model = d;
  c.d_mlp = 4 * d;
  c.n_heads = heads;
  c.vocab_size = vocab;
  c.max_seq = 32;
  return c;
}

inline Tokens random_tokens(std::mt19937_64& rng, int n, int vocab) {
  std::uniform_int_distribution<int> pick(0, vocab - 1);
  Tokens t(n);
  for (auto& x : t) x = pick(rng);
  return t;
}

inline double rel_err(double got, double want) { return std::abs(got - want) / std::max(std::abs(want), 1e-12); }

}  // namespace wilke::test
