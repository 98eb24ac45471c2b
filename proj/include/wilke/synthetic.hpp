#pragma once

#include "wilke/harness.hpp"
#include "wilke/selector.hpp"

#include <set>
#include <string>
#include <vector>

namespace wilke {

/// Knobs for an untrained model whose "known facts" are its own predictions.
struct SyntheticSpec {
  std::uint64_t seed = 0;
  int n_facts = 64;
  int n_layers = 4;
  int d_model = 64;
  int d_mlp = 256;
  double init_std = 0.1;
  double object_boost = 3.0;       // unembedding gain on object tokens
  std::vector<double> fc_scale;    // per layer gain on W_fc and b_fc; empty = 1
  std::vector<double> proj_scale;  // per layer gain on W_proj; empty = 1
  std::vector<double> fc_shift;    // per layer offset added to b_fc; empty = 0
  int n_flash = 0;                 // facts whose key at flash_layer is suppressed
  int flash_layer = 1;
  double flash_depth = 4.0;        // flash neurons pre-activate at -flash_depth
  double context_depth = 2.0;      // context tokens near gelu(-context_depth)
  std::string prompt_suffix;       // appended to every template, e.g. " is"
  double route_gain = 0;           // > 0: a head after flash_layer copies the subject forward

  void validate() const;
};

struct SyntheticLab {
  ModelF model;
  Tokenizer tokenizer;
  std::vector<KnowledgeRecord> records;  // one fact per subject, all known
  std::set<std::int64_t> flash_ids;
};

/// Random GPT-2 style model plus CounterFact-style records read off its own
/// greedy predictions. With n_flash > 0, two reserved residual coordinates
/// steer flash_layer's keys: a flash subject's key lives on a few dedicated
/// neurons at about gelu(-flash_depth), so its norm is ~1e-4 of a normal key;
/// other subjects never touch those neurons, while context tokens respond
/// more strongly than the flash key and so absorb most of a flash update.
/// With route_gain > 0, head 0 of the layer after flash_layer attends to the
/// subject from every later position, so a prompt_suffix token still reads
/// the subject's edited state.
SyntheticLab make_synthetic(const SyntheticSpec& spec);

/// 16 facts; one layer with full-scale W_fc, the rest scaled by 1e-3.
SyntheticSpec planted_pattern_spec(std::uint64_t seed, int planted_layer, int n_layers = 4);

/// The flash construction: n_flash planted facts among n_facts, prompts that
/// end one token after the subject, and a routing head after flash_layer.
SyntheticSpec flash_spec(std::uint64_t seed, int n_flash = 3, int n_facts = 64);

/// A model on which the given ablation picks a different layer than WilKE,
/// built by tilting per-layer activation and W_proj scales.
SyntheticSpec adversarial_spec(AblationKind kind, std::uint64_t seed);

}  // namespace wilke
