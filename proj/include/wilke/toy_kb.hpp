#pragma once

#include "wilke/harness.hpp"

#include <string>
#include <vector>

namespace wilke {

struct ToyRelation {
  std::string id;
  std::vector<std::string> templates;  // first is the edit prompt, the rest paraphrases
  std::vector<std::string> objects;
};

struct Fact {
  std::string subject;
  int relation = 0;
  std::string object;
};

/// Synthetic knowledge base: four-letter lowercase subjects, single
/// capital-letter objects. Every template ends in the subject, so the last
/// subject token is also the position that predicts the object. Every (relation, object) pair is
/// shared by several subjects so each fact has neighborhood prompts.
struct ToyKb {
  std::vector<ToyRelation> relations;
  std::vector<Fact> facts;
  std::vector<Fact> held_out;  // disjoint subjects and objects, never trained

  /// CounterFact-style records. target_new is another object of the same
  /// relation chosen with `seed`; case ids follow fact order.
  std::vector<KnowledgeRecord> records(std::uint64_t seed = 0) const;
  std::vector<KnowledgeRecord> held_out_records(std::uint64_t seed = 0) const;
};

/// n_facts / 4 subjects with one fact in each of the 4 relations, plus
/// n_held_out / 4 held-out subjects with held-out objects.
ToyKb make_toy_kb(std::uint64_t seed, int n_facts = 64, int n_held_out = 16);

/// BPE vocabulary in which every word of the knowledge base, held-out facts
/// included, is a single token. Subjects therefore occupy exactly one position.
Tokenizer toy_tokenizer(const ToyKb& kb);

/// Default 4-layer d=64 model sized for `tok`.
ModelConfig toy_model_config(const Tokenizer& tok);

struct TrainConfig {
  std::uint64_t seed = 0;
  int max_epochs = 600;
  int batch = 16;
  double learning_rate = 3e-3;
  double init_std = 0.02;
  int check_every = 5;       // epochs between memorization checks
  double context_prob = 0.5; // chance an example follows another fact sentence
  double target_loss = 0.05; // mean epoch NLL required on top of exact recall
};

struct TrainReport {
  int epochs = 0;
  double final_loss = 0;
  bool converged = false;
};

/// Trains until the model teacher-forces " <object>" after every template of
/// every fact and the epoch loss is below target_loss. Deterministic given the seed; throws NumericError on non-convergence.
ModelF train_toy_kb(const ModelConfig& config, const ToyKb& kb, const Tokenizer& tok, const TrainConfig& train = {},
                    TrainReport* report = nullptr);

/// Every (prompt, object) pair the trainer must memorize.
std::vector<std::pair<std::string, std::string>> training_pairs(const ToyKb& kb);

}  // namespace wilke
