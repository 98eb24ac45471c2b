#pragma once

#include "wilke/editor.hpp"
#include "wilke/toxicity.hpp"

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace wilke {

struct KnowledgeRecord {
  std::int64_t case_id = 0;
  std::string prompt;  // "{}" marks the subject
  std::string subject;
  std::string target_true;
  std::string target_new;
  std::string relation_id;
  std::vector<std::string> paraphrase_prompts;
  std::vector<std::string> neighborhood_prompts;

  EditRequest request() const;
};

/// Accepts one JSON object per line or a single JSON array, CounterFact field naming.
std::vector<KnowledgeRecord> parse_records(const std::string& text);
std::vector<KnowledgeRecord> load_records(const std::filesystem::path& path);
std::string record_to_json(const KnowledgeRecord& rec);
void save_records(const std::vector<KnowledgeRecord>& records, const std::filesystem::path& path);

/// The "mother tongue of Danielle Darrieux" record, verbatim.
std::string darrieux_fixture();

/// Argmax token at each target position when `target` is teacher-forced after `prompt`.
Tokens teacher_forced_predictions(const ModelF& model, const Tokens& prompt, const Tokens& target);

/// Records whose prompt teacher-forces target_true correctly.
std::vector<KnowledgeRecord> filter_known(const ModelF& model, const Tokenizer& tok,
                                          const std::vector<KnowledgeRecord>& records);

/// Shuffles by case_id under `seed` and puts the first round(p_fraction * n) into P.
std::pair<std::vector<KnowledgeRecord>, std::vector<KnowledgeRecord>> split_pq(
    const std::vector<KnowledgeRecord>& records, double p_fraction, std::uint64_t seed);

enum class EditOrder { dataset, shuffled };

struct RunConfig {
  LayerPolicy policy = LayerPolicy::wilke();
  int n_edits = -1;  // -1 edits all of P
  double p_fraction = 0.5;
  std::uint64_t seed = 0;
  DeltaOptConfig delta;
  std::set<int> checkpoints = default_checkpoints();
  EditOrder order = EditOrder::dataset;
  bool oracle_values = false;  // rollback writes back the pre-edit value
  int threads = 1;
  int stop_after = -1;  // stop after this many steps (simulated interruption)
  int bootstrap = 1000;

  void validate() const;
  /// Stable key=value rendering used for hashing and the report.
  std::string canonical() const;
};

/// Per-edit bookkeeping for both stages.
struct StepLog {
  int step = 0;
  std::int64_t case_id = 0;
  EditReceipt edit;
  EditReceipt rollback;
  bool es = false;
  int gs_hits = 0, gs_total = 0;
  int ls_hits = 0, ls_total = 0;
  double rollback_success_rate = 0;
};

struct MetricValue {
  std::optional<double> value;  // empty = n/a
  double ci95 = 0;
};

struct MetricsReport {
  MetricValue es, gs, ls, ers, ors, s;
  int n_edits = 0, n_p = 0, n_q = 0;
};

/// 0 if any component is 0, n / sum(1/m) otherwise; n/a components are skipped.
std::optional<double> harmonic_mean(const std::vector<std::optional<double>>& parts);

struct MetricInputs {
  std::vector<StepLog> steps;
  std::vector<bool> ers_hits;  // per edited record
  std::vector<bool> ors_hits;  // per Q record
};

MetricsReport compute_metrics(const MetricInputs& in, int bootstrap, std::uint64_t seed);

/// Evaluates ERS/ORS hits of `final_model` against `initial_model`.
MetricInputs retention_inputs(const std::vector<StepLog>& steps, const std::vector<KnowledgeRecord>& edited,
                              const std::vector<KnowledgeRecord>& q, const ModelF& final_model,
                              const ModelF& initial_model, const Tokenizer& tok);

struct RunResult {
  MetricsReport metrics;
  ToxicityTrace trace;
  std::vector<StepLog> steps;
  ModelF final_model;
  bool complete = false;
};

/// Two-stage lifelong run: edit each record of P, measure, roll back, then
/// score retention. With `log_path`, every stage is appended as a JSON line
/// and a run whose log already holds steps resumes after the last complete one.
RunResult run_lifelong(const ModelF& initial, const Tokenizer& tok, const std::vector<KnowledgeRecord>& p,
                       const std::vector<KnowledgeRecord>& q, const RunConfig& cfg,
                       const std::optional<std::filesystem::path>& log_path = std::nullopt,
                       const std::string& run_id = "run");

/// Edits and rolls back every record on its own copy of `initial`, in record
/// order. A flash leaves the shared context tokens broken for every later edit,
/// so a dataset filter reads each case in isolation.
std::vector<StepLog> screen_cases(const ModelF& initial, const Tokenizer& tok,
                                  const std::vector<KnowledgeRecord>& records, const RunConfig& cfg);

/// Flash-splitter inputs from a run.
std::vector<CaseOutcome> case_outcomes(const std::vector<StepLog>& steps);

/// Pretty JSON rendering of one receipt, as stored in run logs.
std::string receipt_to_json(const EditReceipt& r);

/// JSON document: metrics, counts and the config hash.
std::string report_json(const MetricsReport& m, const std::string& config_hash);

}  // namespace wilke
