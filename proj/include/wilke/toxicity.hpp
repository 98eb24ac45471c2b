#pragma once

#include "wilke/editor.hpp"

#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace wilke {

struct LayerToxicity {
  int layer = 0;
  MatrixF diff;  // after - before for W_proj
  double norm = 0;
  double baseline_norm = 0;
};

/// Elementwise W_proj difference per layer and its Frobenius norm.
std::vector<LayerToxicity> toxicity_of(const ModelF& before, const ModelF& after);

/// Frobenius norms of every layer's W_proj.
std::vector<double> proj_norms(const ModelF& model);

inline const std::set<int>& default_checkpoints() {
  static const std::set<int> cps{2, 4, 8, 16, 32, 64, 128, 256, 512, 1024};
  return cps;
}

struct TraceStep {
  int step = 0;
  std::vector<double> norms;  // per layer, after the step's rollback
  int edit_layer = -1;
  double edit_update = 0;  // |dW|_F of the edit stage
};

/// Per-step W_proj norms across a lifelong run plus the accumulated dW at
/// checkpoint steps.
class ToxicityTrace {
 public:
  ToxicityTrace() = default;
  ToxicityTrace(const ModelF& initial, std::set<int> checkpoints = default_checkpoints());

  /// Appends step `step`; steps must arrive as 1, 2, 3, ...
  void record(const ModelF& current, int step, int edit_layer = -1, double edit_update = 0);

  const std::vector<double>& baseline() const { return baseline_; }
  const std::vector<TraceStep>& steps() const { return steps_; }
  const std::set<int>& checkpoints() const { return checkpoints_; }
  /// Checkpoint steps actually reached.
  std::vector<int> recorded_checkpoints() const;
  /// Accumulated W_proj change at a recorded checkpoint for `layer`.
  const MatrixF& delta_at(int step, int layer) const;
  /// Norms after `step` edits; step 0 is the baseline.
  const std::vector<double>& norms_at(int step) const;

  /// step,layer,frobenius_norm,baseline_norm
  void write_csv(std::ostream& out) const;

 private:
  ModelF initial_;
  std::vector<double> baseline_;
  std::set<int> checkpoints_;
  std::vector<TraceStep> steps_;
  std::map<int, std::vector<MatrixF>> deltas_;
};

/// One lifelong step as persisted: the edit receipt and its rollback receipt.
struct StepReceipts {
  int step = 0;
  EditReceipt edit;
  EditReceipt rollback;
};

/// Rebuilds the trace by replaying the receipts' rank-one updates on `initial`.
ToxicityTrace record_trace(const ModelF& initial, const std::vector<StepReceipts>& steps,
                           const std::set<int>& checkpoints = default_checkpoints());

struct SweepRow {
  int layer = 0;
  double pre_norm = 0;
  double post_norm = 0;
  double update_frobenius = 0;
  bool edit_success = false;
  std::vector<double> all_post_norms;  // every layer after this single edit
};

/// Single edits at each layer, each on a fresh copy of `model`.
std::vector<SweepRow> layer_sweep(const ModelF& model, const EditRequest& req, const EditEnv& env, int threads = 1);

/// layer,pre_norm,post_norm,ratio,update_frobenius,edit_success
void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out);

struct CaseOutcome {
  std::int64_t case_id = 0;
  double update_frobenius = 0;      // edit stage
  double rollback_success_rate = 0; // fraction of the case's prompts restored after rollback
};

struct FlashVerdict {
  std::int64_t case_id = 0;
  double rollback_success_rate = 0;
  double update_norm_ratio = 0;  // edit update / running median of edit updates so far
  bool flagged = false;
};

inline constexpr double kFlashRollbackRate = 0.10;

struct FlashSplit {
  std::vector<FlashVerdict> verdicts;
  std::vector<std::int64_t> flash;
  std::vector<std::int64_t> buildup;
};

/// Flags cases with rollback_success_rate < 0.10 and update_norm_ratio > tau,
/// in run order.
FlashSplit flash_split(const std::vector<CaseOutcome>& cases, double tau = 5.0);

struct PooledGrid {
  int rows = 0, cols = 0;
  std::vector<double> values;  // row-major
  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
  double total() const;
};

/// Sum-pools |m| into at most grid x grid cells.
PooledGrid pool_abs(const MatrixF& m, int grid = 64);

/// Writes row,col,value CSV and an SVG rendering of the pooled |dW| at a checkpoint.
PooledGrid export_heatmap(const ToxicityTrace& trace, int step, int layer, std::ostream& csv, std::ostream& svg);

}  // namespace wilke
