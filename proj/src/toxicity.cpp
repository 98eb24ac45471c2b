#include "wilke/toxicity.hpp"

#include "wilke/plots.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <ostream>
#include <sstream>
#include <thread>

namespace wilke {

std::vector<double> proj_norms(const ModelF& model) {
  std::vector<double> out;
  for (const auto& b : model.blocks) out.push_back(b.proj_w.cast<double>().norm());
  return out;
}

std::vector<LayerToxicity> toxicity_of(const ModelF& before, const ModelF& after) {
  if (!(before.config == after.config)) throw ValidationError("toxicity_of: model configs differ");
  before.check_shapes();
  after.check_shapes();
  std::vector<LayerToxicity> out;
  for (int l = 0; l < before.config.n_layers; ++l) {
    LayerToxicity t;
    t.layer = l;
    t.diff = after.blocks[l].proj_w - before.blocks[l].proj_w;
    t.norm = t.diff.cast<double>().norm();
    t.baseline_norm = before.blocks[l].proj_w.cast<double>().norm();
    out.push_back(std::move(t));
  }
  return out;
}

ToxicityTrace::ToxicityTrace(const ModelF& initial, std::set<int> checkpoints)
    : initial_(initial), baseline_(proj_norms(initial)), checkpoints_(std::move(checkpoints)) {}

void ToxicityTrace::record(const ModelF& current, int step, int edit_layer, double edit_update) {
  const int expected = steps_.empty() ? 1 : steps_.back().step + 1;
  if (step != expected)
    throw ValidationError("trace: missing step record (expected step " + std::to_string(expected) + ", got " +
                          std::to_string(step) + ")");
  if (!(current.config == initial_.config)) throw ValidationError("trace: model config changed during run");
  steps_.push_back({step, proj_norms(current), edit_layer, edit_update});
  if (checkpoints_.count(step)) {
    std::vector<MatrixF> d;
    for (int l = 0; l < current.config.n_layers; ++l) d.push_back(current.blocks[l].proj_w - initial_.blocks[l].proj_w);
    deltas_[step] = std::move(d);
  }
}

std::vector<int> ToxicityTrace::recorded_checkpoints() const {
  std::vector<int> out;
  for (const auto& [step, d] : deltas_) out.push_back(step);
  return out;
}

const MatrixF& ToxicityTrace::delta_at(int step, int layer) const {
  const auto it = deltas_.find(step);
  if (it == deltas_.end()) throw ValidationError("heatmap: unknown step " + std::to_string(step));
  if (layer < 0 || layer >= static_cast<int>(it->second.size()))
    throw ValidationError("heatmap: layer " + std::to_string(layer) + " out of range");
  return it->second[layer];
}

const std::vector<double>& ToxicityTrace::norms_at(int step) const {
  if (step == 0) return baseline_;
  if (step < 0 || step > static_cast<int>(steps_.size())) throw ValidationError("trace: step out of range");
  return steps_[step - 1].norms;
}

void ToxicityTrace::write_csv(std::ostream& out) const {
  out << "step,layer,frobenius_norm,baseline_norm\n";
  const auto old = out.precision(10);
  for (std::size_t l = 0; l < baseline_.size(); ++l) out << 0 << ',' << l << ',' << baseline_[l] << ',' << baseline_[l] << '\n';
  for (const auto& s : steps_)
    for (std::size_t l = 0; l < s.norms.size(); ++l)
      out << s.step << ',' << l << ',' << s.norms[l] << ',' << baseline_[l] << '\n';
  out.precision(old);
}

ToxicityTrace record_trace(const ModelF& initial, const std::vector<StepReceipts>& steps, const std::set<int>& checkpoints) {
  ToxicityTrace trace(initial, checkpoints);
  ModelF model = initial;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& s = steps[i];
    if (s.step != static_cast<int>(i) + 1) throw ValidationError("trace: missing step record " + std::to_string(i + 1));
    apply_rank_one_inplace<float>(model.blocks[s.edit.layer].proj_w, s.edit.key, s.edit.delta);
    apply_rank_one_inplace<float>(model.blocks[s.rollback.layer].proj_w, s.rollback.key, s.rollback.delta);
    trace.record(model, s.step, s.edit.layer, s.edit.update_frobenius);
  }
  return trace;
}

std::vector<SweepRow> layer_sweep(const ModelF& model, const EditRequest& req, const EditEnv& env, int threads) {
  const int n = model.config.n_layers;
  const auto base = proj_norms(model);
  std::vector<SweepRow> rows(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<int> next{0};
  auto work = [&] {
    for (int l = next++; l < n; l = next++) {
      try {
        ModelF copy = model;
        const auto r = edit(copy, req, LayerPolicy::fixed(l), env);
        rows[l] = {l, base[l], 0, r.update_frobenius, r.edit_success, proj_norms(copy)};
        rows[l].post_norm = rows[l].all_post_norms[l];
      } catch (...) {
        errors[l] = std::current_exception();
      }
    }
  };
  const int workers = std::clamp(threads, 1, n);
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "layer,pre_norm,post_norm,ratio,update_frobenius,edit_success\n";
  const auto old = out.precision(10);
  for (const auto& r : rows)
    out << r.layer << ',' << r.pre_norm << ',' << r.post_norm << ',' << r.post_norm / r.pre_norm << ','
        << r.update_frobenius << ',' << (r.edit_success ? 1 : 0) << '\n';
  out.precision(old);
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

FlashSplit flash_split(const std::vector<CaseOutcome>& cases, double tau) {
  if (!(tau > 0)) throw ValidationError("tau: must be > 0");
  FlashSplit out;
  std::vector<double> seen;
  for (const auto& c : cases) {
    if (!(c.rollback_success_rate >= 0 && c.rollback_success_rate <= 1))
      throw ValidationError("case " + std::to_string(c.case_id) + ": receipt lacks a rollback stage");
    seen.push_back(c.update_frobenius);
    const double med = median(seen);
    FlashVerdict v;
    v.case_id = c.case_id;
    v.rollback_success_rate = c.rollback_success_rate;
    v.update_norm_ratio = med > 0 ? c.update_frobenius / med : (c.update_frobenius > 0 ? INFINITY : 1.0);
    v.flagged = v.rollback_success_rate < kFlashRollbackRate && v.update_norm_ratio > tau;
    (v.flagged ? out.flash : out.buildup).push_back(c.case_id);
    out.verdicts.push_back(v);
  }
  return out;
}

double PooledGrid::total() const {
  double s = 0;
  for (double v : values) s += v;
  return s;
}

PooledGrid pool_abs(const MatrixF& m, int grid) {
  PooledGrid g;
  g.rows = std::min<int>(grid, static_cast<int>(m.rows()));
  g.cols = std::min<int>(grid, static_cast<int>(m.cols()));
  g.values.assign(static_cast<std::size_t>(g.rows) * g.cols, 0.0);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const auto br = static_cast<std::size_t>(r * g.rows / m.rows());
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const auto bc = static_cast<std::size_t>(c * g.cols / m.cols());
      g.values[br * g.cols + bc] += std::abs(static_cast<double>(m(r, c)));
    }
  }
  return g;
}

PooledGrid export_heatmap(const ToxicityTrace& trace, int step, int layer, std::ostream& csv, std::ostream& svg) {
  const PooledGrid g = pool_abs(trace.delta_at(step, layer));
  std::ostringstream text;
  text << "row,col,value\n";
  text.precision(10);
  for (int r = 0; r < g.rows; ++r)
    for (int c = 0; c < g.cols; ++c) text << r << ',' << c << ',' << g.at(r, c) << '\n';
  csv << text.str();
  svg << heatmap_svg(text.str(), "|dW| layer " + std::to_string(layer) + ", step " + std::to_string(step));
  return g;
}

}  // namespace wilke
