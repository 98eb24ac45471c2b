#include "wilke/harness.hpp"

#include "wilke/tensor_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

namespace wilke {

using nlohmann::json;

EditRequest KnowledgeRecord::request() const {
  EditRequest r;
  r.subject = subject;
  r.prompt_template = prompt;
  r.target_new = target_new;
  r.target_true = target_true;
  r.paraphrase_prompts = paraphrase_prompts;
  r.neighborhood_prompts = neighborhood_prompts;
  return r;
}

namespace {

std::string case_label(const json& j) {
  if (j.is_object() && j.contains("case_id")) return j["case_id"].dump();
  return "?";
}

const json& field(const json& j, const char* name, const std::string& where) {
  if (!j.is_object() || !j.contains(name))
    throw ValidationError("record case_id " + where + ": missing field '" + name + "'");
  return j.at(name);
}

std::string string_field(const json& j, const char* name, const std::string& where) {
  const json& v = field(j, name, where);
  if (!v.is_string()) throw ValidationError("record case_id " + where + ": field '" + name + "' must be a string");
  return v.get<std::string>();
}

std::vector<std::string> string_list(const json& j, const char* name, const std::string& where) {
  const json& v = field(j, name, where);
  if (!v.is_array()) throw ValidationError("record case_id " + where + ": field '" + name + "' must be a list");
  std::vector<std::string> out;
  for (const auto& s : v) {
    if (!s.is_string()) throw ValidationError("record case_id " + where + ": field '" + name + "' must hold strings");
    out.push_back(s.get<std::string>());
  }
  return out;
}

KnowledgeRecord record_from_json(const json& j) {
  const std::string where = case_label(j);
  KnowledgeRecord r;
  const json& id = field(j, "case_id", where);
  if (!id.is_number_integer()) throw ValidationError("record case_id " + where + ": case_id must be an integer");
  r.case_id = id.get<std::int64_t>();
  const json& rw = field(j, "requested_rewrite", where);
  r.prompt = string_field(rw, "prompt", where);
  r.subject = string_field(rw, "subject", where);
  r.target_new = string_field(field(rw, "target_new", where), "str", where);
  r.target_true = string_field(field(rw, "target_true", where), "str", where);
  r.relation_id = rw.contains("relation_id") ? string_field(rw, "relation_id", where) : "";
  r.paraphrase_prompts = string_list(j, "paraphrase_prompts", where);
  r.neighborhood_prompts = string_list(j, "neighborhood_prompts", where);
  try {
    r.request().validate();
  } catch (const ValidationError& e) {
    throw ValidationError("record case_id " + where + ": " + e.what());
  }
  return r;
}

}  // namespace

std::vector<KnowledgeRecord> parse_records(const std::string& text) {
  std::vector<json> items;
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  try {
    if (text[first] == '[') {
      for (auto& j : json::parse(text)) items.push_back(std::move(j));
    } else {
      std::istringstream in(text);
      std::string line;
      while (std::getline(in, line))
        if (line.find_first_not_of(" \t\r") != std::string::npos) items.push_back(json::parse(line));
    }
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("dataset: not valid JSON: ") + e.what());
  }
  std::vector<KnowledgeRecord> out;
  std::set<std::int64_t> seen;
  for (const auto& j : items) {
    auto r = record_from_json(j);
    if (!seen.insert(r.case_id).second) throw ValidationError("duplicate case_id " + std::to_string(r.case_id));
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<KnowledgeRecord> load_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("dataset: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_records(ss.str());
}

std::string record_to_json(const KnowledgeRecord& r) {
  json j;
  j["case_id"] = r.case_id;
  j["requested_rewrite"] = {{"prompt", r.prompt},
                            {"subject", r.subject},
                            {"target_new", {{"str", r.target_new}}},
                            {"target_true", {{"str", r.target_true}}},
                            {"relation_id", r.relation_id}};
  j["paraphrase_prompts"] = r.paraphrase_prompts;
  j["neighborhood_prompts"] = r.neighborhood_prompts;
  return j.dump();
}

void save_records(const std::vector<KnowledgeRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("dataset: cannot write " + path.string());
  for (const auto& r : records) out << record_to_json(r) << '\n';
}

std::string darrieux_fixture() {
  return R"({"case_id": 0, "requested_rewrite": {"prompt": "The mother tongue of {} is", "subject": "Danielle Darrieux", )"
         R"("target_new": {"str": "English"}, "target_true": {"str": "French"}, "relation_id": "P103"}, )"
         R"("paraphrase_prompts": ["[Irrelevant Context]. Danielle Darrieux spoke the language"], )"
         R"("neighborhood_prompts": ["The native language of Montesquieu is"]})";
}

Tokens teacher_forced_predictions(const ModelF& model, const Tokens& prompt, const Tokens& target) {
  Tokens seq = prompt;
  seq.insert(seq.end(), target.begin(), target.end() - 1);
  const auto logits = forward(model, seq);
  Tokens out;
  for (std::size_t k = 0; k < target.size(); ++k)
    out.push_back(argmax_token<float>(logits.row(static_cast<Eigen::Index>(prompt.size() + k) - 1).transpose()));
  return out;
}

namespace {

bool matches(const ModelF& model, const Tokenizer& tok, const std::string& prompt, const std::string& target) {
  return teacher_forced_match(model, tok.encode(prompt), target_tokens(tok, target));
}

}  // namespace

std::vector<KnowledgeRecord> filter_known(const ModelF& model, const Tokenizer& tok,
                                          const std::vector<KnowledgeRecord>& records) {
  std::vector<KnowledgeRecord> out;
  for (const auto& r : records)
    if (matches(model, tok, fill_subject(r.prompt, r.subject), r.target_true)) out.push_back(r);
  return out;
}

std::pair<std::vector<KnowledgeRecord>, std::vector<KnowledgeRecord>> split_pq(
    const std::vector<KnowledgeRecord>& records, double p_fraction, std::uint64_t seed) {
  if (!(p_fraction >= 0 && p_fraction <= 1)) throw ValidationError("p_q_split: fraction must lie in [0, 1]");
  std::vector<KnowledgeRecord> sorted = records;
  std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) { return a.case_id < b.case_id; });
  std::mt19937_64 rng(seed);
  std::shuffle(sorted.begin(), sorted.end(), rng);
  const auto n_p = static_cast<std::size_t>(std::llround(p_fraction * static_cast<double>(sorted.size())));
  std::vector<KnowledgeRecord> p(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n_p));
  std::vector<KnowledgeRecord> q(sorted.begin() + static_cast<std::ptrdiff_t>(n_p), sorted.end());
  return {p, q};
}

void RunConfig::validate() const {
  delta.validate();
  if (n_edits < -1) throw ValidationError("n: must be >= 0");
  if (!(p_fraction >= 0 && p_fraction <= 1)) throw ValidationError("p_q_split: fraction must lie in [0, 1]");
  if (threads < 1) throw ValidationError("threads: must be >= 1");
  if (bootstrap < 0) throw ValidationError("bootstrap: must be >= 0");
  for (int c : checkpoints)
    if (c < 1) throw ValidationError("checkpoints: steps must be >= 1");
}

std::string RunConfig::canonical() const {
  std::ostringstream s;
  s.precision(17);
  s << "policy=" << policy.to_string() << "\nn_edits=" << n_edits << "\np_fraction=" << p_fraction
    << "\nseed=" << seed << "\ndelta.steps=" << delta.steps << "\ndelta.learning_rate=" << delta.learning_rate
    << "\ndelta.kl_weight=" << delta.kl_weight << "\ndelta.n_prefixes=" << delta.n_prefixes
    << "\ndelta.prefix_len_min=" << delta.prefix_len_min << "\ndelta.prefix_len_max=" << delta.prefix_len_max
    << "\ndelta.clamp_factor=" << delta.clamp_factor << "\ncheckpoints=";
  bool first = true;
  for (int c : checkpoints) s << (first ? "" : ",") << c, first = false;
  s << "\norder=" << (order == EditOrder::dataset ? "dataset" : "shuffled")
    << "\noracle_values=" << (oracle_values ? "true" : "false") << "\nbootstrap=" << bootstrap << '\n';
  return s.str();
}

std::optional<double> harmonic_mean(const std::vector<std::optional<double>>& parts) {
  double inv = 0;
  int n = 0;
  for (const auto& p : parts) {
    if (!p) continue;
    if (*p <= 0) return 0.0;
    inv += 1.0 / *p;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return n / inv;
}

namespace {

struct PointMetrics {
  std::optional<double> es, gs, ls, ers, ors;
  std::optional<double> s() const { return harmonic_mean({es, gs, ls, ers, ors}); }
};

template <typename Fn>
std::optional<double> mean_over(const std::vector<std::size_t>& idx, Fn&& value) {
  double sum = 0;
  int n = 0;
  for (std::size_t i : idx) {
    const auto v = value(i);
    if (!v) continue;
    sum += *v;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

PointMetrics point_metrics(const MetricInputs& in, const std::vector<std::size_t>& steps, const std::vector<std::size_t>& qs) {
  PointMetrics m;
  m.es = mean_over(steps, [&](std::size_t i) -> std::optional<double> { return in.steps[i].es ? 1.0 : 0.0; });
  m.gs = mean_over(steps, [&](std::size_t i) -> std::optional<double> {
    const auto& s = in.steps[i];
    if (s.gs_total == 0) return std::nullopt;
    return static_cast<double>(s.gs_hits) / s.gs_total;
  });
  m.ls = mean_over(steps, [&](std::size_t i) -> std::optional<double> {
    const auto& s = in.steps[i];
    if (s.ls_total == 0) return std::nullopt;
    return static_cast<double>(s.ls_hits) / s.ls_total;
  });
  if (in.ers_hits.size() == in.steps.size()) {
    m.ers = in.steps.empty() ? std::optional<double>(1.0)
                             : mean_over(steps, [&](std::size_t i) -> std::optional<double> { return in.ers_hits[i] ? 1.0 : 0.0; });
    m.ors = mean_over(qs, [&](std::size_t i) -> std::optional<double> { return in.ors_hits[i] ? 1.0 : 0.0; });
  }
  return m;
}

double half_width(std::vector<double> v) {
  if (v.size() < 2) return 0;
  std::sort(v.begin(), v.end());
  const auto at = [&](double q) { return v[static_cast<std::size_t>(std::floor(q * static_cast<double>(v.size() - 1)))]; };
  return 0.5 * (at(0.975) - at(0.025));
}

}  // namespace

MetricsReport compute_metrics(const MetricInputs& in, int bootstrap, std::uint64_t seed) {
  std::vector<std::size_t> steps(in.steps.size()), qs(in.ors_hits.size());
  std::iota(steps.begin(), steps.end(), 0);
  std::iota(qs.begin(), qs.end(), 0);
  const PointMetrics point = point_metrics(in, steps, qs);

  std::vector<std::vector<double>> samples(6);
  std::mt19937_64 rng(seed ^ 0xb0075ull);
  for (int b = 0; b < bootstrap && (!steps.empty() || !qs.empty()); ++b) {
    std::vector<std::size_t> rs(steps.size()), rq(qs.size());
    for (auto& i : rs) i = std::uniform_int_distribution<std::size_t>(0, steps.size() - 1)(rng);
    for (auto& i : rq) i = std::uniform_int_distribution<std::size_t>(0, qs.size() - 1)(rng);
    const PointMetrics m = point_metrics(in, rs, rq);
    const std::optional<double> all[6] = {m.es, m.gs, m.ls, m.ers, m.ors, m.s()};
    for (int k = 0; k < 6; ++k)
      if (all[k]) samples[k].push_back(*all[k]);
  }
  MetricsReport r;
  MetricValue* dst[6] = {&r.es, &r.gs, &r.ls, &r.ers, &r.ors, &r.s};
  const std::optional<double> vals[6] = {point.es, point.gs, point.ls, point.ers, point.ors, point.s()};
  for (int k = 0; k < 6; ++k) {
    dst[k]->value = vals[k];
    dst[k]->ci95 = vals[k] ? half_width(samples[k]) : 0.0;
  }
  r.n_edits = static_cast<int>(in.steps.size());
  r.n_q = static_cast<int>(in.ors_hits.size());
  return r;
}

MetricInputs retention_inputs(const std::vector<StepLog>& steps, const std::vector<KnowledgeRecord>& edited,
                              const std::vector<KnowledgeRecord>& q, const ModelF& final_model,
                              const ModelF& initial_model, const Tokenizer& tok) {
  auto same = [&](const KnowledgeRecord& r) {
    const Tokens prompt = tok.encode(fill_subject(r.prompt, r.subject));
    const Tokens target = target_tokens(tok, r.target_true);
    return teacher_forced_predictions(final_model, prompt, target) == teacher_forced_predictions(initial_model, prompt, target);
  };
  MetricInputs in;
  in.steps = steps;
  for (const auto& r : edited) in.ers_hits.push_back(same(r));
  for (const auto& r : q) in.ors_hits.push_back(same(r));
  return in;
}

namespace {

json vec_json(const VectorF& v) { return std::vector<float>(v.data(), v.data() + v.size()); }

VectorF vec_from(const json& j) {
  const auto v = j.get<std::vector<float>>();
  return Eigen::Map<const VectorF>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json receipt_json(const EditReceipt& r) {
  json j;
  j["stage"] = r.stage == Stage::edit ? "edit" : "rollback";
  j["layer"] = r.layer;
  j["key"] = vec_json(r.key);
  j["key_norm"] = r.key_norm;
  j["delta"] = vec_json(r.delta);
  j["delta_norm"] = r.delta_norm;
  j["update_frobenius"] = r.update_frobenius;
  j["pre_loss"] = r.pre_loss;
  j["post_loss"] = r.post_loss;
  j["edit_success"] = r.edit_success;
  j["rollback_success"] = r.rollback_success ? json(*r.rollback_success) : json(nullptr);
  j["v_star"] = vec_json(r.v_star);
  j["original_value"] = vec_json(r.original_value);
  return j;
}

EditReceipt receipt_from(const json& j) {
  EditReceipt r;
  r.stage = j.at("stage") == "edit" ? Stage::edit : Stage::rollback;
  r.layer = j.at("layer");
  r.key = vec_from(j.at("key"));
  r.key_norm = j.at("key_norm");
  r.delta = vec_from(j.at("delta"));
  r.delta_norm = j.at("delta_norm");
  r.update_frobenius = j.at("update_frobenius");
  r.pre_loss = j.at("pre_loss");
  r.post_loss = j.at("post_loss");
  r.edit_success = j.at("edit_success");
  if (!j.at("rollback_success").is_null()) r.rollback_success = j.at("rollback_success").get<bool>();
  r.v_star = vec_from(j.at("v_star"));
  r.original_value = vec_from(j.at("original_value"));
  return r;
}

}  // namespace

std::string receipt_to_json(const EditReceipt& r) { return receipt_json(r).dump(2) + "\n"; }

namespace {

/// Complete steps from an existing log; rewrites the log without a trailing partial step.
std::vector<StepLog> read_log(const std::filesystem::path& path, const std::string& run_id) {
  std::vector<StepLog> steps;
  std::vector<std::string> kept;
  std::ifstream in(path);
  if (!in) return steps;
  std::string line, pending;
  StepLog cur;
  bool have_edit = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      break;  // torn final write
    }
    if (j.at("run_id") != run_id) throw ValidationError("run log belongs to run '" + j.at("run_id").get<std::string>() + "'");
    const int step = j.at("step");
    if (j.at("stage") == "edit") {
      if (have_edit || step != static_cast<int>(steps.size()) + 1) throw FormatError("run log: steps out of order");
      cur = StepLog{};
      cur.step = step;
      cur.case_id = j.at("case_id");
      cur.edit = receipt_from(j.at("receipt"));
      cur.es = j.at("es");
      cur.gs_hits = j.at("gs_hits");
      cur.gs_total = j.at("gs_total");
      cur.ls_hits = j.at("ls_hits");
      cur.ls_total = j.at("ls_total");
      have_edit = true;
      pending = line;
    } else {
      if (!have_edit || step != cur.step) throw FormatError("run log: rollback without edit at step " + std::to_string(step));
      cur.rollback = receipt_from(j.at("receipt"));
      cur.rollback_success_rate = j.at("rollback_success_rate");
      steps.push_back(cur);
      kept.push_back(pending);
      kept.push_back(line);
      have_edit = false;
    }
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : kept) out << l << '\n';
  return steps;
}

void measure_edit(const ModelF& model, const Tokenizer& tok, const KnowledgeRecord& rec, StepLog& s) {
  s.es = s.edit.edit_success;
  for (const auto& pp : rec.paraphrase_prompts) s.gs_hits += matches(model, tok, pp, rec.target_new), ++s.gs_total;
  for (const auto& np : rec.neighborhood_prompts) s.ls_hits += matches(model, tok, np, rec.target_true), ++s.ls_total;
}

// Success of the rollback edit itself: the prompt and its paraphrases are
// back on target_true. Neighborhood prompts measure locality, not this.
double restored_fraction(const ModelF& model, const Tokenizer& tok, const KnowledgeRecord& rec) {
  int restored = matches(model, tok, fill_subject(rec.prompt, rec.subject), rec.target_true), total = 1;
  for (const auto& pp : rec.paraphrase_prompts) restored += matches(model, tok, pp, rec.target_true), ++total;
  return static_cast<double>(restored) / total;
}

RollbackMode rollback_mode(const RunConfig& cfg) {
  return cfg.oracle_values ? RollbackMode::oracle : RollbackMode::optimize;
}

}  // namespace

RunResult run_lifelong(const ModelF& initial, const Tokenizer& tok, const std::vector<KnowledgeRecord>& p,
                       const std::vector<KnowledgeRecord>& q, const RunConfig& cfg,
                       const std::optional<std::filesystem::path>& log_path, const std::string& run_id) {
  cfg.validate();
  {
    std::set<std::int64_t> ids;
    for (const auto& r : p) ids.insert(r.case_id);
    for (const auto& r : q)
      if (ids.count(r.case_id)) throw ValidationError("P and Q overlap at case_id " + std::to_string(r.case_id));
  }
  std::vector<KnowledgeRecord> order = p;
  if (cfg.order == EditOrder::shuffled) {
    std::mt19937_64 rng(cfg.seed ^ 0x0dde4ull);
    std::shuffle(order.begin(), order.end(), rng);
  }
  const int n = cfg.n_edits < 0 ? static_cast<int>(order.size()) : cfg.n_edits;
  if (n > static_cast<int>(order.size())) throw ValidationError("n: exceeds |P| = " + std::to_string(order.size()));
  order.resize(static_cast<std::size_t>(n));

  DeltaOptConfig dcfg = cfg.delta;
  dcfg.seed = cfg.seed;
  const EditEnv env = make_env(initial, tok, dcfg);

  RunResult res{{}, ToxicityTrace(initial, cfg.checkpoints), {}, initial, false};
  ModelF& model = res.final_model;

  std::ofstream log;
  if (log_path) {
    res.steps = read_log(*log_path, run_id);
    if (static_cast<int>(res.steps.size()) > n) throw ValidationError("run log holds more steps than requested");
    for (const auto& s : res.steps) {
      if (s.case_id != order[s.step - 1].case_id) throw ValidationError("run log does not match the dataset order");
      apply_rank_one_inplace<float>(model.blocks[s.edit.layer].proj_w, s.edit.key, s.edit.delta);
      apply_rank_one_inplace<float>(model.blocks[s.rollback.layer].proj_w, s.rollback.key, s.rollback.delta);
      res.trace.record(model, s.step, s.edit.layer, s.edit.update_frobenius);
    }
    log.open(*log_path, std::ios::app);
    if (!log) throw Error("run log: cannot open " + log_path->string());
  }

  for (int i = static_cast<int>(res.steps.size()); i < n; ++i) {
    if (cfg.stop_after >= 0 && i >= cfg.stop_after) return res;
    const KnowledgeRecord& rec = order[i];
    const EditRequest req = rec.request();
    StepLog s;
    s.step = i + 1;
    s.case_id = rec.case_id;
    s.edit = edit(model, req, cfg.policy, env);
    measure_edit(model, tok, rec, s);
    if (log) {
      json j{{"run_id", run_id}, {"step", s.step}, {"stage", "edit"}, {"case_id", s.case_id},
             {"receipt", receipt_json(s.edit)}, {"es", s.es}, {"gs_hits", s.gs_hits}, {"gs_total", s.gs_total},
             {"ls_hits", s.ls_hits}, {"ls_total", s.ls_total}};
      log << j.dump() << '\n' << std::flush;
    }
    s.rollback = rollback(model, req, s.edit, env, rollback_mode(cfg));
    s.rollback_success_rate = restored_fraction(model, tok, rec);
    if (log) {
      json j{{"run_id", run_id}, {"step", s.step}, {"stage", "rollback"}, {"case_id", s.case_id},
             {"receipt", receipt_json(s.rollback)}, {"rollback_success_rate", s.rollback_success_rate}};
      log << j.dump() << '\n' << std::flush;
    }
    res.trace.record(model, s.step, s.edit.layer, s.edit.update_frobenius);
    res.steps.push_back(std::move(s));
  }

  const MetricInputs in = retention_inputs(res.steps, order, q, model, initial, tok);
  res.metrics = compute_metrics(in, cfg.bootstrap, cfg.seed);
  res.metrics.n_p = static_cast<int>(p.size());
  res.complete = true;
  return res;
}

std::vector<StepLog> screen_cases(const ModelF& initial, const Tokenizer& tok,
                                  const std::vector<KnowledgeRecord>& records, const RunConfig& cfg) {
  cfg.validate();
  DeltaOptConfig dcfg = cfg.delta;
  dcfg.seed = cfg.seed;
  const EditEnv env = make_env(initial, tok, dcfg);
  const int n = static_cast<int>(records.size());
  std::vector<StepLog> out(records.size());
  std::vector<std::string> errs(records.size());
  std::atomic<int> next{0};
  auto work = [&] {
    for (int i = next++; i < n; i = next++) {
      try {
        const KnowledgeRecord& rec = records[i];
        const EditRequest req = rec.request();
        ModelF model = initial;
        StepLog& s = out[i];
        s.step = i + 1;
        s.case_id = rec.case_id;
        s.edit = edit(model, req, cfg.policy, env);
        measure_edit(model, tok, rec, s);
        s.rollback = rollback(model, req, s.edit, env, rollback_mode(cfg));
        s.rollback_success_rate = restored_fraction(model, tok, rec);
      } catch (const std::exception& e) {
        errs[i] = "case " + std::to_string(records[i].case_id) + ": " + e.what();
      }
    }
  };
  const int workers = std::clamp(cfg.threads, 1, std::max(n, 1));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
  }
  for (const auto& e : errs)
    if (!e.empty()) throw NumericError("screen: " + e);
  return out;
}

std::vector<CaseOutcome> case_outcomes(const std::vector<StepLog>& steps) {
  std::vector<CaseOutcome> out;
  for (const auto& s : steps) out.push_back({s.case_id, s.edit.update_frobenius, s.rollback_success_rate});
  return out;
}

std::string report_json(const MetricsReport& m, const std::string& config_hash) {
  auto metric = [](const MetricValue& v) {
    json j;
    j["value"] = v.value ? json(*v.value) : json("n/a");
    j["ci95"] = v.ci95;
    return j;
  };
  json j;
  j["config_hash"] = config_hash;
  j["metrics"] = {{"ES", metric(m.es)},   {"GS", metric(m.gs)},   {"LS", metric(m.ls)},
                  {"ERS", metric(m.ers)}, {"ORS", metric(m.ors)}, {"S", metric(m.s)}};
  j["n_edits"] = m.n_edits;
  j["n_p"] = m.n_p;
  j["n_q"] = m.n_q;
  return j.dump(2) + "\n";
}

}  // namespace wilke
