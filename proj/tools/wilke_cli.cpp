// wilke: command-line front end for the editing lab.
#include "wilke/cma.hpp"
#include "wilke/harness.hpp"
#include "wilke/plots.hpp"
#include "wilke/selector.hpp"
#include "wilke/synthetic.hpp"
#include "wilke/tensor_io.hpp"
#include "wilke/toxicity.hpp"
#include "wilke/toy_kb.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace wilke;

namespace {

constexpr const char* kVersion = "0.1.0";

struct Options {
  std::string model;
  std::string dataset;
  std::string policy = "wilke";
  int n = -1;
  std::uint64_t seed = 0;
  std::string out = "wilke_out";
  int threads = 1;
  std::vector<int> checkpoints;
  double tau = 5.0;
  bool oracle_values = false;
  std::int64_t case_id = -1;
  int stop_after = -1;
  double p_fraction = 0.5;
  std::string kind = "toy";
  int n_flash = 3;
};

struct Lab {
  ModelF model;
  Tokenizer tokenizer;
};

Lab load_lab(const std::string& model_path) {
  if (model_path.empty()) throw ValidationError("--model: required");
  Lab lab{load_weights(model_path).model, Tokenizer{}};
  if (lab.model.config.tokenizer_mode == TokenizerMode::bpe) {
    const fs::path dir = fs::path(model_path).parent_path();
    lab.tokenizer = Tokenizer::from_files(dir / "vocab.json", dir / "merges.txt");
  }
  return lab;
}

std::vector<KnowledgeRecord> load_dataset(const std::string& path) {
  if (path.empty()) throw ValidationError("--dataset: required");
  return load_records(path);
}

const KnowledgeRecord& find_case(const std::vector<KnowledgeRecord>& records, std::int64_t id) {
  for (const auto& r : records)
    if (r.case_id == id) return r;
  throw ValidationError("--case: no record with case_id " + std::to_string(id));
}

fs::path out_dir(const Options& o) {
  fs::path dir(o.out);
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("missing artifact " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

EditEnv make_run_env(const Lab& lab, const Options& o) {
  DeltaOptConfig d;
  d.seed = o.seed;
  return make_env(lab.model, lab.tokenizer, d);
}

RunConfig run_config(const Options& o) {
  RunConfig cfg;
  cfg.policy = LayerPolicy::parse(o.policy);
  cfg.n_edits = o.n;
  cfg.p_fraction = o.p_fraction;
  cfg.seed = o.seed;
  if (!o.checkpoints.empty()) cfg.checkpoints = {o.checkpoints.begin(), o.checkpoints.end()};
  cfg.oracle_values = o.oracle_values;
  cfg.threads = o.threads;
  cfg.stop_after = o.stop_after;
  cfg.validate();
  return cfg;
}

// Renders every CSV in a run directory into its SVG sibling.
void emit_plots(const fs::path& dir) {
  if (fs::exists(dir / "trace.csv")) {
    const std::string csv = read_text(dir / "trace.csv");
    const CsvTable t = parse_csv(csv);
    int layers = 0;
    for (std::size_t r = 0; r < t.rows.size(); ++r) layers = std::max(layers, static_cast<int>(t.number(r, "layer")) + 1);
    for (int l = 0; l < layers; ++l)
      write_text(dir / ("norm_layer" + std::to_string(l) + ".svg"),
                 norm_trace_svg(csv, l, "W_proj norm, layer " + std::to_string(l)));
  }
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() != ".csv") continue;
    fs::path svg = entry.path();
    svg.replace_extension(".svg");
    if (name.rfind("heatmap_", 0) == 0) write_text(svg, heatmap_svg(read_text(entry.path()), name));
    else if (name == "sweep.csv") write_text(svg, sweep_svg(read_text(entry.path()), "single-edit layer sweep"));
    else if (name == "cma.csv") write_text(svg, cma_svg(read_text(entry.path()), "indirect effects"));
  }
}

int cmd_train_toy(const Options& o) {
  const fs::path dir = out_dir(o);
  if (o.kind == "toy") {
    const ToyKb kb = make_toy_kb(o.seed);
    const Tokenizer tok = toy_tokenizer(kb);
    TrainConfig tc;
    tc.seed = o.seed;
    TrainReport rep;
    const ModelF m = train_toy_kb(toy_model_config(tok), kb, tok, tc, &rep);
    save_weights(m, dir / "model.st");
    tok.save(dir);
    save_records(kb.records(o.seed), dir / "dataset.jsonl");
    save_records(kb.held_out_records(o.seed), dir / "held_out.jsonl");
    std::cout << "trained " << rep.epochs << " epochs, loss " << rep.final_loss << "\n";
  } else if (o.kind == "flash" || o.kind == "planted") {
    const SyntheticSpec spec = o.kind == "flash" ? flash_spec(o.seed, o.n_flash) : planted_pattern_spec(o.seed, 2);
    const SyntheticLab lab = make_synthetic(spec);
    save_weights(lab.model, dir / "model.st");
    lab.tokenizer.save(dir);
    save_records(lab.records, dir / "dataset.jsonl");
    json ids = json::array();
    for (auto id : lab.flash_ids) ids.push_back(id);
    write_text(dir / "planted.json", json{{"flash_case_ids", ids}}.dump(2) + "\n");
    std::cout << "built " << o.kind << " lab with " << lab.records.size() << " facts\n";
  } else {
    throw ValidationError("--kind: expected toy, flash or planted");
  }
  std::cout << "wrote " << dir.string() << "\n";
  return 0;
}

int cmd_edit(const Options& o) {
  Lab lab = load_lab(o.model);
  const auto records = load_dataset(o.dataset);
  const KnowledgeRecord& rec = find_case(records, o.case_id);
  const EditEnv env = make_run_env(lab, o);
  const ModelF before = lab.model;
  const EditReceipt e = edit(lab.model, rec.request(), LayerPolicy::parse(o.policy), env);
  const fs::path dir = out_dir(o);
  write_text(dir / "receipt.json", receipt_to_json(e));
  save_weights(lab.model, dir / "edited.st");
  std::cout << "layer " << e.layer << " success " << e.edit_success << " |dW|_F " << e.update_frobenius << "\n";
  return 0;
}

int cmd_select_layer(const Options& o) {
  Lab lab = load_lab(o.model);
  const auto records = load_dataset(o.dataset);
  const EditEnv env = make_run_env(lab, o);
  const LayerScoreProfile prof = score_profile(lab.model, find_case(records, o.case_id).request(), env, WeightNorm::frobenius, o.threads);
  std::ostringstream csv;
  write_profile_csv(prof, csv);
  fs::path path(o.out);
  if (path.extension() != ".csv") path = out_dir(o) / "profile.csv";
  else if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text(path, csv.str());
  std::cout << "wise layer " << prof.chosen << " -> " << path.string() << "\n";
  return 0;
}

int cmd_sweep(const Options& o) {
  Lab lab = load_lab(o.model);
  const auto records = load_dataset(o.dataset);
  const EditEnv env = make_run_env(lab, o);
  const auto rows = layer_sweep(lab.model, find_case(records, o.case_id).request(), env, o.threads);
  std::ostringstream csv;
  write_sweep_csv(rows, csv);
  const fs::path dir = out_dir(o);
  write_text(dir / "sweep.csv", csv.str());
  emit_plots(dir);
  return 0;
}

int cmd_toxicity(const Options& o) {
  Lab lab = load_lab(o.model);
  const auto records = load_dataset(o.dataset);
  const KnowledgeRecord& rec = find_case(records, o.case_id);
  const EditEnv env = make_run_env(lab, o);
  const ModelF before = lab.model;
  const EditRequest req = rec.request();
  const EditReceipt e = edit(lab.model, req, LayerPolicy::parse(o.policy), env);
  const EditReceipt r = rollback(lab.model, req, e, env, o.oracle_values ? RollbackMode::oracle : RollbackMode::optimize);
  const fs::path dir = out_dir(o);
  std::ostringstream csv;
  csv << "layer,toxicity_norm,baseline_norm\n";
  csv.precision(10);
  for (const auto& t : toxicity_of(before, lab.model)) csv << t.layer << ',' << t.norm << ',' << t.baseline_norm << '\n';
  write_text(dir / "toxicity.csv", csv.str());
  std::cout << "edit layer " << e.layer << ", rollback success " << r.rollback_success.value_or(false) << "\n"
            << csv.str();
  return 0;
}

int cmd_cma(const Options& o) {
  Lab lab = load_lab(o.model);
  const auto records = load_dataset(o.dataset);
  const KnowledgeRecord& rec = find_case(records, o.case_id);
  const PromptContext ctx = subject_context(lab.tokenizer, rec.prompt, rec.subject);
  CmaInput in;
  in.record_id = std::to_string(rec.case_id);
  in.prompt = ctx.tokens;
  in.subject_begin = static_cast<int>(ctx.subject_begin);
  in.subject_end = static_cast<int>(ctx.subject_pos) + 1;
  in.target = target_tokens(lab.tokenizer, rec.target_true);
  CmaOptions opt;
  opt.seed = o.seed;
  opt.threads = o.threads;
  const CmaReport rep = run_cma(lab.model, in, opt);
  std::ostringstream csv;
  write_cma_csv(rep, csv);
  const fs::path dir = out_dir(o);
  write_text(dir / "cma.csv", csv.str());
  emit_plots(dir);
  std::cout << "p_clean " << rep.p_clean << " p_corrupt " << rep.p_corrupt << " peak mlp layer "
            << peak_layer(rep, SiteKind::mlp_out) << "\n";
  return 0;
}

int cmd_filter_flash(const Options& o) {
  Lab lab = load_lab(o.model);
  const auto records = filter_known(lab.model, lab.tokenizer, load_dataset(o.dataset));
  RunConfig cfg = run_config(o);
  const auto steps = screen_cases(lab.model, lab.tokenizer, records, cfg);
  const FlashSplit split = flash_split(case_outcomes(steps), o.tau);
  const fs::path dir = out_dir(o);
  std::ostringstream csv;
  csv.precision(10);
  csv << "case_id,rollback_success_rate,update_norm_ratio,flagged\n";
  for (const auto& v : split.verdicts)
    csv << v.case_id << ',' << v.rollback_success_rate << ',' << v.update_norm_ratio << ',' << (v.flagged ? 1 : 0) << '\n';
  write_text(dir / "flash_verdicts.csv", csv.str());
  std::vector<KnowledgeRecord> flash, buildup;
  const std::set<std::int64_t> flagged(split.flash.begin(), split.flash.end());
  for (const auto& r : records) (flagged.count(r.case_id) ? flash : buildup).push_back(r);
  save_records(flash, dir / "flash.jsonl");
  save_records(buildup, dir / "buildup.jsonl");
  std::cout << "flash cases:";
  for (auto id : split.flash) std::cout << ' ' << id;
  std::cout << "\n" << buildup.size() << " records kept\n";
  return 0;
}

int cmd_lifelong(const Options& o) {
  Lab lab = load_lab(o.model);
  const auto known = filter_known(lab.model, lab.tokenizer, load_dataset(o.dataset));
  const RunConfig cfg = run_config(o);
  const auto [p, q] = split_pq(known, cfg.p_fraction, cfg.seed);
  const fs::path dir = out_dir(o);
  const std::string canonical = cfg.canonical();
  const std::string config_hash = bytes_checksum({canonical.begin(), canonical.end()});
  const std::string model_sum = file_checksum(o.model);
  const std::string data_sum = file_checksum(o.dataset);

  const fs::path manifest_path = dir / "manifest.json";
  json manifest;
  if (fs::exists(manifest_path) && fs::exists(dir / "log.jsonl")) {
    manifest = json::parse(read_text(manifest_path));
    if (manifest.value("model_checksum", "") != model_sum || manifest.value("dataset_checksum", "") != data_sum ||
        manifest.value("config_hash", "") != config_hash)
      throw ValidationError("resume: manifest checksums do not match this model, dataset and config");
  } else {
    manifest = {{"run_id", "run-" + config_hash},
                {"config_hash", config_hash},
                {"model_checksum", model_sum},
                {"dataset_checksum", data_sum},
                {"seed", cfg.seed},
                {"tool_version", kVersion},
                {"started", utc_now()}};
  }
  write_text(manifest_path, manifest.dump(2) + "\n");
  std::cerr << "# effective config\n" << canonical << "\n";

  const RunResult res = run_lifelong(lab.model, lab.tokenizer, p, q, cfg, dir / "log.jsonl", manifest["run_id"]);
  std::ostringstream trace;
  res.trace.write_csv(trace);
  write_text(dir / "trace.csv", trace.str());
  for (int cp : res.trace.recorded_checkpoints()) {
    for (int l = 0; l < lab.model.config.n_layers; ++l) {
      std::ostringstream csv, svg;
      export_heatmap(res.trace, cp, l, csv, svg);
      write_text(dir / ("heatmap_step" + std::to_string(cp) + "_layer" + std::to_string(l) + ".csv"), csv.str());
    }
  }
  emit_plots(dir);
  if (!res.complete) {
    std::cout << "stopped after " << res.steps.size() << " steps; rerun to resume\n";
    return 0;
  }
  const std::string report = report_json(res.metrics, config_hash);
  write_text(dir / "report.json", report);
  manifest["finished"] = utc_now();
  write_text(manifest_path, manifest.dump(2) + "\n");
  std::cout << report;
  return 0;
}

int cmd_report(const Options& o) {
  const fs::path dir(o.out);
  if (!fs::is_directory(dir)) throw ValidationError("--out: not a run directory: " + dir.string());
  emit_plots(dir);
  if (fs::exists(dir / "report.json")) std::cout << read_text(dir / "report.json");
  else std::cout << "no report.json yet; plots refreshed\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lifelong knowledge editing lab"};
  app.set_version_flag("--version", kVersion);
  app.set_config("--config", "", "key = value config file; [section] names are ignored");
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--model", o.model, "model container (.st); BPE vocab.json/merges.txt beside it");
    sub->add_option("--dataset", o.dataset, "records, JSON lines or array");
    sub->add_option("--seed", o.seed, "root seed");
    sub->add_option("--out", o.out, "output directory")->envname("WILKE_OUT");
    sub->add_option("--threads", o.threads, "worker threads")->envname("WILKE_THREADS")->check(CLI::PositiveNumber);
    sub->add_option("--policy", o.policy, "fixed:<l>, wilke, ablate:{delta|act|norm}");
  };
  auto add_case = [&](CLI::App* sub) { sub->add_option("--case", o.case_id, "case_id of the record")->required(); };

  std::map<std::string, std::function<int(const Options&)>> handlers;
  auto sub = [&](const std::string& name, const std::string& help, std::function<int(const Options&)> fn) {
    CLI::App* s = app.add_subcommand(name, help);
    add_common(s);
    handlers[name] = std::move(fn);
    return s;
  };

  add_case(sub("edit", "edit one record and write its receipt", cmd_edit));
  add_case(sub("select-layer", "per-layer a, d, w and score for one record", cmd_select_layer));
  add_case(sub("sweep", "edit one record at every layer, one fresh copy each", cmd_sweep));
  add_case(sub("cma", "causal mediation grids for one record", cmd_cma));
  auto* tox = sub("toxicity", "edit plus rollback of one record; per-layer residue", cmd_toxicity);
  add_case(tox);
  tox->add_flag("--oracle-values", o.oracle_values, "roll back with the captured pre-edit value");
  auto* life = sub("lifelong", "two-stage lifelong run with metrics and traces", cmd_lifelong);
  life->add_option("--n", o.n, "number of edits (-1 = all of P)");
  life->add_option("--checkpoints", o.checkpoints, "steps whose accumulated dW is kept");
  life->add_flag("--oracle-values", o.oracle_values, "roll back with the captured pre-edit value");
  life->add_option("--stop-after", o.stop_after, "stop after this many steps; rerun resumes");
  life->add_option("--p-fraction", o.p_fraction, "share of known records edited; the rest is Q");
  auto* flash = sub("filter-flash", "screen every record, flag flash cases", cmd_filter_flash);
  flash->add_option("--tau", o.tau, "update-norm ratio threshold")->check(CLI::PositiveNumber);
  auto* train = sub("train-toy", "train the toy model or build a synthetic lab", cmd_train_toy);
  train->add_option("--kind", o.kind, "toy, flash or planted");
  train->add_option("--n-flash", o.n_flash, "planted flash facts (flash kind)");
  sub("report", "re-render plots of a run directory and print its report", cmd_report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    std::cerr << app.help();
    return 1;
  }
  try {
    for (const auto& [name, fn] : handlers)
      if (app.got_subcommand(name)) return fn(o);
    return 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
