#include "colongpt/cli.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "colongpt/budget.hpp"
#include "colongpt/checkpoint.hpp"
#include "colongpt/fixtures.hpp"
#include "colongpt/parity.hpp"
#include "colongpt/pipeline.hpp"

namespace colongpt::cli {
namespace {

namespace fs = std::filesystem;

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 1;
  std::string out = "out";
  std::string dump_parity;
};

pipeline::RunConfig load(const Globals& g) {
  pipeline::RunConfig cfg;
  if (!g.config.empty()) cfg = pipeline::load_config(g.config);
  if (g.seed) {
    cfg.data.seed = *g.seed;
    cfg.model.seed = *g.seed;
    cfg.train.seed = *g.seed;
  }
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw UsageError("cannot write '" + path.string() + "'");
  os << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw UsageError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ---- fixtures ------------------------------------------------------------------

struct FixtureArgs {
  std::size_t images = 500;
  std::size_t categories = 6;
  double boxed = 0.6;
  std::size_t negatives = 0;
  int size = 56;
};

void cmd_fixtures(const Globals& g, const FixtureArgs& a, std::ostream& out) {
  fixtures::FixtureSpec spec;
  spec.seed = g.seed.value_or(1);
  spec.n_images = a.images;
  spec.n_categories = a.categories;
  spec.boxed_fraction = a.boxed;
  spec.n_negatives = a.negatives;
  spec.width = spec.height = a.size;
  const fixtures::FixtureSet set = fixtures::generate(spec);
  const fs::path dir = g.out;
  fixtures::write(set, dir);

  pipeline::RunConfig cfg;
  cfg.data.taxonomy = "taxonomy.json";
  cfg.data.manifests = {"manifest.jsonl"};
  cfg.data.image_root = ".";
  cfg.data.seed = spec.seed;
  cfg.model.encoder.height = cfg.model.encoder.width = static_cast<std::size_t>(a.size);
  cfg.validate();
  write_text(dir / "config.json", pipeline::config_to_json(cfg).dump(2) + "\n");

  std::size_t boxed = 0;
  for (const auto& r : set.manifest.records) boxed += r.bbox ? 1 : 0;
  out << "fixtures: " << set.manifest.records.size() << " records (" << spec.n_images << " positive, "
      << spec.n_negatives << " negative, " << boxed << " boxed) in " << dir.string() << "\n";
}

// ---- compile -------------------------------------------------------------------

void cmd_compile(const Globals& g, const std::vector<std::string>& tasks, bool no_captions, std::ostream& out) {
  const pipeline::RunConfig cfg = load(g);
  const pipeline::LoadedData data = pipeline::load_data(cfg.data, g.threads);
  const instruct::TemplateBank bank =
      cfg.data.templates ? instruct::TemplateBank::read(*cfg.data.templates) : instruct::TemplateBank::defaults();
  instruct::CompileConfig cc;
  cc.seed = cfg.data.seed;
  cc.threads = g.threads;
  cc.include_captions = !no_captions;
  if (!tasks.empty()) {
    cc.tasks.clear();
    for (const auto& t : tasks) {
      try {
        cc.tasks.insert(taxonomy::parse_task(t));
      } catch (const ParseError& e) {
        throw UsageError(std::string("--tasks: ") + e.what());
      }
    }
  }
  const instruct::StubCaptionProvider provider;
  const instruct::CompileResult res = instruct::compile(data.manifests, data.taxonomy, bank, provider, cc);
  for (const auto& e : res.errors) out << "warning: " << e << "\n";

  const fs::path dir = fs::path(g.out) / "instructions";
  pipeline::write_split_files(res.records, dir);

  const taxonomy::CountSummary& s = res.summary;
  nlohmann::ordered_json j;
  j["records"] = res.records.size();
  for (taxonomy::Split sp : taxonomy::kSplits) {
    auto& e = j["splits"][std::string(taxonomy::to_string(sp))];
    const auto& c = s.splits[static_cast<std::size_t>(sp)];
    e["positives"] = c.positives;
    e["negatives"] = c.negatives;
    e["boxed_positives"] = c.boxed_positives;
    e["dialogues"] = s.dialogues_in(sp);
  }
  const taxonomy::CountSummary expected = taxonomy::CountSummary::from_split_counts(s.splits);
  const bool all_tasks = cc.tasks.size() == taxonomy::kTasks.size() && cc.include_captions;
  const bool identity = res.errors.empty() && res.records.size() == expected.dialogue_total();
  j["identity"] = {{"positives", s.positives()},
                   {"boxed_positives", s.boxed_positives()},
                   {"expected_dialogues", expected.dialogue_total()},
                   {"dialogues", res.records.size()},
                   {"holds", all_tasks ? nlohmann::json(identity) : nlohmann::json(nullptr)}};
  write_text(fs::path(g.out) / "compile_summary.json", j.dump(2) + "\n");

  out << "compiled " << res.records.size() << " dialogues into " << dir.string() << "\n";
  for (taxonomy::Split sp : taxonomy::kSplits) {
    const auto& c = s.splits[static_cast<std::size_t>(sp)];
    out << "  " << taxonomy::to_string(sp) << ": positives " << c.positives << ", negatives " << c.negatives
        << ", boxed " << c.boxed_positives << ", dialogues " << s.dialogues_in(sp) << "\n";
  }
  if (all_tasks) {
    out << "dialogue identity 2*" << s.positives() << " + 2*" << s.boxed_positives() << " = "
        << expected.dialogue_total() << ": " << (identity ? "holds" : "VIOLATED") << "\n";
  }
}

// ---- train ---------------------------------------------------------------------

struct TrainArgs {
  std::string stage;
  bool from_scratch = false;
  std::string init;
  std::string instructions;
  std::optional<std::size_t> max_steps;
};

void cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out) {
  const train::Stage stage = train::parse_stage(a.stage);
  const pipeline::RunConfig cfg = load(g);
  const fs::path out_dir = g.out;
  const fs::path inst = a.instructions.empty() ? out_dir / "instructions" : fs::path(a.instructions);
  const auto records = pipeline::read_split_files(inst);
  const auto corpus = stage == train::Stage::kPreAlign ? instruct::pre_align_corpus(records)
                                                       : instruct::sft_corpus(records);
  if (corpus.empty()) throw UsageError("no " + std::string(train::to_string(stage)) + " dialogues in train/val");

  lm::Bundle bundle;
  if (stage == train::Stage::kPreAlign) {
    bundle = pipeline::init_bundle(cfg.model);
  } else {
    const fs::path init = a.init.empty() ? out_dir / "pre_align.ckpt" : fs::path(a.init);
    if (fs::exists(init)) {
      bundle = pipeline::load_bundle(cfg.model, init);
    } else if (a.from_scratch) {
      bundle = pipeline::init_bundle(cfg.model);
    } else {
      throw UsageError("sft needs a pre_align checkpoint ('" + init.string() + "' not found); pass --from-scratch "
                       "to start from initial weights");
    }
    train::attach_lora(bundle, cfg.model.lora, cfg.model.seed);
  }

  train::TrainPlan plan = cfg.train.plan(stage);
  if (a.max_steps) plan.max_steps = *a.max_steps;
  const auto examples = pipeline::build_examples(corpus, cfg.data.image_root, bundle);
  const auto result = train::train(plan, examples, bundle);

  const std::string name(train::to_string(stage));
  checkpoint::write(bundle.params, out_dir / (name + ".ckpt"));
  train::write_log(result.log, out_dir / (name + ".log.jsonl"));
  nlohmann::ordered_json summary;
  summary["stage"] = name;
  summary["steps"] = result.log.size();
  summary["updates"] = result.updates;
  summary["examples"] = examples.size();
  summary["initial_lr"] = result.log.front().lr;
  summary["final_loss"] = result.log.back().loss;
  for (const auto& [grp, h] : result.hashes_after) {
    auto before = result.hashes_before.find(grp);
    summary["groups"][grp] = {
        {"before", before == result.hashes_before.end() ? "" : checkpoint::hex(before->second)},
        {"after", checkpoint::hex(h)},
        {"changed", before == result.hashes_before.end() || before->second != h}};
  }
  write_text(out_dir / (name + ".summary.json"), summary.dump(2) + "\n");

  out << name << ": " << result.log.size() << " steps, " << result.updates << " updates, loss "
      << result.log.front().loss << " -> " << result.log.back().loss << "\n";
  for (const auto& [grp, h] : result.hashes_after) {
    auto before = result.hashes_before.find(grp);
    const bool changed = before == result.hashes_before.end() || before->second != h;
    out << "  " << grp << " " << checkpoint::hex(h) << (changed ? " changed" : " unchanged") << "\n";
  }
}

// ---- eval ----------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string instructions;
  bool gold_echo = false;
  std::string label;
};

void cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& out) {
  const pipeline::RunConfig cfg = load(g);
  const fs::path out_dir = g.out;
  const fs::path inst = a.instructions.empty() ? out_dir / "instructions" : fs::path(a.instructions);
  std::vector<instruct::InstructionRecord> records;
  for (auto& r : pipeline::read_split_files(inst)) {
    if (cfg.eval.tasks.count(r.task)) records.push_back(std::move(r));
  }

  std::map<std::string, std::pair<int, int>> frames;
  if (!cfg.data.manifests.empty() && !cfg.data.taxonomy.empty()) {
    const pipeline::LoadedData data = pipeline::load_data(cfg.data, g.threads);
    for (const auto& m : data.manifests) {
      for (const auto& r : m.records) frames[r.dataset + "/" + r.image_id] = {r.width, r.height};
    }
  }
  const eval::FrameLookup frame = [&](const instruct::InstructionRecord& r) {
    auto it = frames.find(pipeline::image_key(r.image));
    return it == frames.end() ? std::pair<int, int>{999, 999} : it->second;
  };

  const std::string label = !a.label.empty() ? a.label : a.gold_echo ? "gold-echo" : cfg.eval.label;
  eval::BenchmarkRun run;
  if (a.gold_echo) {
    run = eval::run_benchmark(eval::GoldEchoModel{}, records, label, frame, g.threads);
  } else {
    const fs::path ckpt = a.checkpoint.empty() ? out_dir / "sft.ckpt" : fs::path(a.checkpoint);
    if (!fs::exists(ckpt)) throw UsageError("checkpoint not found: '" + ckpt.string() + "'");
    const lm::Bundle bundle = pipeline::load_bundle(cfg.model, ckpt);
    const pipeline::BundleModel model(bundle, records, cfg.data.image_root, cfg.eval.max_new_tokens);
    run = eval::run_benchmark(model, records, label, frame, g.threads);
  }

  const fs::path dir = out_dir / "eval";
  eval::write_predictions(run.predictions, dir / "predictions.jsonl");
  const eval::BenchmarkReport reports[] = {run.report};
  const std::string table = eval::emit_report(reports, eval::Format::kTable);
  write_text(dir / "report.txt", table);
  write_text(dir / "report.csv", eval::emit_report(reports, eval::Format::kCsv));
  write_text(dir / "report.json", eval::report_to_json(run.report) + "\n");
  out << table;
  for (std::size_t c = 0; c < 2; ++c) {
    if (const auto& m = run.report.caption_keyword[c]) {
      out << "caption keyword diagnostic (" << (c == 0 ? "seen" : "unseen") << "): " << eval::format_percent(m->value)
          << " of " << m->samples << "\n";
    }
  }
}

// ---- report --------------------------------------------------------------------

void cmd_report(const Globals& g, const std::string& what, const std::vector<std::string>& files,
                const std::string& format, std::ostream& out) {
  if (what == "tokens") {
    out << budget::render_token_budget(budget::token_budget());
  } else if (what == "lora-grid") {
    const pipeline::RunConfig cfg = load(g);
    out << budget::render_lora_grid(budget::lora_grid(cfg.model.lm));
  } else if (what == "models") {
    if (files.empty()) throw UsageError("report models needs one or more report.json files");
    std::vector<eval::BenchmarkReport> reports;
    for (const auto& f : files) reports.push_back(eval::report_from_json(read_text(f)));
    out << eval::emit_report(reports, eval::parse_format(format));
  } else {
    throw UsageError("unknown report '" + what + "' (expected tokens, lora-grid or models)");
  }
}

int exit_code(ErrorKind k) { return static_cast<int>(k); }

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multimodal colonoscopy toolkit: fixtures, instruction compiler, training, benchmark"};
  app.require_subcommand(0, 1);
  Globals g;
  app.add_option("--config", g.config, "run configuration (JSON)");
  app.add_option("--seed", g.seed, "seed override for every section");
  app.add_option("--threads", g.threads, "worker cap")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory");
  app.add_option("--dump-parity", g.dump_parity, "write operator parity dump to DIR");

  FixtureArgs fx;
  auto* fixtures_cmd = app.add_subcommand("fixtures", "generate synthetic images, taxonomy and manifest");
  fixtures_cmd->add_option("--images", fx.images, "positive images");
  fixtures_cmd->add_option("--categories", fx.categories, "positive categories");
  fixtures_cmd->add_option("--boxed-fraction", fx.boxed, "fraction of positives with a box");
  fixtures_cmd->add_option("--negatives", fx.negatives, "negative images");
  fixtures_cmd->add_option("--image-size", fx.size, "square image side in pixels");

  std::vector<std::string> tasks;
  bool no_captions = false;
  auto* compile_cmd = app.add_subcommand("compile", "render instruction dialogues per split");
  compile_cmd->add_option("--tasks", tasks, "subset of CLS REG REC CAP")->delimiter(',');
  compile_cmd->add_flag("--no-captions", no_captions, "skip caption dialogues");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "run one training stage");
  train_cmd->add_option("stage", ta.stage, "pre_align or sft")->required();
  train_cmd->add_flag("--from-scratch", ta.from_scratch, "allow sft without a pre_align checkpoint");
  train_cmd->add_option("--init", ta.init, "checkpoint to start from (sft)");
  train_cmd->add_option("--instructions", ta.instructions, "compiled instruction directory");
  train_cmd->add_option("--max-steps", ta.max_steps, "override the step budget");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "benchmark a checkpoint on seen (val) and unseen (test) dialogues");
  eval_cmd->add_option("--checkpoint", ea.checkpoint, "model checkpoint (default OUT/sft.ckpt)");
  eval_cmd->add_option("--instructions", ea.instructions, "compiled instruction directory");
  eval_cmd->add_flag("--gold-echo", ea.gold_echo, "answer with the gold response (debug)");
  eval_cmd->add_option("--label", ea.label, "model label in the report");

  std::string what;
  std::vector<std::string> files;
  std::string format = "table";
  auto* report_cmd = app.add_subcommand("report", "tokens | lora-grid | models FILE...");
  report_cmd->add_option("what", what, "report kind")->required();
  report_cmd->add_option("files", files, "report.json files (models)");
  report_cmd->add_option("--format", format, "table or csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, er;
    const int rc = app.exit(e, o, er);
    out << o.str();
    err << er.str();
    return rc == 0 ? 0 : 1;
  }

  if (app.get_subcommands().empty() && g.dump_parity.empty()) {
    err << app.help();
    err << "error: a subcommand is required\n";
    return 1;
  }

  try {
    if (!g.dump_parity.empty()) parity::write(parity::build(g.seed.value_or(0)), g.dump_parity);
    if (*fixtures_cmd) cmd_fixtures(g, fx, out);
    if (*compile_cmd) cmd_compile(g, tasks, no_captions, out);
    if (*train_cmd) cmd_train(g, ta, out);
    if (*eval_cmd) cmd_eval(g, ea, out);
    if (*report_cmd) cmd_report(g, what, files, format, out);
  } catch (const DivergenceError& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(ErrorKind::Numeric);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(ErrorKind::Data);
  }
  return 0;
}

}  // namespace colongpt::cli
