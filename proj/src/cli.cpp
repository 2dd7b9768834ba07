#include "lmm/cli.hpp"

#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "lmm/cohort_eval.hpp"
#include "lmm/model.hpp"
#include "lmm/montecarlo.hpp"
#include "lmm/plot.hpp"
#include "lmm/sequencer.hpp"
#include "lmm/service.hpp"
#include "lmm/synth.hpp"
#include "lmm/vocab.hpp"

namespace lmm::cli {

namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void fail_line(std::string_view code, const std::string& message) {
  nlohmann::ordered_json j;
  j["error"] = code;
  j["message"] = message;
  std::cerr << j.dump() << '\n';
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError:
    case ErrorCode::UnknownPredicate:
    case ErrorCode::UnknownCondition:
      return kExitUsage;
    case ErrorCode::NonFiniteLoss:
      return kExitNumeric;
    default:
      return kExitData;
  }
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::UnreadableFile, "cannot create directory " + dir + ": " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::vector<synth::PatientTimeline> read_claims(const std::string& path, const std::string& format,
                                                const std::string& rejects_path) {
  auto result = synth::ingest_claims(path, synth::parse_claims_format(format));
  if (!rejects_path.empty()) write_file(rejects_path, synth::rejects_csv(result.rejects));
  if (!result.rejects.empty()) {
    std::cerr << "skipped " << result.rejects.size() << " malformed claim lines\n";
  }
  return std::move(result.timelines);
}

UnknownPolicy parse_policy(const std::string& s) {
  if (s == "strict") return UnknownPolicy::Strict;
  if (s == "lenient") return UnknownPolicy::Lenient;
  throw Error(ErrorCode::ConfigError, "policy must be strict or lenient");
}

void write_files(const std::string& dir, const plot::Files& files) {
  for (const auto& [name, contents] : files) write_file(join(dir, name), contents);
}

// ---------------------------------------------------------------------------

struct GenData {
  std::size_t n = 5000;
  std::uint64_t seed = 0;
  std::string spec_path, spec_out, out, format = "csv", id_prefix = "P";
  unsigned threads = 0;

  void run() const {
    const auto spec = spec_path.empty() ? synth::default_spec() : synth::spec_from_json(read_file(spec_path));
    spec.validate();
    const auto cohort = synth::generate_cohort(spec, n, seed, id_prefix, threads);
    synth::write_claims(cohort.timelines, out, synth::parse_claims_format(format));
    if (!spec_out.empty()) write_file(spec_out, synth::spec_to_json(spec));
  }
};

struct BuildVocab {
  std::string claims, format = "csv", out, rejects;

  void run() const {
    const auto timelines = read_claims(claims, format, rejects);
    Vocabulary::build(synth::collect_codes(timelines)).save(out);
  }
};

struct Sequence {
  std::string claims, format = "csv", vocab, out, policy = "strict", rejects, cutoff;

  void run() const {
    const auto v = Vocabulary::load(vocab);
    const auto timelines = read_claims(claims, format, rejects);
    const auto pol = parse_policy(policy);
    std::vector<seq::TokenSequence> seqs;
    seqs.reserve(timelines.size());
    for (const auto& tl : timelines) {
      if (cutoff.empty()) {
        seq::LinearizeOptions opt;
        opt.policy = pol;
        seqs.push_back(seq::linearize(tl, v, opt));
      } else {
        seqs.push_back(seq::split_at(tl, parse_date(cutoff), v, pol).prompt);
      }
    }
    write_file(out, seq::serialize_sequences(seqs, v));
  }
};

struct Train {
  std::string sequences, vocab, out, history, config_path;
  model::ModelConfig config;
  bool quiet = false;

  void run() {
    const auto v = Vocabulary::load(vocab);
    if (!config_path.empty()) {
      const auto keep = config;
      config = model::ModelConfig::from_json(read_file(config_path));
      config.seed = keep.seed;
      config.threads = keep.threads;
    }
    config.vocab_size = static_cast<int>(v.size());
    const auto seqs = seq::parse_sequences(read_file(sequences), v);
    std::vector<model::TrainSequence> corpus;
    corpus.reserve(seqs.size());
    const std::size_t max_len = static_cast<std::size_t>(config.context_len) + 1;
    for (const auto& s : seqs) {
      auto t = s.tokens.size() > max_len ? seq::truncate(s, max_len, v) : s;
      corpus.push_back({s.patient_id, std::move(t.tokens)});
    }
    model::ProgressFn progress;
    if (!quiet) {
      progress = [](const model::LossRecord& r) {
        if (std::isnan(r.val_loss)) return;
        std::cerr << "step " << r.step << " train " << format_double(r.train_loss) << " val "
                  << format_double(r.val_loss) << '\n';
      };
    }
    const auto result = model::train(corpus, config, progress);
    model::save_checkpoint(result.params, out);
    if (!history.empty()) write_file(history, model::history_csv(result.history));
  }
};

struct Simulate {
  std::string checkpoint, vocab, sequences, patient, out;
  int n_futures = 64, top_k = 0;
  double horizon_days = 365, temperature = 1.0;
  std::uint64_t seed = 0;
  std::vector<std::string> predicates;
  std::string bucketing = "monthly";
  bool verbose = false;
  unsigned threads = 0;

  void run() const {
    const auto v = Vocabulary::load(vocab);
    const auto params = model::load_checkpoint(checkpoint);
    const auto seqs = seq::parse_sequences(read_file(sequences), v);
    if (seqs.empty()) throw Error(ErrorCode::EmptyInput, "no sequences in " + sequences);
    const seq::TokenSequence* prompt = &seqs.front();
    if (!patient.empty()) {
      prompt = nullptr;
      for (const auto& s : seqs) {
        if (s.patient_id == patient) prompt = &s;
      }
      if (!prompt) throw Error(ErrorCode::FormatError, "patient '" + patient + "' not in " + sequences);
    }
    mc::SimulationRequest req;
    req.prompt = *prompt;
    req.n_futures = n_futures;
    req.horizon_days = horizon_days;
    req.temperature = temperature;
    req.top_k = top_k;
    req.base_seed = seed;
    req.predicates = predicates;
    req.bucketing = mc::parse_bucketing(bucketing);
    req.threads = threads;
    const mc::TransformerModel model(params);
    const auto body = mc::bundle_to_json(mc::simulate_futures(model, v, req), v, verbose) + "\n";
    if (out.empty()) std::cout << body;
    else write_file(out, body);
  }
};

struct SimFlags {
  int n_futures = 64, top_k = 0;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  unsigned threads = 0;

  cohort::SimulationDefaults defaults() const { return {n_futures, temperature, top_k, seed, threads}; }
};

void add_sim_flags(CLI::App* app, SimFlags& f) {
  app->add_option("--n-futures", f.n_futures, "Futures per patient")->check(CLI::PositiveNumber);
  app->add_option("--temperature", f.temperature, "Sampling temperature")->check(CLI::NonNegativeNumber);
  app->add_option("--top-k", f.top_k, "Keep the k most likely tokens (0 = all)")->check(CLI::NonNegativeNumber);
  app->add_option("--seed", f.seed, "Base seed; per-patient seeds are derived from it");
  app->add_option("--threads", f.threads, "Worker threads (0 = all cores)");
}

struct EvalCost {
  std::string checkpoint, vocab, claims, format = "csv", out_dir, policy = "lenient";
  std::optional<double> censor;
  int baseline_year = 2017, target_year = 2018;
  SimFlags sim;

  void run() const {
    const auto v = Vocabulary::load(vocab);
    const auto params = model::load_checkpoint(checkpoint);
    const auto timelines = read_claims(claims, format, "");
    cohort::CostEvalOptions opt;
    opt.criteria.baseline_year = baseline_year;
    opt.criteria.target_year = target_year;
    opt.sim = sim.defaults();
    opt.censor_threshold = censor;
    opt.policy = parse_policy(policy);
    const mc::TransformerModel model(params);
    const auto predictor = cohort::monte_carlo_cost_predictor(model, v, opt.sim);
    const auto result = cohort::run_cost_eval(predictor, v, timelines, opt);
    ensure_dir(out_dir);
    write_file(join(out_dir, "cost_report.json"), cohort::cost_report_json(result) + "\n");
    write_file(join(out_dir, "predictions.csv"), cohort::predictions_csv(result.predictions));
    std::vector<metrics::MetricReport> reports{result.lmm};
    if (result.lmm_censored) reports.push_back(*result.lmm_censored);
    reports.push_back(result.constant_mean);
    write_file(join(out_dir, "table1.csv"), metrics::table1_csv(reports));
    write_file(join(out_dir, "slices.csv"), metrics::slices_csv(result.lmm.slices));
  }
};

struct EvalChronic {
  std::string checkpoint, vocab, claims, format = "csv", out_dir, map_path, policy = "lenient";
  int baseline_year = 2017, target_year = 2018, window_months = 6;
  SimFlags sim;

  void run() const {
    const auto v = Vocabulary::load(vocab);
    const auto params = model::load_checkpoint(checkpoint);
    const auto timelines = read_claims(claims, format, "");
    const auto map = map_path.empty() ? cohort::ConditionMap::packaged() : cohort::ConditionMap::load(map_path);
    cohort::ConditionEvalOptions opt;
    opt.baseline_year = baseline_year;
    opt.target_year = target_year;
    opt.window_months = window_months;
    opt.sim = sim.defaults();
    opt.policy = parse_policy(policy);
    const mc::TransformerModel model(params);
    const auto window = cohort::target_window(target_year, window_months);
    const auto scorer = cohort::monte_carlo_condition_scorer(model, v, map, opt.sim, window.days());
    const auto result = cohort::run_condition_eval(scorer, v, timelines, map, opt);
    ensure_dir(out_dir);
    write_file(join(out_dir, "condition_report.json"), cohort::condition_report_json(result) + "\n");
    write_file(join(out_dir, "conditions.csv"), cohort::condition_rows_csv(result));
  }
};

struct Serve {
  std::string config_path, checkpoint, vocab, host;
  int port = -1;

  void run() const {
    service::ServiceConfig cfg = config_path.empty() ? service::ServiceConfig{} : service::load_config(config_path);
    if (!checkpoint.empty()) cfg.checkpoint_path = checkpoint;
    if (!vocab.empty()) cfg.vocab_path = vocab;
    if (!host.empty()) cfg.host = host;
    if (port >= 0) cfg.port = port;
    cfg.validate();
    const auto svc = service::load_service(cfg);
    if (!svc->degraded_reason().empty()) std::cerr << "degraded: " << svc->degraded_reason() << '\n';
    service::HttpServer server(*svc);
    std::cerr << "listening on " << cfg.host << ':' << cfg.port << '\n';
    server.listen(cfg.host, cfg.port);
  }
};

struct Plot {
  std::string predictions, conditions, history, out_dir;

  void run() const {
    if (predictions.empty() && conditions.empty() && history.empty()) {
      throw UsageError("plot needs at least one of --predictions, --conditions, --history");
    }
    ensure_dir(out_dir);
    if (!predictions.empty()) write_files(out_dir, plot::cost_figures(plot::parse_predictions_csv(read_file(predictions))));
    if (!conditions.empty()) {
      write_files(out_dir, plot::condition_figures(plot::parse_condition_rows_csv(read_file(conditions))));
    }
    if (!history.empty()) write_files(out_dir, plot::loss_figures(plot::parse_history_csv(read_file(history))));
  }
};

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Claims sequence model: data generation, training, simulation and evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "lmm 0.1.0");

  GenData gen;
  auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic claims cohort");
  c_gen->add_option("--n", gen.n, "Number of patients")->check(CLI::PositiveNumber);
  c_gen->add_option("--seed", gen.seed, "Random seed");
  c_gen->add_option("--spec", gen.spec_path, "Generator spec JSON (default: built-in 8-state spec)");
  c_gen->add_option("--write-spec", gen.spec_out, "Also write the spec used as JSON");
  c_gen->add_option("--out", gen.out, "Claims output file")->required();
  c_gen->add_option("--format", gen.format, "csv or jsonl");
  c_gen->add_option("--id-prefix", gen.id_prefix, "Patient id prefix");
  c_gen->add_option("--threads", gen.threads, "Worker threads (0 = all cores)");

  BuildVocab bv;
  auto* c_bv = app.add_subcommand("build-vocab", "Build the token vocabulary from claims");
  c_bv->add_option("--claims", bv.claims, "Claims file")->required();
  c_bv->add_option("--format", bv.format, "csv or jsonl");
  c_bv->add_option("--out", bv.out, "Vocabulary output file")->required();
  c_bv->add_option("--rejects", bv.rejects, "Write rejected claim lines as CSV");

  Sequence sq;
  auto* c_sq = app.add_subcommand("sequence", "Linearize claims into token sequences");
  c_sq->add_option("--claims", sq.claims, "Claims file")->required();
  c_sq->add_option("--format", sq.format, "csv or jsonl");
  c_sq->add_option("--vocab", sq.vocab, "Vocabulary file")->required();
  c_sq->add_option("--out", sq.out, "Sequence output file")->required();
  c_sq->add_option("--policy", sq.policy, "Unknown codes: strict or lenient");
  c_sq->add_option("--cutoff", sq.cutoff, "Keep history up to this date (YYYY-MM-DD) as prompts");
  c_sq->add_option("--rejects", sq.rejects, "Write rejected claim lines as CSV");

  Train tr;
  auto* c_tr = app.add_subcommand("train", "Train the transformer on token sequences");
  c_tr->add_option("--sequences", tr.sequences, "Sequence file")->required();
  c_tr->add_option("--vocab", tr.vocab, "Vocabulary file")->required();
  c_tr->add_option("--out", tr.out, "Checkpoint output file")->required();
  c_tr->add_option("--history", tr.history, "Write the loss history as CSV");
  c_tr->add_option("--config", tr.config_path, "Model config JSON; flags --seed and --threads still apply");
  c_tr->add_option("--context", tr.config.context_len, "Context length");
  c_tr->add_option("--d-model", tr.config.d_model, "Embedding width");
  c_tr->add_option("--heads", tr.config.n_heads, "Attention heads");
  c_tr->add_option("--layers", tr.config.n_layers, "Transformer blocks");
  c_tr->add_option("--steps", tr.config.n_steps, "Optimizer steps");
  c_tr->add_option("--batch", tr.config.batch_size, "Sequences per step");
  c_tr->add_option("--lr", tr.config.learning_rate, "Peak learning rate");
  c_tr->add_option("--weight-decay", tr.config.weight_decay, "AdamW weight decay");
  c_tr->add_option("--eval-every", tr.config.eval_every, "Validation interval in steps");
  c_tr->add_option("--seed", tr.config.seed, "Seed for initialization, batching and the data split");
  c_tr->add_option("--threads", tr.config.threads, "Worker threads (0 = all cores)");
  c_tr->add_flag("--quiet", tr.quiet, "No progress output");

  Simulate sm;
  auto* c_sm = app.add_subcommand("simulate", "Sample futures for one patient");
  c_sm->add_option("--checkpoint", sm.checkpoint, "Checkpoint file")->required();
  c_sm->add_option("--vocab", sm.vocab, "Vocabulary file")->required();
  c_sm->add_option("--sequences", sm.sequences, "Sequence file holding the prompt")->required();
  c_sm->add_option("--patient", sm.patient, "Patient id (default: first sequence)");
  c_sm->add_option("--n-futures", sm.n_futures, "Futures to sample")->check(CLI::PositiveNumber);
  c_sm->add_option("--horizon-days", sm.horizon_days, "Simulation horizon in days");
  c_sm->add_option("--temperature", sm.temperature, "Sampling temperature")->check(CLI::NonNegativeNumber);
  c_sm->add_option("--top-k", sm.top_k, "Keep the k most likely tokens (0 = all)")->check(CLI::NonNegativeNumber);
  c_sm->add_option("--seed", sm.seed, "Base seed");
  c_sm->add_option("--predicate", sm.predicates, "Event surface prefix to tabulate, e.g. DX:G20 (repeatable)");
  c_sm->add_option("--bucketing", sm.bucketing, "monthly or quarterly");
  c_sm->add_flag("--verbose", sm.verbose, "Include the sampled futures");
  c_sm->add_option("--out", sm.out, "Output JSON file (default: stdout)");
  c_sm->add_option("--threads", sm.threads, "Worker threads (0 = all cores)");

  EvalCost ec;
  auto* c_ec = app.add_subcommand("eval-cost", "Predict next-year cost on a filtered cohort");
  c_ec->add_option("--checkpoint", ec.checkpoint, "Checkpoint file")->required();
  c_ec->add_option("--vocab", ec.vocab, "Vocabulary file")->required();
  c_ec->add_option("--claims", ec.claims, "Claims file")->required();
  c_ec->add_option("--format", ec.format, "csv or jsonl");
  c_ec->add_option("--out-dir", ec.out_dir, "Output directory")->required();
  c_ec->add_option("--censor", ec.censor, "Also report metrics without predictions above this amount");
  c_ec->add_option("--baseline-year", ec.baseline_year, "Baseline (prompt) year");
  c_ec->add_option("--target-year", ec.target_year, "Target (prediction) year");
  c_ec->add_option("--policy", ec.policy, "Unknown codes: strict or lenient");
  add_sim_flags(c_ec, ec.sim);

  EvalChronic ch;
  auto* c_ch = app.add_subcommand("eval-chronic", "Score chronic-condition onset in the target window");
  c_ch->add_option("--checkpoint", ch.checkpoint, "Checkpoint file")->required();
  c_ch->add_option("--vocab", ch.vocab, "Vocabulary file")->required();
  c_ch->add_option("--claims", ch.claims, "Claims file")->required();
  c_ch->add_option("--format", ch.format, "csv or jsonl");
  c_ch->add_option("--out-dir", ch.out_dir, "Output directory")->required();
  c_ch->add_option("--map", ch.map_path, "Condition map CSV (default: packaged map)");
  c_ch->add_option("--baseline-year", ch.baseline_year, "Baseline (prompt) year");
  c_ch->add_option("--target-year", ch.target_year, "Target year");
  c_ch->add_option("--window-months", ch.window_months, "Label window length from January of the target year")
      ->check(CLI::Range(1, 12));
  c_ch->add_option("--policy", ch.policy, "Unknown codes: strict or lenient");
  add_sim_flags(c_ch, ch.sim);

  Serve sv;
  auto* c_sv = app.add_subcommand("serve", "Run the HTTP simulation service");
  c_sv->add_option("--config", sv.config_path, "Service config file (key = value lines)");
  c_sv->add_option("--checkpoint", sv.checkpoint, "Checkpoint file (overrides config)");
  c_sv->add_option("--vocab", sv.vocab, "Vocabulary file (overrides config)");
  c_sv->add_option("--host", sv.host, "Bind address (overrides config)");
  c_sv->add_option("--port", sv.port, "Port (overrides config)");

  Plot pl;
  auto* c_pl = app.add_subcommand("plot", "Render SVG and CSV figures from evaluation outputs");
  c_pl->add_option("--predictions", pl.predictions, "predictions.csv from eval-cost");
  c_pl->add_option("--conditions", pl.conditions, "conditions.csv from eval-chronic");
  c_pl->add_option("--history", pl.history, "Loss history CSV from train");
  c_pl->add_option("--out-dir", pl.out_dir, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_line("UsageError", e.what());
    return kExitUsage;
  }

  try {
    if (c_gen->parsed()) gen.run();
    else if (c_bv->parsed()) bv.run();
    else if (c_sq->parsed()) sq.run();
    else if (c_tr->parsed()) tr.run();
    else if (c_sm->parsed()) sm.run();
    else if (c_ec->parsed()) ec.run();
    else if (c_ch->parsed()) ch.run();
    else if (c_sv->parsed()) sv.run();
    else if (c_pl->parsed()) pl.run();
  } catch (const UsageError& e) {
    fail_line("UsageError", e.what());
    return kExitUsage;
  } catch (const Error& e) {
    fail_line(to_string(e.code()), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    fail_line("InternalError", e.what());
    return kExitData;
  }
  return 0;
}

int run(const std::vector<std::string>& args) {
  std::vector<std::string> copy = args;
  std::vector<char*> argv;
  for (auto& a : copy) argv.push_back(a.data());
  argv.push_back(nullptr);
  return run(static_cast<int>(copy.size()), argv.data());
}

}  // namespace lmm::cli
