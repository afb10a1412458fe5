#include "decoysh/cli.hpp"

#include <CLI11.hpp>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>
#include <pthread.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "decoysh/config.hpp"
#include "decoysh/eval_harness.hpp"

namespace decoysh {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::string listen;
  std::string backend;
  std::string script;
  std::string corpus;
  std::string out;
  std::string labeler = "rule";
  std::string rules;
  std::string annotations;
  std::string variant;
  std::uint64_t seed = 0;
  int parallel = 1;
  bool dry_run = false;
  bool keep_duplicates = false;
  bool verbose = false;
  std::vector<std::string> inputs;
};

struct Manifest {
  std::string command;
  std::vector<std::string> argv;
  std::string config_digest;
  std::string profile_digest;
  std::string backend;
  Timestamp started_at;
  std::vector<fs::path> outputs;
  json details = json::object();
};

Timestamp wall_now() { return std::chrono::time_point_cast<std::chrono::milliseconds>(std::chrono::system_clock::now()); }

void write_manifest(const fs::path& file, const Manifest& m) {
  json outputs = json::array();
  for (const auto& p : m.outputs) outputs.push_back(p.string());
  json j = {{"command", m.command},
            {"argv", m.argv},
            {"config_digest", m.config_digest},
            {"profile_digest", m.profile_digest},
            {"backend", m.backend},
            {"started_at", format_timestamp(m.started_at)},
            {"finished_at", format_timestamp(wall_now())},
            {"outputs", outputs},
            {"details", m.details}};
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out || !(out << j.dump(2) << '\n')) throw std::runtime_error("cannot write " + file.string());
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out || !(out << text) || !out.flush()) throw std::runtime_error("cannot write " + file.string());
}

void setup_logging(bool verbose) {
  auto logger = spdlog::get("decoysh");
  if (!logger) logger = spdlog::stderr_color_mt("decoysh");
  spdlog::set_default_logger(logger);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);
}

/// Config file plus command-line overrides.
AppConfig resolve_config(const Options& o) {
  AppConfig c = o.config.empty() ? default_config() : load_config(o.config);
  if (!o.backend.empty()) {
    if (o.backend == "live") {
      c.backend = BackendKind::Live;
    } else if (o.backend == "scripted") {
      c.backend = BackendKind::Scripted;
    } else {
      throw ConfigError("--backend: expected live or scripted");
    }
  }
  if (!o.script.empty()) c.script = fs::path(o.script);
  if (!o.listen.empty()) {
    if (o.listen.rfind(':') == std::string::npos) throw ConfigError("--listen: expected host:port");
    c.transports.front().listen_address = o.listen;
  }
  return c;
}

Manifest start_manifest(const std::string& command, const std::vector<std::string>& args) {
  Manifest m;
  m.command = command;
  m.argv.assign(args.begin() + 1, args.end());
  m.started_at = wall_now();
  return m;
}

void describe(Manifest& m, const AppConfig& c) {
  m.config_digest = c.digest;
  m.profile_digest = profile_digest(c.profile);
  m.backend = std::string(to_string(c.backend));
}

void require_inputs(const std::vector<std::string>& files, const char* what) {
  if (files.empty()) throw InputError(std::string(what) + ": no input files given");
  for (const auto& f : files) {
    if (!fs::exists(f)) throw InputError(f + ": no such file");
  }
}

// ---------------------------------------------------------------------------

int cmd_serve(const Options& o, const std::vector<std::string>& args) {
  AppConfig c = resolve_config(o);
  if (o.dry_run) {
    std::cout << render_system_text(c.profile, wall_now());
    return kExitOk;
  }
  auto gateway = make_gateway(c);

  // Signals go to the waiting thread only; block before any thread starts.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  auto manifest = start_manifest("serve", args);
  describe(manifest, c);
  fs::path manifest_file;
  if (c.ledger.rotation == JsonlSink::Rotation::PerDay) {
    fs::create_directories(c.ledger.path);
    manifest_file = c.ledger.path / "manifest.json";
  } else {
    if (c.ledger.path.has_parent_path()) fs::create_directories(c.ledger.path.parent_path());
    manifest_file = c.ledger.path;
    manifest_file += ".manifest.json";
  }
  auto sink = std::make_shared<JsonlSink>(c.ledger.path, c.ledger.rotation, c.ledger.durable);
  auto engine = std::make_shared<Engine>(std::make_shared<const HoneypotProfile>(c.profile), gateway, sink, c.engine);

  std::optional<SshHostKey> key;
  for (const auto& t : c.transports) {
    if (t.kind == TransportKind::SshServer && !key) {
      key = c.host_key_seed ? SshHostKey::load_or_create(*c.host_key_seed) : SshHostKey::generate();
    }
  }
  HoneypotServer server(c.transports, engine, key, o.seed);
  server.start();
  auto ports = server.ports();
  for (std::size_t i = 0; i < c.transports.size(); ++i) {
    spdlog::info("listening on {} ({}), port {}", c.transports[i].listen_address,
                 c.transports[i].kind == TransportKind::SshServer ? "ssh" : "plain_tcp", ports[i]);
  }
  // Machine-readable readiness line for supervisors and tests.
  std::cout << "ready";
  for (auto p : ports) std::cout << ' ' << p;
  std::cout << std::endl;

  int sig = 0;
  sigwait(&signals, &sig);
  spdlog::info("signal {} received, shutting down", sig);
  server.stop();

  manifest.outputs = sink->files();
  manifest.details = {{"sessions", server.sessions_started()}, {"ledger_write_failures", engine->sink_failures()}};
  write_manifest(manifest_file, manifest);
  return kExitOk;
}

int cmd_ingest(const Options& o, const std::vector<std::string>& args) {
  require_inputs(o.inputs, "ingest");
  if (o.out.empty()) throw InputError("--out: required");
  std::vector<fs::path> files(o.inputs.begin(), o.inputs.end());
  auto manifest = start_manifest("ingest", args);
  auto result = ingest_cowrie_files(files);
  DedupeResult deduped;
  if (o.keep_duplicates) {
    deduped.corpus = result.corpus;
    deduped.before = deduped.after = result.corpus.sessions.size();
  } else {
    deduped = dedupe_corpus(result.corpus);
  }
  fs::path out(o.out);
  fs::create_directories(out);
  save_corpus(out / "corpus.json", deduped.corpus);
  json summary = to_json(result.summary);
  summary["duplicates_removed"] = deduped.removed();
  summary["sessions_after_dedupe"] = deduped.after;
  summary["commands_after_dedupe"] = deduped.corpus.command_count();
  write_text(out / "ingest_summary.json", summary.dump(2) + "\n");
  manifest.outputs = {out / "corpus.json", out / "ingest_summary.json"};
  manifest.details = summary;
  write_manifest(out / "manifest.json", manifest);
  std::cout << summary.dump(2) << '\n';
  return kExitOk;
}

int cmd_replay(const Options& o, const std::vector<std::string>& args) {
  if (o.corpus.empty()) throw InputError("--corpus: required");
  if (o.out.empty()) throw InputError("--out: required");
  if (!fs::exists(o.corpus)) throw InputError(o.corpus + ": no such file");
  Options local = o;
  local.listen.clear();  // --listen here selects the TCP path, not the served address
  AppConfig c = resolve_config(local);
  auto corpus = load_corpus(o.corpus);
  auto gateway = make_gateway(c);
  auto profile = std::make_shared<const HoneypotProfile>(c.profile);
  auto manifest = start_manifest("replay", args);
  describe(manifest, c);

  ReplayOptions ro;
  ro.seed = o.seed;
  ro.parallel = o.parallel;
  ro.binding = c.transports.front();
  fs::path out(o.out);
  fs::create_directories(out);
  const fs::path transcript = out / "transcript.jsonl";

  std::vector<SessionRecord> records;
  std::vector<std::string> errors;
  std::size_t resumed = 0;
  if (!o.listen.empty()) {
    // Through a real listener, one session at a time.
    TransportBinding binding = c.transports.front();
    binding.kind = TransportKind::PlainTcpLine;
    binding.listen_address = o.listen;
    fs::remove(transcript);
    {
      auto sink = std::make_shared<JsonlSink>(transcript, JsonlSink::Rotation::PerRun, true);
      auto engine = std::make_shared<Engine>(profile, gateway, sink, c.engine,
                                             stepped_clock_factory(ro.clock_start, ro.clock_step));
      HoneypotServer server({binding}, engine, std::nullopt, o.seed);
      server.start();
      const auto port = server.ports().front();
      const auto host = binding.listen_address.substr(0, binding.listen_address.rfind(':'));
      const auto prompt = render_shell_prompt(binding.shell_prompt_template, c.profile);
      for (std::size_t i = 0; i < corpus.sessions.size(); ++i) {
        try {
          drive_tcp_session(host.empty() ? "127.0.0.1" : host, port, corpus.sessions[i].commands, prompt);
        } catch (const std::exception& e) {
          errors.push_back("session " + std::to_string(i + 1) + ": " + e.what());
        }
        server.wait_idle();
      }
      server.stop();
    }
    records = load_transcripts({transcript}, true).records;
  } else {
    ro.out_dir = out;
    auto run = replay(corpus, profile, gateway, c.engine, ro);
    records = std::move(run.records);
    errors = std::move(run.errors);
    resumed = run.resumed;
    write_records(transcript, records);
  }

  std::size_t turns = 0;
  for (const auto& r : records) turns += r.turns.size();
  manifest.outputs = {transcript};
  if (o.listen.empty()) manifest.outputs.push_back(out / "sessions");
  manifest.details = {{"sessions", records.size()}, {"turns", turns}, {"resumed", resumed}, {"errors", errors},
                      {"transport", o.listen.empty() ? "in_process" : "plain_tcp"}};
  write_manifest(out / "manifest.json", manifest);
  for (const auto& e : errors) spdlog::error("{}", e);
  spdlog::info("replayed {} sessions, {} turns into {}", records.size(), turns, transcript.string());
  return errors.empty() ? kExitOk : kExitRuntime;
}

std::vector<fs::path> transcript_files(const std::vector<std::string>& inputs) {
  std::vector<fs::path> files;
  for (const auto& in : inputs) {
    fs::path p(in);
    if (!fs::exists(p)) throw InputError(in + ": no such file or directory");
    if (!fs::is_directory(p)) {
      files.push_back(p);
    } else if (fs::exists(p / "transcript.jsonl")) {
      files.push_back(p / "transcript.jsonl");
    } else {
      std::vector<fs::path> found;
      for (const auto& e : fs::directory_iterator(p)) {
        if (e.is_regular_file() && e.path().extension() == ".jsonl") found.push_back(e.path());
      }
      std::sort(found.begin(), found.end());
      if (found.empty()) throw InputError(in + ": no .jsonl transcripts");
      files.insert(files.end(), found.begin(), found.end());
    }
  }
  return files;
}

int cmd_score(const Options& o, const std::vector<std::string>& args) {
  if (o.inputs.empty()) throw InputError("score: give transcript files or replay directories");
  if (o.out.empty()) throw InputError("--out: required");
  auto manifest = start_manifest("score", args);
  AppConfig c = resolve_config(o);
  describe(manifest, c);
  auto load = load_transcripts(transcript_files(o.inputs), true);

  std::unique_ptr<Labeler> labeler;
  if (o.labeler == "rule") {
    if (o.rules.empty()) throw InputError("--rules: the rule labeler needs a golden-rule file");
    labeler = std::make_unique<RuleLabeler>(RuleLabeler::load(o.rules, c.profile.settings.software.hostname));
  } else if (o.labeler == "manual") {
    if (o.annotations.empty()) throw InputError("--annotations: the manual labeler needs an annotation CSV");
    labeler = std::make_unique<ManualLabeler>(ManualLabeler::load(o.annotations));
  } else if (o.labeler == "judge") {
    labeler = std::make_unique<JudgeLabeler>(make_gateway(c), std::make_shared<const HoneypotProfile>(c.profile));
  } else {
    throw ConfigError("--labeler: expected rule, manual or judge");
  }

  auto labels = classify(load.records, *labeler);
  auto report = score(labels, load.records, o.variant.empty() ? "engine" : o.variant);

  fs::path out(o.out);
  fs::create_directories(out);
  write_text(out / "score.json", to_json(report).dump(2) + "\n");
  std::string csv = "session_id,turn_index,class,succeeded,logic_compliant,source\n";
  for (std::size_t i = 0; i < load.records.size(); ++i) {
    for (std::size_t k = 0; k < load.records[i].turns.size(); ++k) {
      const auto& l = labels.labels[i][k];
      csv += load.records[i].session_id + "," + std::to_string(load.records[i].turns[k].index) + ",";
      if (l) {
        csv += std::string(to_string(l->turn_class())) + "," + (l->succeeded ? "true" : "false") + "," +
               (l->logic_compliant ? "true" : "false") + "," + l->source + "\n";
      } else {
        csv += "unlabeled,,,\n";
      }
    }
  }
  write_text(out / "labels.csv", csv);
  manifest.outputs = {out / "score.json", out / "labels.csv"};
  manifest.details = {{"labeler", labels.labeler},
                      {"labeler_metadata", labels.labeler_metadata},
                      {"sessions", load.records.size()},
                      {"unlabeled", report.deception.counts.unlabeled}};
  write_manifest(out / "manifest.json", manifest);
  if (report.deception.counts.unlabeled > 0) {
    spdlog::warn("{} turns have no label and are excluded from the deception metrics",
                 report.deception.counts.unlabeled);
  }
  return kExitOk;
}

int cmd_report(const Options& o, const std::vector<std::string>& args) {
  if (o.inputs.empty()) throw InputError("report: give score.json files or score directories");
  if (o.out.empty()) throw InputError("--out: required");
  auto manifest = start_manifest("report", args);
  std::vector<ScoreReport> reports;
  for (const auto& in : o.inputs) {
    fs::path p(in);
    if (fs::is_directory(p)) p /= "score.json";
    if (!fs::exists(p)) throw InputError(p.string() + ": no such file");
    std::ifstream f(p);
    json j;
    try {
      j = json::parse(f);
    } catch (const json::parse_error& e) {
      throw InputError(p.string() + ": " + e.what());
    }
    try {
      reports.push_back(score_report_from_json(j));
    } catch (const InputError& e) {
      throw InputError(p.string() + ": " + e.what());
    }
  }
  manifest.outputs = emit_report(reports, o.out);
  json variants = json::array();
  for (const auto& r : reports) variants.push_back(r.variant);
  manifest.details = {{"variants", variants}};
  write_manifest(fs::path(o.out) / "manifest.json", manifest);
  std::cout << render_markdown(reports);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"LLM-backed terminal honeypot: serve, ingest, replay, score, report"};
  app.require_subcommand(1);
  Options o;
  app.add_flag("-v,--verbose", o.verbose, "Debug logging");

  auto* serve = app.add_subcommand("serve", "Run the honeypot until SIGINT/SIGTERM");
  serve->add_option("--config", o.config, "JSON config file");
  serve->add_option("--listen", o.listen, "Override the first transport's host:port");
  serve->add_option("--backend", o.backend, "live or scripted")->check(CLI::IsMember({"live", "scripted"}));
  serve->add_option("--script", o.script, "Scripted backend reply file");
  serve->add_option("--seed", o.seed, "Session id seed");
  serve->add_flag("--dry-run", o.dry_run, "Print the static prompt sections and exit");

  auto* ingest = app.add_subcommand("ingest", "Turn Cowrie JSON logs into a replay corpus");
  ingest->add_option("logs", o.inputs, "Cowrie JSON-lines files")->required();
  ingest->add_option("--out", o.out, "Output directory")->required();
  ingest->add_flag("--keep-duplicates", o.keep_duplicates, "Skip exact-sequence deduplication");

  auto* replay_cmd = app.add_subcommand("replay", "Replay a corpus through the engine");
  replay_cmd->add_option("--config", o.config, "JSON config file");
  replay_cmd->add_option("--corpus", o.corpus, "corpus.json from ingest")->required();
  replay_cmd->add_option("--out", o.out, "Output directory")->required();
  replay_cmd->add_option("--backend", o.backend, "live or scripted")->check(CLI::IsMember({"live", "scripted"}));
  replay_cmd->add_option("--script", o.script, "Scripted backend reply file");
  replay_cmd->add_option("--seed", o.seed, "Session id seed");
  replay_cmd->add_option("--parallel", o.parallel, "Concurrent sessions (in-process only)")->check(CLI::Range(1, 64));
  replay_cmd->add_option("--listen", o.listen, "Replay over a plain TCP listener bound here, e.g. 127.0.0.1:0");

  auto* score_cmd = app.add_subcommand("score", "Label turns and compute the metrics");
  score_cmd->add_option("transcripts", o.inputs, "Transcript files or replay directories")->required();
  score_cmd->add_option("--out", o.out, "Output directory")->required();
  score_cmd->add_option("--labeler", o.labeler, "rule, manual or judge")
      ->check(CLI::IsMember({"rule", "manual", "judge"}));
  score_cmd->add_option("--rules", o.rules, "Golden-rule JSON for the rule labeler");
  score_cmd->add_option("--annotations", o.annotations, "Annotation CSV for the manual labeler");
  score_cmd->add_option("--config", o.config, "JSON config file (profile, judge gateway)");
  score_cmd->add_option("--backend", o.backend, "Judge backend: live or scripted")
      ->check(CLI::IsMember({"live", "scripted"}));
  score_cmd->add_option("--script", o.script, "Scripted judge reply file");
  score_cmd->add_option("--variant", o.variant, "Name of this engine variant in reports");

  auto* report_cmd = app.add_subcommand("report", "Render one or more score files side by side");
  report_cmd->add_option("scores", o.inputs, "score.json files or score directories")->required();
  report_cmd->add_option("--out", o.out, "Output directory")->required();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }
  setup_logging(o.verbose);

  try {
    if (*serve) return cmd_serve(o, args);
    if (*ingest) return cmd_ingest(o, args);
    if (*replay_cmd) return cmd_replay(o, args);
    if (*score_cmd) return cmd_score(o, args);
    if (*report_cmd) return cmd_report(o, args);
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const InputError& e) {
    spdlog::error("input error: {}", e.what());
    return kExitInput;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace decoysh
