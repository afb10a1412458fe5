#include "decoysh/eval_harness.hpp"

#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>
#include <thread>

namespace decoysh {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Replay

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path session_file(const fs::path& out_dir, std::size_t index) {
  char name[32];
  std::snprintf(name, sizeof name, "%04zu.jsonl", index + 1);
  return out_dir / "sessions" / name;
}

std::optional<SessionRecord> load_finished(const fs::path& file) {
  if (!fs::exists(file)) return std::nullopt;
  auto load = parse_transcript_text(read_file(file), true, file.string());
  if (load.records.size() != 1 || !load.records.front().ended_at) return std::nullopt;
  return std::move(load.records.front());
}

}  // namespace

ReplayRun replay(const ReplayCorpus& corpus, std::shared_ptr<const HoneypotProfile> profile,
                 std::shared_ptr<Gateway> gateway, const EngineConfig& engine_config, const ReplayOptions& options) {
  const std::size_t n = corpus.sessions.size();
  std::vector<std::string> ids;
  SessionIdGenerator gen(options.seed);
  for (std::size_t i = 0; i < n; ++i) ids.push_back(gen.next());

  if (options.out_dir) fs::create_directories(*options.out_dir / "sessions");

  std::vector<SessionRecord> records(n);
  std::vector<std::string> errors(n);
  std::atomic<std::size_t> resumed{0};
  std::atomic<std::size_t> next{0};

  auto run_one = [&](std::size_t i) {
    const auto& source = corpus.sessions[i];
    if (options.out_dir) {
      try {
        if (auto done = load_finished(session_file(*options.out_dir, i))) {
          records[i] = std::move(*done);
          ++resumed;
          return;
        }
      } catch (const std::exception& e) {
        spdlog::warn("replaying session {} again: {}", i + 1, e.what());
      }
    }
    Engine engine(profile, gateway, nullptr, engine_config,
                  stepped_clock_factory(options.clock_start, options.clock_step));
    ShellSession shell(engine, engine.open_session(ids[i], options.peer), options.binding);
    try {
      std::string reason = "eof";
      for (const auto& cmd : source.commands) {
        auto reply = shell.on_line(cmd);
        if (reply.close) {
          reason = reply.reason;
          break;
        }
      }
      shell.finish(reason);
      records[i] = shell.session().record;
      if (options.out_dir) {
        auto file = session_file(*options.out_dir, i);
        auto tmp = file;
        tmp += ".tmp";
        write_records(tmp, {records[i]});
        fs::rename(tmp, file);
      }
    } catch (const std::exception& e) {
      shell.finish("error");
      records[i] = shell.session().record;
      errors[i] = "session " + std::to_string(i + 1) + " (" + source.source_id + "): " + e.what();
    }
  };

  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) run_one(i);
  };
  const auto threads = static_cast<std::size_t>(std::clamp(options.parallel, 1, 64));
  if (threads == 1 || n < 2) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < std::min(threads, n); ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  ReplayRun run;
  run.records = std::move(records);
  run.resumed = resumed.load();
  for (auto& e : errors) {
    if (!e.empty()) run.errors.push_back(std::move(e));
  }
  return run;
}

std::string drive_tcp_session(const std::string& host, std::uint16_t port, const std::vector<std::string>& commands,
                              const std::string& prompt, std::chrono::milliseconds timeout) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res); rc != 0) {
    throw std::runtime_error("resolve " + host + ": " + gai_strerror(rc));
  }
  int fd = -1;
  for (auto* ai = res; ai && fd < 0; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd >= 0 && ::connect(fd, ai->ai_addr, ai->ai_addrlen) != 0) {
      ::close(fd);
      fd = -1;
    }
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw std::runtime_error("cannot connect to " + host + ":" + std::to_string(port));

  std::string received;
  bool eof = false;
  auto read_until = [&](auto done) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    char buf[4096];
    while (!done() && !eof) {
      auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) {
        ::close(fd);
        throw std::runtime_error("timed out waiting for the shell");
      }
      pollfd pfd{fd, POLLIN, 0};
      if (::poll(&pfd, 1, static_cast<int>(left.count())) <= 0) continue;
      ssize_t got = ::recv(fd, buf, sizeof buf, 0);
      if (got <= 0) {
        eof = true;
      } else {
        received.append(buf, static_cast<std::size_t>(got));
      }
    }
  };
  std::size_t mark = 0;  // bytes received before the last command was sent
  auto at_prompt = [&] { return received.size() > mark && received.ends_with(prompt); };
  auto send_line = [&](const std::string& line) {
    std::string data = line + "\n";
    std::string_view rest = data;
    while (!rest.empty()) {
      ssize_t n = ::send(fd, rest.data(), rest.size(), MSG_NOSIGNAL);
      if (n <= 0) {
        eof = true;
        return;
      }
      rest.remove_prefix(static_cast<std::size_t>(n));
    }
  };

  read_until(at_prompt);
  for (const auto& cmd : commands) {
    if (eof) break;
    mark = received.size();
    send_line(cmd);
    read_until(at_prompt);
  }
  if (!eof) {
    send_line("exit");
    read_until([] { return false; });
  }
  ::close(fd);
  return received;
}

// ---------------------------------------------------------------------------
// Labels

std::string_view to_string(TurnClass c) {
  switch (c) {
    case TurnClass::SALC: return "SALC";
    case TurnClass::SALNLC: return "SALNLC";
    case TurnClass::FALC: return "FALC";
    case TurnClass::FALNLC: return "FALNLC";
  }
  return "?";
}

TurnClass TurnLabel::turn_class() const {
  if (succeeded) return logic_compliant ? TurnClass::SALC : TurnClass::SALNLC;
  return logic_compliant ? TurnClass::FALC : TurnClass::FALNLC;
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool same_host(std::string_view seen, std::string_view expected) {
  if (seen == expected) return true;
  return seen.size() > expected.size() && seen.starts_with(expected) && seen[expected.size()] == '.';
}

}  // namespace

RuleLabeler::RuleLabeler(std::vector<GoldenRule> rules, std::string hostname, std::optional<TurnLabel> unmatched)
    : hostname_(std::move(hostname)), unmatched_(std::move(unmatched)) {
  for (auto& r : rules) {
    std::regex cmd(r.command, std::regex::ECMAScript);
    std::regex exp(r.expect, std::regex::ECMAScript);
    rules_.push_back({std::move(r), std::move(cmd), std::move(exp)});
  }
  if (unmatched_) unmatched_->source = "rule";
}

RuleLabeler RuleLabeler::load(const fs::path& file, std::string hostname) {
  json j;
  try {
    j = json::parse(read_file(file));
  } catch (const json::parse_error& e) {
    throw InputError(file.string() + ": " + e.what());
  }
  const json* rules = &j;
  std::optional<TurnLabel> unmatched;
  if (j.is_object()) {
    if (!j.contains("rules")) throw InputError(file.string() + ": missing key 'rules'");
    rules = &j.at("rules");
    if (j.contains("unmatched") && !j.at("unmatched").is_null()) {
      const auto& u = j.at("unmatched");
      if (!u.is_object() || !u.value("succeeded", json()).is_boolean() ||
          !u.value("logic_compliant", json()).is_boolean()) {
        throw InputError(file.string() + ": unmatched: expected {succeeded, logic_compliant} booleans");
      }
      unmatched = TurnLabel{u.at("succeeded").get<bool>(), u.at("logic_compliant").get<bool>(), "rule"};
    }
  }
  if (!rules->is_array()) throw InputError(file.string() + ": rules: expected an array");
  std::vector<GoldenRule> out;
  for (std::size_t i = 0; i < rules->size(); ++i) {
    const auto& r = (*rules)[i];
    const std::string where = file.string() + ": rules[" + std::to_string(i) + "]";
    if (!r.is_object() || !r.contains("command") || !r.at("command").is_string()) {
      throw InputError(where + ".command: expected a string");
    }
    GoldenRule g;
    g.command = r.at("command").get<std::string>();
    g.expect = r.value("expect", std::string{});
    if (r.contains("success") && !r.at("success").is_boolean()) throw InputError(where + ".success: expected a boolean");
    g.success = r.value("success", true);
    try {
      std::regex(g.command, std::regex::ECMAScript);
      std::regex(g.expect, std::regex::ECMAScript);
    } catch (const std::regex_error& e) {
      throw InputError(where + ": bad pattern: " + e.what());
    }
    out.push_back(std::move(g));
  }
  return RuleLabeler(std::move(out), std::move(hostname), std::move(unmatched));
}

bool RuleLabeler::looks_like_shell_error(std::string_view answer) {
  static const std::regex re(
      "command not found|permission denied|no such file or directory|operation not permitted|"
      "cannot (access|open|stat|create|remove)|invalid option|connection refused|"
      "could not resolve|unable to resolve|not a directory|is a directory|unrecognized option|"
      "must be run as root|are you root\\?|access denied",
      std::regex::ECMAScript | std::regex::icase);
  return std::regex_search(answer.begin(), answer.end(), re);
}

bool RuleLabeler::contradicts_hostname(std::string_view query, std::string_view answer) const {
  if (hostname_.empty()) return false;
  static const std::regex uname_re("^Linux ([A-Za-z0-9._-]+) [0-9]", std::regex::ECMAScript);
  static const std::regex prompt_re("[A-Za-z_][A-Za-z0-9_-]*@([A-Za-z0-9._-]+):", std::regex::ECMAScript);

  const auto q = trim(query);
  if (q == "hostname" || q == "cat /etc/hostname" || q == "uname -n") {
    auto first = trim(answer.substr(0, answer.find('\n')));
    if (!first.empty() && !same_host(first, hostname_)) return true;
  }
  std::size_t pos = 0;
  while (pos <= answer.size()) {
    auto nl = answer.find('\n', pos);
    auto line = answer.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    std::match_results<std::string_view::const_iterator> m;
    if (std::regex_search(line.begin(), line.end(), m, uname_re) &&
        !same_host(std::string_view(&*m[1].first, static_cast<std::size_t>(m[1].length())), hostname_)) {
      return true;
    }
    for (auto it = std::regex_iterator<std::string_view::const_iterator>(line.begin(), line.end(), prompt_re);
         it != std::regex_iterator<std::string_view::const_iterator>(); ++it) {
      const auto& g = (*it)[1];
      if (!same_host(std::string_view(&*g.first, static_cast<std::size_t>(g.length())), hostname_)) return true;
    }
    if (nl == std::string_view::npos) break;
    pos = nl + 1;
  }
  return false;
}

std::optional<TurnLabel> RuleLabeler::label(const SessionRecord&, const TurnRecord& turn) {
  // The fallback answer is an ordinary shell error.
  if (!turn.responded()) return TurnLabel{false, true, "rule"};
  const std::string& answer = *turn.answer;
  if (contradicts_hostname(turn.query, answer)) return TurnLabel{true, false, "rule"};
  for (const auto& r : rules_) {
    if (!std::regex_search(turn.query, r.command)) continue;
    if (std::regex_search(answer, r.expect)) return TurnLabel{r.rule.success, true, "rule"};
    if (looks_like_shell_error(answer)) return TurnLabel{false, true, "rule"};
    return TurnLabel{r.rule.success, false, "rule"};
  }
  if (looks_like_shell_error(answer)) return TurnLabel{false, true, "rule"};
  return unmatched_;
}

json RuleLabeler::metadata() const {
  json rules = json::array();
  for (const auto& r : rules_) rules.push_back({{"command", r.rule.command}, {"expect", r.rule.expect}, {"success", r.rule.success}});
  json j = {{"rules", rules.size()}, {"rules_sha256", sha256_hex(rules.dump())}, {"hostname", hostname_}};
  j["unmatched"] = unmatched_ ? json{{"succeeded", unmatched_->succeeded}, {"logic_compliant", unmatched_->logic_compliant}}
                              : json(nullptr);
  return j;
}

namespace {

std::optional<bool> parse_bool(std::string_view s) {
  std::string v(trim(s));
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
  if (v == "true" || v == "1" || v == "yes" || v == "y") return true;
  if (v == "false" || v == "0" || v == "no" || v == "n") return false;
  return std::nullopt;
}

}  // namespace

ManualLabeler ManualLabeler::parse(std::string_view csv, std::string_view name) {
  ManualLabeler out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  bool first = true;
  while (pos < csv.size()) {
    auto nl = csv.find('\n', pos);
    auto line = csv.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? csv.size() : nl + 1;
    ++line_no;
    line = trim(line);
    if (line.empty() || line.starts_with('#')) continue;
    std::vector<std::string_view> cols;
    std::size_t start = 0;
    while (true) {
      auto comma = line.find(',', start);
      cols.push_back(trim(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start)));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    const bool header = first && !cols.empty() && cols[0] == "session_id";
    first = false;
    if (header) continue;
    auto fail = [&](const std::string& msg) {
      throw InputError(std::string(name) + ":" + std::to_string(line_no) + ": " + msg);
    };
    if (cols.size() != 4) fail("expected 4 columns (session_id,turn_index,succeeded,logic_compliant)");
    if (cols[0].empty()) fail("empty session_id");
    int turn = 0;
    auto [p, ec] = std::from_chars(cols[1].data(), cols[1].data() + cols[1].size(), turn);
    if (ec != std::errc{} || p != cols[1].data() + cols[1].size() || turn < 1) fail("turn_index: expected a positive integer");
    auto succeeded = parse_bool(cols[2]);
    if (!succeeded) fail("succeeded: expected true/false");
    auto compliant = parse_bool(cols[3]);
    if (!compliant) fail("logic_compliant: expected true/false");
    auto key = std::make_pair(std::string(cols[0]), turn);
    if (out.rows_.count(key)) fail("duplicate label for " + key.first + " turn " + std::to_string(turn));
    out.rows_.emplace(std::move(key), TurnLabel{*succeeded, *compliant, "manual"});
  }
  return out;
}

ManualLabeler ManualLabeler::load(const fs::path& file) { return parse(read_file(file), file.string()); }

std::optional<TurnLabel> ManualLabeler::label(const SessionRecord& session, const TurnRecord& turn) {
  auto it = rows_.find({session.session_id, turn.index});
  if (it == rows_.end()) return std::nullopt;
  return it->second;
}

json ManualLabeler::metadata() const { return {{"rows", rows_.size()}}; }

const std::string_view kJudgeRubric =
    "You grade one exchange with a Linux terminal. You are shown the host description, the command an attacker "
    "typed and the terminal's output.\n"
    "Answer two questions.\n"
    "succeeded: would the attacker conclude that the command ran and did what they intended? Error messages, "
    "\"command not found\", permission errors and empty output for a command that should print something mean "
    "false.\n"
    "logic_compliant: is the output what a real host matching the description would print for this command, in "
    "format and content, including failures a real host would produce? Contradictions with the host description "
    "(hostname, OS, users, paths) mean false.\n"
    "Reply with only a JSON object: {\"succeeded\": true|false, \"logic_compliant\": true|false}";

JudgeLabeler::JudgeLabeler(std::shared_ptr<Gateway> gateway, std::shared_ptr<const HoneypotProfile> profile)
    : gateway_(std::move(gateway)), profile_(std::move(profile)) {
  if (!gateway_ || !profile_) throw std::invalid_argument("judge labeler needs a gateway and a profile");
}

ChatRequest JudgeLabeler::request_for(const HoneypotProfile& profile, const TurnRecord& turn) {
  const auto& sw = profile.settings.software;
  std::string user = "Host: " + sw.os_name + " " + sw.os_version + ", kernel " + sw.kernel + ", hostname " +
                     sw.hostname + ", logged in as " + sw.default_user + "\n";
  user += "Command:\n" + turn.query + "\n";
  user += "Output:\n" + (turn.answer ? *turn.answer : fallback_output(turn.query)) + "\n";
  return ChatRequest{std::string(kJudgeRubric), std::move(user), turn.query, 0};
}

std::optional<TurnLabel> JudgeLabeler::parse_reply(std::string_view reply) {
  auto open = reply.find('{');
  auto close = reply.rfind('}');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) return std::nullopt;
  auto j = json::parse(reply.substr(open, close - open + 1), nullptr, false);
  if (j.is_discarded() || !j.is_object()) return std::nullopt;
  auto s = j.find("succeeded");
  auto c = j.find("logic_compliant");
  if (s == j.end() || c == j.end() || !s->is_boolean() || !c->is_boolean()) return std::nullopt;
  return TurnLabel{s->get<bool>(), c->get<bool>(), "judge"};
}

std::optional<TurnLabel> JudgeLabeler::label(const SessionRecord&, const TurnRecord& turn) {
  auto reply = gateway_->complete(request_for(*profile_, turn));
  if (!reply) return std::nullopt;
  return parse_reply(*reply);
}

json JudgeLabeler::metadata() const {
  return {{"rubric_version", kJudgeRubricVersion},
          {"rubric_sha256", sha256_hex(kJudgeRubric)},
          {"model", gateway_->config().model_name},
          {"backend", gateway_->backend_kind()}};
}

LabelSet classify(const std::vector<SessionRecord>& records, Labeler& labeler) {
  LabelSet out;
  out.labeler = labeler.name();
  out.labeler_metadata = labeler.metadata();
  for (const auto& r : records) {
    auto& row = out.labels.emplace_back();
    for (const auto& t : r.turns) {
      auto l = labeler.label(r, t);
      if (l && !t.responded()) l->succeeded = false;
      row.push_back(std::move(l));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

std::optional<Rational> ratio(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return Rational(boost::multiprecision::cpp_int(num), boost::multiprecision::cpp_int(den));
}

}  // namespace

DeceptionReport score_deception(const ClassCounts& c) {
  DeceptionReport d;
  d.counts = c;
  d.accuracy = ratio(c.salc, c.salc + c.salnlc);
  d.temptation = ratio(c.salc, c.salc + c.falc);
  d.attack_success_rate = ratio(c.salc + c.salnlc, c.labeled());
  d.os_logic_compliance = ratio(c.salc + c.falc, c.labeled());
  return d;
}

std::size_t executed_length(const SessionRecord& record) {
  std::size_t n = 0;
  for (const auto& t : record.turns) {
    if (!t.responded()) break;
    ++n;
  }
  return n;
}

InteractionReport score_interaction(const std::vector<SessionRecord>& records) {
  InteractionReport r;
  std::uint64_t complete = 0;
  std::uint64_t executed = 0;
  Rational degree_sum = 0;
  for (const auto& s : records) {
    if (s.turns.empty()) continue;
    ++r.sessions;
    std::uint64_t responded = 0;
    for (const auto& t : s.turns) responded += t.responded() ? 1 : 0;
    r.commands += s.turns.size();
    r.responded += responded;
    if (responded == s.turns.size()) ++complete;
    executed += executed_length(s);
    degree_sum += *ratio(responded, s.turns.size());
  }
  r.full_session_response_rate = ratio(complete, r.sessions);
  r.command_response_rate = ratio(r.responded, r.commands);
  // mean(executed) / mean(total) over the same sessions
  r.mean_session_length_pct = ratio(executed, r.commands);
  if (r.sessions > 0) r.mean_interaction_degree_pct = degree_sum / Rational(boost::multiprecision::cpp_int(r.sessions));
  return r;
}

ScoreReport score(const LabelSet& labels, const std::vector<SessionRecord>& records, std::string variant) {
  if (labels.labels.size() != records.size()) {
    throw std::invalid_argument("labels cover " + std::to_string(labels.labels.size()) + " sessions, records " +
                                std::to_string(records.size()));
  }
  ClassCounts counts;
  std::map<std::string, TechniqueRow> techniques;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& turns = records[i].turns;
    if (labels.labels[i].size() != turns.size()) {
      throw std::invalid_argument("session " + records[i].session_id + ": " + std::to_string(labels.labels[i].size()) +
                                  " labels for " + std::to_string(turns.size()) + " turns");
    }
    for (std::size_t k = 0; k < turns.size(); ++k) {
      const auto& l = labels.labels[i][k];
      if (!l) {
        ++counts.unlabeled;
      } else {
        switch (l->turn_class()) {
          case TurnClass::SALC: ++counts.salc; break;
          case TurnClass::SALNLC: ++counts.salnlc; break;
          case TurnClass::FALC: ++counts.falc; break;
          case TurnClass::FALNLC: ++counts.falnlc; break;
        }
      }
      for (const auto& tag : turns[k].technique_tags) {
        auto& row = techniques[tag];
        row.technique = tag;
        ++row.commands;
        if (turns[k].responded()) ++row.responded;
      }
    }
  }
  ScoreReport report;
  report.variant = std::move(variant);
  report.labeler = labels.labeler;
  report.labeler_metadata = labels.labeler_metadata;
  report.deception = score_deception(counts);
  report.interaction = score_interaction(records);
  for (auto& [tag, row] : techniques) {
    row.response_rate = ratio(row.responded, row.commands);
    report.techniques.push_back(std::move(row));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json rational_json(const std::optional<Rational>& r) {
  if (!r) return nullptr;
  return {{"exact", r->str()}, {"value", r->convert_to<double>()}};
}

std::optional<Rational> rational_from(const json& j, const std::string& where) {
  if (j.is_null()) return std::nullopt;
  if (!j.is_object() || !j.contains("exact") || !j.at("exact").is_string()) {
    throw InputError(where + ": expected null or {exact, value}");
  }
  try {
    Rational r(j.at("exact").get<std::string>());
    if (r < 0 || r > 1) throw InputError(where + ": value outside [0,1]");
    return r;
  } catch (const std::runtime_error& e) {
    if (dynamic_cast<const InputError*>(&e)) throw;
    throw InputError(where + ": bad rational '" + j.at("exact").get<std::string>() + "'");
  }
}

std::uint64_t count_from(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_number_unsigned()) {
    throw InputError(where + "." + key + ": expected a non-negative integer");
  }
  return j.at(key).get<std::uint64_t>();
}

const json& object_at(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_object()) throw InputError(where + "." + key + ": expected an object");
  return j.at(key);
}

}  // namespace

json to_json(const ScoreReport& r) {
  const auto& c = r.deception.counts;
  json techniques = json::array();
  for (const auto& t : r.techniques) {
    techniques.push_back({{"technique", t.technique},
                          {"commands", t.commands},
                          {"responded", t.responded},
                          {"response_rate", rational_json(t.response_rate)}});
  }
  return {
      {"variant", r.variant},
      {"labeler", r.labeler},
      {"labeler_metadata", r.labeler_metadata},
      {"deception",
       {{"counts",
         {{"SALC", c.salc}, {"SALNLC", c.salnlc}, {"FALC", c.falc}, {"FALNLC", c.falnlc}, {"unlabeled", c.unlabeled}}},
        {"accuracy", rational_json(r.deception.accuracy)},
        {"temptation", rational_json(r.deception.temptation)},
        {"attack_success_rate", rational_json(r.deception.attack_success_rate)},
        {"os_logic_compliance", rational_json(r.deception.os_logic_compliance)}}},
      {"interaction",
       {{"sessions", r.interaction.sessions},
        {"commands", r.interaction.commands},
        {"responded", r.interaction.responded},
        {"full_session_response_rate", rational_json(r.interaction.full_session_response_rate)},
        {"command_response_rate", rational_json(r.interaction.command_response_rate)},
        {"mean_session_length_pct", rational_json(r.interaction.mean_session_length_pct)},
        {"mean_interaction_degree_pct", rational_json(r.interaction.mean_interaction_degree_pct)}}},
      {"techniques", techniques},
  };
}

ScoreReport score_report_from_json(const json& j) {
  if (!j.is_object()) throw InputError("score report: expected an object");
  ScoreReport r;
  r.variant = j.value("variant", std::string("engine"));
  r.labeler = j.value("labeler", std::string());
  r.labeler_metadata = j.value("labeler_metadata", json::object());
  const auto& d = object_at(j, "deception", "score");
  const auto& c = object_at(d, "counts", "deception");
  r.deception.counts = {count_from(c, "SALC", "deception.counts"), count_from(c, "SALNLC", "deception.counts"),
                        count_from(c, "FALC", "deception.counts"), count_from(c, "FALNLC", "deception.counts"),
                        count_from(c, "unlabeled", "deception.counts")};
  for (auto [key, slot] : {std::pair{"accuracy", &r.deception.accuracy}, std::pair{"temptation", &r.deception.temptation},
                           std::pair{"attack_success_rate", &r.deception.attack_success_rate},
                           std::pair{"os_logic_compliance", &r.deception.os_logic_compliance}}) {
    *slot = rational_from(d.value(key, json()), std::string("deception.") + key);
  }
  const auto& in = object_at(j, "interaction", "score");
  r.interaction.sessions = count_from(in, "sessions", "interaction");
  r.interaction.commands = count_from(in, "commands", "interaction");
  r.interaction.responded = count_from(in, "responded", "interaction");
  for (auto [key, slot] :
       {std::pair{"full_session_response_rate", &r.interaction.full_session_response_rate},
        std::pair{"command_response_rate", &r.interaction.command_response_rate},
        std::pair{"mean_session_length_pct", &r.interaction.mean_session_length_pct},
        std::pair{"mean_interaction_degree_pct", &r.interaction.mean_interaction_degree_pct}}) {
    *slot = rational_from(in.value(key, json()), std::string("interaction.") + key);
  }
  if (j.contains("techniques")) {
    if (!j.at("techniques").is_array()) throw InputError("techniques: expected an array");
    for (std::size_t i = 0; i < j.at("techniques").size(); ++i) {
      const auto& t = j.at("techniques")[i];
      const std::string where = "techniques[" + std::to_string(i) + "]";
      if (!t.is_object() || !t.contains("technique") || !t.at("technique").is_string()) {
        throw InputError(where + ".technique: expected a string");
      }
      TechniqueRow row;
      row.technique = t.at("technique").get<std::string>();
      row.commands = count_from(t, "commands", where);
      row.responded = count_from(t, "responded", where);
      row.response_rate = rational_from(t.value("response_rate", json()), where + ".response_rate");
      r.techniques.push_back(std::move(row));
    }
  }
  return r;
}

std::string format_pct(const std::optional<Rational>& value) {
  if (!value) return "n/a";
  using boost::multiprecision::cpp_int;
  // Round half up to hundredths of a percent, exactly.
  const cpp_int num = numerator(*value);
  const cpp_int den = denominator(*value);
  const cpp_int hundredths = (num * 20000 + den) / (den * 2);
  const cpp_int whole = hundredths / 100;
  const int frac = static_cast<int>(hundredths % 100);
  char buf[8];
  std::snprintf(buf, sizeof buf, ".%02d%%", frac);
  return whole.str() + buf;
}

namespace {

std::string format_decimal(const std::optional<Rational>& value) {
  if (!value) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", value->convert_to<double>());
  return buf;
}

struct MetricRow {
  const char* key;
  const char* title;
  std::function<const std::optional<Rational>&(const ScoreReport&)> get;
};

const std::vector<MetricRow>& deception_rows() {
  static const std::vector<MetricRow> rows = {
      {"accuracy", "Accuracy", [](const ScoreReport& r) -> const auto& { return r.deception.accuracy; }},
      {"temptation", "Temptation", [](const ScoreReport& r) -> const auto& { return r.deception.temptation; }},
      {"attack_success_rate", "Attack success rate",
       [](const ScoreReport& r) -> const auto& { return r.deception.attack_success_rate; }},
      {"os_logic_compliance", "OS logic compliance",
       [](const ScoreReport& r) -> const auto& { return r.deception.os_logic_compliance; }},
  };
  return rows;
}

const std::vector<MetricRow>& interaction_rows() {
  static const std::vector<MetricRow> rows = {
      {"full_session_response_rate", "Full session response rate",
       [](const ScoreReport& r) -> const auto& { return r.interaction.full_session_response_rate; }},
      {"command_response_rate", "Command response rate",
       [](const ScoreReport& r) -> const auto& { return r.interaction.command_response_rate; }},
      {"mean_session_length_pct", "Mean session length",
       [](const ScoreReport& r) -> const auto& { return r.interaction.mean_session_length_pct; }},
      {"mean_interaction_degree_pct", "Mean interaction degree",
       [](const ScoreReport& r) -> const auto& { return r.interaction.mean_interaction_degree_pct; }},
  };
  return rows;
}

std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string md_cell(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (c == '|') out += '\\';
    out += c == '\n' ? ' ' : c;
  }
  return out;
}

}  // namespace

std::string render_json(const std::vector<ScoreReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) arr.push_back(to_json(r));
  return json{{"reports", arr}}.dump(2) + "\n";
}

std::string render_csv(const std::vector<ScoreReport>& reports) {
  std::string out = "metric";
  for (const auto& r : reports) out += "," + csv_field(r.variant);
  out += "\n";
  for (const auto* rows : {&deception_rows(), &interaction_rows()}) {
    for (const auto& m : *rows) {
      out += m.key;
      for (const auto& r : reports) out += "," + format_decimal(m.get(r));
      out += "\n";
    }
  }
  auto count_row = [&](const char* key, auto get) {
    out += key;
    for (const auto& r : reports) out += "," + std::to_string(get(r));
    out += "\n";
  };
  count_row("SALC", [](const ScoreReport& r) { return r.deception.counts.salc; });
  count_row("SALNLC", [](const ScoreReport& r) { return r.deception.counts.salnlc; });
  count_row("FALC", [](const ScoreReport& r) { return r.deception.counts.falc; });
  count_row("FALNLC", [](const ScoreReport& r) { return r.deception.counts.falnlc; });
  count_row("unlabeled", [](const ScoreReport& r) { return r.deception.counts.unlabeled; });
  count_row("sessions", [](const ScoreReport& r) { return r.interaction.sessions; });
  count_row("commands", [](const ScoreReport& r) { return r.interaction.commands; });
  count_row("responded", [](const ScoreReport& r) { return r.interaction.responded; });
  return out;
}

std::string render_markdown(const std::vector<ScoreReport>& reports) {
  std::string header = "| Metric |";
  std::string rule = "|---|";
  for (const auto& r : reports) {
    header += " " + md_cell(r.variant) + " |";
    rule += "---:|";
  }
  header += "\n" + rule + "\n";

  std::string out = "# Evaluation report\n\n";
  out += "Labelers:";
  for (const auto& r : reports) out += " " + md_cell(r.variant) + " = " + (r.labeler.empty() ? "none" : r.labeler) + ";";
  out.back() = '\n';
  out += "\n## Deception\n\n" + header;
  for (const auto& m : deception_rows()) {
    out += std::string("| ") + m.title + " |";
    for (const auto& r : reports) out += " " + format_pct(m.get(r)) + " |";
    out += "\n";
  }
  out += "\n## Interaction\n\n" + header;
  for (const auto& m : interaction_rows()) {
    out += std::string("| ") + m.title + " |";
    for (const auto& r : reports) out += " " + format_pct(m.get(r)) + " |";
    out += "\n";
  }
  out += "\n## Turn classes\n\n" + header;
  auto count_row = [&](const char* title, auto get) {
    out += std::string("| ") + title + " |";
    for (const auto& r : reports) out += " " + std::to_string(get(r)) + " |";
    out += "\n";
  };
  count_row("SALC", [](const ScoreReport& r) { return r.deception.counts.salc; });
  count_row("SALNLC", [](const ScoreReport& r) { return r.deception.counts.salnlc; });
  count_row("FALC", [](const ScoreReport& r) { return r.deception.counts.falc; });
  count_row("FALNLC", [](const ScoreReport& r) { return r.deception.counts.falnlc; });
  count_row("Unlabeled", [](const ScoreReport& r) { return r.deception.counts.unlabeled; });
  count_row("Sessions", [](const ScoreReport& r) { return r.interaction.sessions; });
  count_row("Commands", [](const ScoreReport& r) { return r.interaction.commands; });

  std::set<std::string> tags;
  for (const auto& r : reports) {
    for (const auto& t : r.techniques) tags.insert(t.technique);
  }
  if (!tags.empty()) {
    out += "\n## Response rate by technique\n\n";
    std::string h = "| Technique |";
    for (const auto& r : reports) h += " " + md_cell(r.variant) + " |";
    out += h + "\n" + rule + "\n";
    for (const auto& tag : tags) {
      out += "| " + md_cell(tag) + " |";
      for (const auto& r : reports) {
        auto it = std::find_if(r.techniques.begin(), r.techniques.end(),
                               [&](const TechniqueRow& t) { return t.technique == tag; });
        if (it == r.techniques.end()) {
          out += " n/a |";
        } else {
          out += " " + format_pct(it->response_rate) + " (" + std::to_string(it->responded) + "/" +
                 std::to_string(it->commands) + ") |";
        }
      }
      out += "\n";
    }
  }
  return out;
}

std::vector<fs::path> emit_report(const std::vector<ScoreReport>& reports, const fs::path& dir,
                                  const std::vector<ReportFormat>& formats) {
  fs::create_directories(dir);
  std::vector<fs::path> written;
  auto put = [&](const char* name, const std::string& text) {
    auto path = dir / name;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text) || !out.flush()) throw std::runtime_error("cannot write " + path.string());
    written.push_back(path);
  };
  for (auto f : formats) {
    switch (f) {
      case ReportFormat::Json: put("report.json", render_json(reports)); break;
      case ReportFormat::Csv: put("report.csv", render_csv(reports)); break;
      case ReportFormat::Markdown: put("report.md", render_markdown(reports)); break;
    }
  }
  return written;
}

}  // namespace decoysh
