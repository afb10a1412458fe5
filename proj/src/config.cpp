#include "decoysh/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace decoysh {

using nlohmann::json;
namespace fs = std::filesystem;

std::string_view to_string(BackendKind k) { return k == BackendKind::Live ? "live" : "scripted"; }

std::vector<TechniqueRule> default_technique_rules() {
  return {
      {R"(\b(uname|lscpu|hostnamectl)\b|/proc/(cpuinfo|meminfo|version)|\bnproc\b|\bfree\b)", "T1082"},
      {R"(\b(whoami|id|w|who|last)\b)", "T1033"},
      {R"(\b(ps|top|pgrep)\b)", "T1057"},
      {R"(\b(netstat|ss|ifconfig|ip)\b)", "T1016"},
      {R"(\b(wget|curl|tftp|scp|ftpget)\b)", "T1105"},
      {R"(\bchmod\b)", "T1222.002"},
      {R"(\bcrontab\b|/etc/cron)", "T1053.003"},
      {R"(authorized_keys)", "T1098.004"},
      {R"(\b(passwd|chpasswd|useradd|usermod)\b)", "T1098"},
      {R"(\bhistory\s+-c\b|\.bash_history)", "T1070.003"},
      {R"(\brm\s+-[a-zA-Z]*[rf])", "T1070.004"},
      {R"(\b(sudo|su)\b)", "T1548.003"},
      {R"(\b(systemctl|service)\b)", "T1543.002"},
      {R"(/etc/(passwd|shadow))", "T1003.008"},
  };
}

AppConfig default_config() {
  AppConfig c;
  c.transports.push_back(TransportBinding{});
  c.engine.technique_rules = default_technique_rules();
  return c;
}

namespace {

/// Typed access to one JSON object; remembers which keys were read so the
/// leftovers can be rejected.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  std::string key(std::string_view k) const { return path_.empty() ? std::string(k) : path_ + "." + std::string(k); }

  const json* find(std::string_view k) {
    seen_.insert(std::string(k));
    auto it = j_.find(std::string(k));
    return it == j_.end() ? nullptr : &*it;
  }

  template <class T>
  void get(std::string_view k, T& out) {
    const json* v = find(k);
    if (!v) return;
    try {
      out = v->get<T>();
    } catch (const json::exception&) {
      throw ConfigError(key(k) + ": wrong type (" + v->type_name() + ")");
    }
  }

  void get_path(std::string_view k, const fs::path& base, std::optional<fs::path>& out) {
    const json* v = find(k);
    if (!v || v->is_null()) return;
    if (!v->is_string()) throw ConfigError(key(k) + ": expected a path string");
    out = resolve(base, v->get<std::string>());
  }

  void get_strings(std::string_view k, std::vector<std::string>& out) {
    const json* v = find(k);
    if (!v) return;
    if (!v->is_array()) throw ConfigError(key(k) + ": expected an array of strings");
    out.clear();
    for (const auto& s : *v) {
      if (!s.is_string()) throw ConfigError(key(k) + ": expected an array of strings");
      out.push_back(s.get<std::string>());
    }
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(key(it.key()) + ": unknown key");
    }
  }

  static fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return path.is_absolute() ? path : base / path;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void check_regex(const std::string& pattern, const std::string& where) {
  try {
    std::regex re(pattern, std::regex::ECMAScript);
  } catch (const std::regex_error& e) {
    throw ConfigError(where + ": bad regex: " + e.what());
  }
}

TransportBinding parse_transport(const json& j, const std::string& where) {
  Section s(j, where);
  TransportBinding b;
  std::string kind = "plain_tcp";
  s.get("kind", kind);
  if (kind == "plain_tcp") {
    b.kind = TransportKind::PlainTcpLine;
  } else if (kind == "ssh") {
    b.kind = TransportKind::SshServer;
  } else {
    throw ConfigError(where + ".kind: expected plain_tcp or ssh, got '" + kind + "'");
  }
  s.get("listen", b.listen_address);
  if (b.listen_address.rfind(':') == std::string::npos) throw ConfigError(where + ".listen: expected host:port");
  s.get("banner", b.banner);
  s.get("prompt", b.shell_prompt_template);
  if (const json* a = s.find("auth")) {
    Section as(*a, where + ".auth");
    std::string mode = "accept_any";
    as.get("mode", mode);
    if (mode == "accept_any") {
      b.auth.mode = AuthPolicy::Mode::AcceptAny;
    } else if (mode == "fixed_list") {
      b.auth.mode = AuthPolicy::Mode::FixedList;
    } else {
      throw ConfigError(where + ".auth.mode: expected accept_any or fixed_list, got '" + mode + "'");
    }
    as.get("accept_after_attempts", b.auth.accept_after_attempts);
    if (b.auth.accept_after_attempts < 1 || b.auth.accept_after_attempts > 3) {
      throw ConfigError(where + ".auth.accept_after_attempts: must be in 1..3");
    }
    if (const json* creds = as.find("credentials")) {
      if (!creds->is_array()) throw ConfigError(where + ".auth.credentials: expected an array");
      for (std::size_t i = 0; i < creds->size(); ++i) {
        const auto& c = (*creds)[i];
        const std::string cw = where + ".auth.credentials[" + std::to_string(i) + "]";
        if (!c.is_object() || !c.contains("user") || !c.contains("password") || !c.at("user").is_string() ||
            !c.at("password").is_string()) {
          throw ConfigError(cw + ": expected {user, password} strings");
        }
        b.auth.credentials.emplace_back(c.at("user").get<std::string>(), c.at("password").get<std::string>());
      }
    }
    if (b.auth.mode == AuthPolicy::Mode::FixedList && b.auth.credentials.empty()) {
      throw ConfigError(where + ".auth.credentials: fixed_list needs at least one entry");
    }
    as.finish();
  }
  s.finish();
  return b;
}

}  // namespace

AppConfig parse_config(const json& doc, const fs::path& base_dir) {
  AppConfig c = default_config();
  Section top(doc, "");

  if (const json* t = top.find("transports")) {
    if (!t->is_array() || t->empty()) throw ConfigError("transports: expected a non-empty array");
    c.transports.clear();
    for (std::size_t i = 0; i < t->size(); ++i) {
      c.transports.push_back(parse_transport((*t)[i], "transports[" + std::to_string(i) + "]"));
    }
  }

  const json* profile = top.find("profile");
  std::optional<fs::path> profile_file;
  top.get_path("profile_file", base_dir, profile_file);
  if (profile && profile_file) throw ConfigError("profile_file: give either profile or profile_file");
  json profile_doc;
  if (profile_file) {
    std::ifstream in(*profile_file);
    if (!in) throw ConfigError("profile_file: cannot read " + profile_file->string());
    try {
      profile_doc = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("profile_file: " + std::string(e.what()));
    }
    profile = &profile_doc;
  }
  if (profile) {
    try {
      c.profile = profile->get<HoneypotProfile>();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    } catch (const json::exception& e) {
      throw ConfigError(std::string("profile: ") + e.what());
    }
    if (auto problems = validate(c.profile); !problems.empty()) throw ConfigError(problems.front());
  }

  if (const json* g = top.find("gateway")) {
    Section s(*g, "gateway");
    std::string backend = "scripted";
    s.get("backend", backend);
    if (backend == "scripted") {
      c.backend = BackendKind::Scripted;
    } else if (backend == "live") {
      c.backend = BackendKind::Live;
    } else {
      throw ConfigError("gateway.backend: expected scripted or live, got '" + backend + "'");
    }
    s.get_path("script", base_dir, c.script);
    s.get("endpoint_url", c.gateway.endpoint_url);
    s.get("model_name", c.gateway.model_name);
    s.get("api_key_env_var", c.gateway.api_key_env_var);
    int timeout_s = static_cast<int>(c.gateway.request_timeout.count());
    s.get("request_timeout_s", timeout_s);
    c.gateway.request_timeout = std::chrono::seconds(timeout_s);
    s.get("max_retries_format", c.gateway.max_retries_format);
    s.get("max_concurrent_requests", c.gateway.max_concurrent_requests);
    long long interval = c.gateway.min_request_interval.count();
    s.get("min_request_interval_ms", interval);
    c.gateway.min_request_interval = std::chrono::milliseconds(interval);
    s.get("temperature", c.gateway.temperature);
    s.finish();
    if (auto problems = validate(c.gateway); !problems.empty()) throw ConfigError(problems.front());
    if (c.gateway.api_key_env_var.empty()) throw ConfigError("gateway.api_key_env_var: must not be empty");
  }

  if (const json* m = top.find("memory")) {
    Section s(*m, "memory");
    auto& mem = c.engine.memory;
    s.get("weaken_factor", mem.weaken_factor);
    s.get("context_budget", mem.context_budget);
    s.get("prune_watermark", mem.prune_watermark);
    s.finish();
    if (!(mem.weaken_factor > 0.0 && mem.weaken_factor <= 1.0)) throw ConfigError("memory.weaken_factor: must lie in (0, 1]");
    if (mem.context_budget < 1024) throw ConfigError("memory.context_budget: must be >= 1024");
    if (!(mem.prune_watermark > 0.0 && mem.prune_watermark <= 1.0)) {
      throw ConfigError("memory.prune_watermark: must lie in (0, 1]");
    }
  }

  if (const json* se = top.find("session")) {
    Section s(*se, "session");
    int idle = static_cast<int>(c.engine.idle_timeout.count());
    s.get("idle_timeout_s", idle);
    if (idle < 1) throw ConfigError("session.idle_timeout_s: must be >= 1");
    c.engine.idle_timeout = std::chrono::seconds(idle);
    s.get("max_turns", c.engine.max_turns);
    if (c.engine.max_turns < 1) throw ConfigError("session.max_turns: must be >= 1");
    if (const json* rules = s.find("technique_rules")) {
      if (!rules->is_array()) throw ConfigError("session.technique_rules: expected an array");
      c.engine.technique_rules.clear();
      for (std::size_t i = 0; i < rules->size(); ++i) {
        const std::string where = "session.technique_rules[" + std::to_string(i) + "]";
        Section r((*rules)[i], where);
        TechniqueRule rule;
        r.get("pattern", rule.pattern);
        r.get("technique", rule.technique);
        r.finish();
        if (rule.pattern.empty() || rule.technique.empty()) throw ConfigError(where + ": needs pattern and technique");
        check_regex(rule.pattern, where + ".pattern");
        c.engine.technique_rules.push_back(std::move(rule));
      }
    }
    s.finish();
  }

  c.ledger.path = base_dir / c.ledger.path;
  if (const json* l = top.find("ledger")) {
    Section s(*l, "ledger");
    std::optional<fs::path> path;
    s.get_path("path", base_dir, path);
    if (path) c.ledger.path = *path;
    std::string rotation = "per_day";
    s.get("rotation", rotation);
    if (rotation == "per_day") {
      c.ledger.rotation = JsonlSink::Rotation::PerDay;
    } else if (rotation == "per_run") {
      c.ledger.rotation = JsonlSink::Rotation::PerRun;
    } else {
      throw ConfigError("ledger.rotation: expected per_day or per_run, got '" + rotation + "'");
    }
    s.get("durable", c.ledger.durable);
    s.finish();
  }

  if (const json* v = top.find("verdict")) {
    Section s(*v, "verdict");
    s.get_strings("refusal_patterns", c.refusal_patterns);
    s.get_strings("wrong_command_patterns", c.wrong_command_patterns);
    s.finish();
    for (std::size_t i = 0; i < c.refusal_patterns.size(); ++i) {
      check_regex(c.refusal_patterns[i], "verdict.refusal_patterns[" + std::to_string(i) + "]");
    }
    for (std::size_t i = 0; i < c.wrong_command_patterns.size(); ++i) {
      check_regex(c.wrong_command_patterns[i], "verdict.wrong_command_patterns[" + std::to_string(i) + "]");
    }
  }

  if (const json* ssh = top.find("ssh")) {
    Section s(*ssh, "ssh");
    s.get_path("host_key_seed_file", base_dir, c.host_key_seed);
    s.finish();
  }

  top.finish();
  c.digest = sha256_hex(doc.dump());
  return c;
}

AppConfig load_config(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("config: cannot read " + file.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + file.string() + ": " + e.what());
  }
  auto base = file.parent_path();
  return parse_config(doc, base.empty() ? fs::path(".") : base);
}

std::shared_ptr<ChatBackend> make_backend(const AppConfig& c) {
  if (c.backend == BackendKind::Live) {
    const char* key = std::getenv(c.gateway.api_key_env_var.c_str());
    if (!key || !*key) {
      throw ConfigError("gateway.api_key_env_var: environment variable " + c.gateway.api_key_env_var +
                        " is not set; the live backend needs an API key");
    }
    return std::make_shared<HttpChatBackend>(key);
  }
  if (!c.script) throw ConfigError("gateway.script: the scripted backend needs a script file");
  try {
    return std::make_shared<ScriptedBackend>(ScriptedBackend::load(*c.script));
  } catch (const std::exception& e) {
    throw ConfigError("gateway.script: " + std::string(e.what()));
  }
}

std::shared_ptr<Gateway> make_gateway(const AppConfig& c) {
  return std::make_shared<Gateway>(make_backend(c), c.gateway, VerdictPolicy(c.refusal_patterns, c.wrong_command_patterns));
}

}  // namespace decoysh
