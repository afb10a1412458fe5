#include "decoysh/terminal_frontend.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cerrno>
#include <condition_variable>
#include <cstring>

namespace decoysh {

// ---------------------------------------------------------------------------
// Clocks and ids

Timestamp SystemClock::now() {
  return std::chrono::time_point_cast<std::chrono::milliseconds>(std::chrono::system_clock::now());
}

Timestamp SteppedClock::now() {
  auto t = next_;
  next_ += step_;
  return t;
}

ClockFactory system_clock_factory() {
  return [] { return std::make_unique<SystemClock>(); };
}

ClockFactory stepped_clock_factory(Timestamp start, std::chrono::milliseconds step) {
  return [start, step] { return std::make_unique<SteppedClock>(start, step); };
}

SessionIdGenerator::SessionIdGenerator(std::uint64_t seed) : rng_(seed) {}

std::string SessionIdGenerator::next() {
  std::uint64_t v;
  {
    std::lock_guard lock(mu_);
    v = rng_();
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string id(12, '0');
  for (int i = 11; i >= 0; --i) {
    id[static_cast<std::size_t>(i)] = kHex[v & 0xf];
    v >>= 4;
  }
  return id;
}

// ---------------------------------------------------------------------------
// Engine

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

}  // namespace

std::string fallback_output(std::string_view query) {
  auto q = trim(query);
  auto end = q.find_first_of(" \t;|&<>");
  std::string verb(q.substr(0, end));
  if (verb.empty()) verb = std::string(q);
  return "sh: " + verb + ": command not found";
}

Engine::Engine(std::shared_ptr<const HoneypotProfile> profile, std::shared_ptr<Gateway> gateway,
               std::shared_ptr<RecordSink> sink, EngineConfig config, ClockFactory clocks)
    : profile_(std::move(profile)),
      gateway_(std::move(gateway)),
      sink_(std::move(sink)),
      config_(std::move(config)),
      clocks_(std::move(clocks)) {
  if (!profile_ || !gateway_) throw std::invalid_argument("engine needs a profile and a gateway");
  if (config_.max_turns < 1) throw std::invalid_argument("max_turns must be >= 1");
  profile_digest_ = profile_digest(*profile_);
  for (const auto& r : config_.technique_rules) {
    technique_rules_.emplace_back(std::regex(r.pattern, std::regex::ECMAScript), r.technique);
  }
}

LiveSession Engine::open_session(std::string session_id, std::string peer) {
  LiveSession s{std::move(session_id), std::move(peer), SessionState(profile_, config_.memory), clocks_(), {}, {}, {},
                0, false};
  s.started_at = s.clock->now();
  s.last_activity = s.started_at;
  s.record.session_id = s.session_id;
  s.record.peer = s.peer;
  s.record.started_at = s.started_at;
  s.record.profile_digest = profile_digest_;
  if (sink_ && !sink_->open_session(s.record)) {
    ++sink_failures_;
    spdlog::warn("ledger write failed opening session {}", s.session_id);
  }
  return s;
}

std::vector<std::string> Engine::tags_for(std::string_view query) const {
  std::vector<std::string> tags;
  for (const auto& [re, technique] : technique_rules_) {
    if (std::regex_search(query.begin(), query.end(), re) &&
        std::find(tags.begin(), tags.end(), technique) == tags.end()) {
      tags.push_back(technique);
    }
  }
  return tags;
}

std::string Engine::run_turn(LiveSession& s, std::string_view raw_query) {
  const auto query = trim(raw_query);
  if (query.empty() || s.closed) return {};

  const Timestamp t0 = s.clock->now();
  s.last_activity = t0;
  TurnRecord turn;
  turn.index = ++s.turns;
  turn.query = std::string(query);
  turn.timestamp = t0;
  turn.technique_tags = tags_for(query);

  // Make room for this command before rendering.
  prune_memory(s.state, query, t0);

  ModelVerdict verdict{FailureCause{}};
  auto bundle = construct_prompt(s.state, query, t0);
  if (!bundle) {
    verdict = ModelVerdict{bundle.error()};
  } else {
    if (observer_) observer_(s, *bundle);
    auto outcome = gateway_->complete_with_repair(*bundle);
    verdict = std::move(outcome.verdict);
    turn.retry_count = outcome.retry_count;
  }

  std::string output;
  if (verdict.ok()) {
    const auto& ok = verdict.success();
    decay_ledger(s.state);
    update_memory(s.state, query, ok, t0);
    prune_memory(s.state, {}, t0);
    output = ok.answer;
    turn.answer = ok.answer;
    turn.state_change = ok.state_change;
    turn.impact = std::clamp(ok.impact, kMinImpact, kMaxImpact);
  } else {
    output = fallback_output(query);
    turn.failure = verdict.failure();
    spdlog::info("session {} turn {}: {} ({})", s.session_id, turn.index, to_string(turn.failure->kind),
                 turn.failure->detail);
  }

  const Timestamp t1 = s.clock->now();
  turn.latency_ms = (t1 - t0).count();
  s.last_activity = t1;
  s.record.turns.push_back(turn);
  if (sink_ && !sink_->append_turn(s.session_id, turn)) {
    ++sink_failures_;
    spdlog::warn("ledger write failed for session {} turn {}", s.session_id, turn.index);
  }
  return output;
}

void Engine::record_login(LiveSession& s, std::string_view username, std::string_view password) {
  s.record.username = std::string(username);
  if (sink_ && !sink_->write(login_event(s.session_id, s.clock->now(), username, password))) ++sink_failures_;
}

void Engine::close_session(LiveSession& s, std::string_view reason) {
  if (s.closed) return;
  s.closed = true;
  auto ended = s.clock->now();
  s.record.ended_at = ended;
  s.record.end_reason = std::string(reason);
  if (sink_ && !sink_->close_session(s.session_id, s.started_at, ended, reason)) {
    ++sink_failures_;
    spdlog::warn("ledger write failed closing session {}", s.session_id);
  }
}

// ---------------------------------------------------------------------------
// Shell behaviour

bool AuthPolicy::accepts(std::string_view user, std::string_view password, int attempt) const {
  if (mode == Mode::AcceptAny) return attempt >= std::clamp(accept_after_attempts, 1, 3);
  for (const auto& [u, p] : credentials) {
    if (u == user && p == password) return true;
  }
  return false;
}

std::string render_shell_prompt(std::string_view templ, const HoneypotProfile& profile, std::string_view cwd) {
  const auto& sw = profile.settings.software;
  std::string out;
  for (std::size_t i = 0; i < templ.size();) {
    auto sub = templ.substr(i);
    if (sub.starts_with("{user}")) {
      out += sw.default_user;
      i += 6;
    } else if (sub.starts_with("{host}")) {
      out += sw.hostname;
      i += 6;
    } else if (sub.starts_with("{cwd}")) {
      out += cwd;
      i += 5;
    } else if (sub.starts_with("{sigil}")) {
      out += sw.default_user == "root" ? '#' : '$';
      i += 7;
    } else {
      out += templ[i++];
    }
  }
  return out;
}

ShellSession::ShellSession(Engine& engine, LiveSession session, const TransportBinding& binding)
    : engine_(engine), session_(std::move(session)), binding_(binding) {}

std::string ShellSession::prompt() const {
  return render_shell_prompt(binding_.shell_prompt_template, engine_.profile());
}

std::string ShellSession::greeting() const {
  std::string out = binding_.banner;
  if (!out.empty() && out.back() != '\n') out += '\n';
  return out + prompt();
}

ShellSession::Reply ShellSession::on_line(std::string_view line) {
  auto cmd = trim(line);
  if (cmd.empty()) return {prompt(), false, {}};
  if (cmd == "exit" || cmd == "logout") return {"logout\n", true, "exit"};

  std::string out = engine_.run_turn(session_, cmd);
  if (!out.empty() && out.back() != '\n') out += '\n';
  if (session_.turns >= engine_.config().max_turns) return {out, true, "max_turns"};
  return {out + prompt(), false, {}};
}

void ShellSession::finish(std::string_view reason) { engine_.close_session(session_, reason); }

// ---------------------------------------------------------------------------
// Plain TCP line transport

namespace {

bool send_all(int fd, std::string_view data) {
  while (!data.empty()) {
    ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

constexpr auto kTick = std::chrono::milliseconds(100);

}  // namespace

void run_plain_tcp_session(int fd, ShellSession& shell, const std::atomic<bool>& stopping,
                           std::chrono::seconds idle_timeout) {
  if (!send_all(fd, shell.greeting())) {
    shell.finish("disconnect");
    return;
  }
  std::string buffer;
  auto last_input = std::chrono::steady_clock::now();
  char chunk[4096];
  while (true) {
    if (stopping.load()) {
      shell.finish("shutdown");
      return;
    }
    if (std::chrono::steady_clock::now() - last_input >= idle_timeout) {
      shell.finish("idle");
      return;
    }
    pollfd pfd{fd, POLLIN, 0};
    int rc = ::poll(&pfd, 1, static_cast<int>(kTick.count()));
    if (rc < 0 && errno != EINTR) {
      shell.finish("error");
      return;
    }
    if (rc <= 0) continue;
    ssize_t n = ::recv(fd, chunk, sizeof chunk, 0);
    if (n <= 0) {
      shell.finish("disconnect");
      return;
    }
    last_input = std::chrono::steady_clock::now();
    buffer.append(chunk, static_cast<std::size_t>(n));
    std::size_t nl;
    while ((nl = buffer.find('\n')) != std::string::npos) {
      std::string line = buffer.substr(0, nl);
      buffer.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      auto reply = shell.on_line(line);
      bool sent = send_all(fd, reply.text);
      if (reply.close) {
        shell.finish(reply.reason);
        return;
      }
      if (!sent) {
        shell.finish("disconnect");
        return;
      }
      if (stopping.load()) break;
    }
    last_input = std::chrono::steady_clock::now();
  }
}

// ---------------------------------------------------------------------------
// Server

struct HoneypotServer::Listener {
  int fd = -1;
  std::uint16_t port = 0;
  ~Listener() {
    if (fd >= 0) ::close(fd);
  }
};

struct HoneypotServer::Connections {
  std::mutex mu;
  std::condition_variable cv;
  int active = 0;
};

namespace {

std::pair<std::string, std::string> split_host_port(const std::string& address) {
  auto colon = address.rfind(':');
  if (colon == std::string::npos) throw BindError("listen address '" + address + "' needs host:port");
  std::string host = address.substr(0, colon);
  if (host.size() >= 2 && host.front() == '[' && host.back() == ']') host = host.substr(1, host.size() - 2);
  return {host, address.substr(colon + 1)};
}

std::string peer_ip(const sockaddr_storage& ss) {
  char buf[INET6_ADDRSTRLEN] = {};
  if (ss.ss_family == AF_INET) {
    ::inet_ntop(AF_INET, &reinterpret_cast<const sockaddr_in&>(ss).sin_addr, buf, sizeof buf);
  } else if (ss.ss_family == AF_INET6) {
    ::inet_ntop(AF_INET6, &reinterpret_cast<const sockaddr_in6&>(ss).sin6_addr, buf, sizeof buf);
  }
  return buf;
}

}  // namespace

HoneypotServer::HoneypotServer(std::vector<TransportBinding> bindings, std::shared_ptr<Engine> engine,
                               std::optional<SshHostKey> host_key, std::uint64_t seed)
    : bindings_(std::move(bindings)),
      engine_(std::move(engine)),
      host_key_(std::move(host_key)),
      ids_(seed),
      connections_(std::make_shared<Connections>()) {
  if (!engine_) throw std::invalid_argument("server needs an engine");
}

HoneypotServer::~HoneypotServer() { stop(); }

void HoneypotServer::start() {
  for (const auto& b : bindings_) {
    if (b.kind == TransportKind::SshServer && !host_key_) host_key_ = SshHostKey::generate();
    auto [host, port] = split_host_port(b.listen_address);
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE | AI_NUMERICSERV;
    addrinfo* res = nullptr;
    if (int rc = ::getaddrinfo(host.empty() ? nullptr : host.c_str(), port.c_str(), &hints, &res); rc != 0) {
      throw BindError("cannot resolve " + b.listen_address + ": " + ::gai_strerror(rc));
    }
    auto listener = std::make_unique<Listener>();
    std::string last_error = "no address";
    for (auto* ai = res; ai; ai = ai->ai_next) {
      int fd = ::socket(ai->ai_family, ai->ai_socktype | SOCK_CLOEXEC, ai->ai_protocol);
      if (fd < 0) continue;
      int one = 1;
      ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
      if (::bind(fd, ai->ai_addr, ai->ai_addrlen) == 0 && ::listen(fd, 64) == 0) {
        listener->fd = fd;
        break;
      }
      last_error = std::strerror(errno);
      ::close(fd);
    }
    ::freeaddrinfo(res);
    if (listener->fd < 0) throw BindError("cannot bind " + b.listen_address + ": " + last_error);
    sockaddr_storage ss{};
    socklen_t len = sizeof ss;
    ::getsockname(listener->fd, reinterpret_cast<sockaddr*>(&ss), &len);
    listener->port = ntohs(ss.ss_family == AF_INET ? reinterpret_cast<sockaddr_in&>(ss).sin_port
                                                   : reinterpret_cast<sockaddr_in6&>(ss).sin6_port);
    listeners_.push_back(std::move(listener));
  }
  for (std::size_t i = 0; i < listeners_.size(); ++i) {
    accept_threads_.emplace_back([this, i] { accept_loop(i); });
  }
}

std::vector<std::uint16_t> HoneypotServer::ports() const {
  std::vector<std::uint16_t> out;
  for (const auto& l : listeners_) out.push_back(l->port);
  return out;
}

void HoneypotServer::accept_loop(std::size_t index) {
  const int lfd = listeners_[index]->fd;
  const auto& binding = bindings_[index];
  auto tracker = connections_;
  while (!stopping_.load()) {
    pollfd pfd{lfd, POLLIN, 0};
    int rc = ::poll(&pfd, 1, static_cast<int>(kTick.count()));
    if (rc <= 0) continue;
    sockaddr_storage ss{};
    socklen_t len = sizeof ss;
    int fd = ::accept4(lfd, reinterpret_cast<sockaddr*>(&ss), &len, SOCK_CLOEXEC);
    if (fd < 0) continue;
    {
      std::lock_guard lock(tracker->mu);
      ++tracker->active;
    }
    ++sessions_started_;
    std::thread([this, fd, peer = peer_ip(ss), &binding, tracker] {
      try {
        handle_connection(fd, peer, binding);
      } catch (const std::exception& e) {
        spdlog::error("connection from {} failed: {}", peer, e.what());
      }
      ::close(fd);
      std::lock_guard lock(tracker->mu);
      --tracker->active;
      tracker->cv.notify_all();
    }).detach();
  }
}

void HoneypotServer::handle_connection(int fd, std::string peer, const TransportBinding& binding) {
  if (binding.kind == TransportKind::SshServer) {
    run_ssh_session(fd, *engine_, binding, *host_key_, ids_.next(), std::move(peer), stopping_);
    return;
  }
  ShellSession shell(*engine_, engine_->open_session(ids_.next(), std::move(peer)), binding);
  run_plain_tcp_session(fd, shell, stopping_, engine_->config().idle_timeout);
}

void HoneypotServer::wait_idle() {
  std::unique_lock lock(connections_->mu);
  connections_->cv.wait(lock, [&] { return connections_->active == 0; });
}

void HoneypotServer::stop() {
  if (stopped_) return;
  stopped_ = true;
  stopping_ = true;
  for (auto& t : accept_threads_) {
    if (t.joinable()) t.join();
  }
  std::unique_lock lock(connections_->mu);
  connections_->cv.wait(lock, [&] { return connections_->active == 0; });
  listeners_.clear();
}

}  // namespace decoysh
