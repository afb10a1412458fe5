#pragma once

// The per-session engine loop and the network transports that feed it.

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <regex>
#include <string>
#include <thread>
#include <vector>

#include "decoysh/domain.hpp"
#include "decoysh/llm_gateway.hpp"
#include "decoysh/prompt_manager.hpp"
#include "decoysh/session_ledger.hpp"

namespace decoysh {

// ---------------------------------------------------------------------------
// Clocks

class Clock {
 public:
  virtual ~Clock() = default;
  virtual Timestamp now() = 0;
};

class SystemClock final : public Clock {
 public:
  Timestamp now() override;
};

/// Returns start, start + step, start + 2*step, ... on successive calls.
/// Gives byte-reproducible transcripts for replays.
class SteppedClock final : public Clock {
 public:
  SteppedClock(Timestamp start, std::chrono::milliseconds step) : next_(start), step_(step) {}
  Timestamp now() override;

 private:
  Timestamp next_;
  std::chrono::milliseconds step_;
};

using ClockFactory = std::function<std::unique_ptr<Clock>()>;

ClockFactory system_clock_factory();
ClockFactory stepped_clock_factory(Timestamp start, std::chrono::milliseconds step = std::chrono::milliseconds{1000});

/// 12 hex digit session ids, Cowrie style. Thread-safe.
class SessionIdGenerator {
 public:
  explicit SessionIdGenerator(std::uint64_t seed);
  std::string next();

 private:
  std::mutex mu_;
  std::mt19937_64 rng_;
};

// ---------------------------------------------------------------------------
// Engine

struct TechniqueRule {
  std::string pattern;  // ECMAScript regex over the command line
  std::string technique;
};

struct EngineConfig {
  MemoryConfig memory;
  std::chrono::seconds idle_timeout{300};
  int max_turns = 200;
  std::vector<TechniqueRule> technique_rules;
};

struct LiveSession {
  std::string session_id;
  std::string peer;
  SessionState state;
  std::unique_ptr<Clock> clock;
  Timestamp started_at{};
  Timestamp last_activity{};
  SessionRecord record;  // mirror of what has been persisted
  int turns = 0;
  bool closed = false;
};

/// Runs workflow steps 2-6 for each command. Shared by all sessions; the
/// per-session state lives in LiveSession.
class Engine {
 public:
  using PromptObserver = std::function<void(const LiveSession&, const PromptBundle&)>;

  Engine(std::shared_ptr<const HoneypotProfile> profile, std::shared_ptr<Gateway> gateway,
         std::shared_ptr<RecordSink> sink, EngineConfig config, ClockFactory clocks = system_clock_factory());

  LiveSession open_session(std::string session_id, std::string peer);

  /// Returns the text the attacker sees for this command.
  std::string run_turn(LiveSession& session, std::string_view query);

  void record_login(LiveSession& session, std::string_view username, std::string_view password);
  void close_session(LiveSession& session, std::string_view reason);

  /// Called with every prompt sent to the model (inspection and tests).
  void set_prompt_observer(PromptObserver observer) { observer_ = std::move(observer); }

  const HoneypotProfile& profile() const { return *profile_; }
  const EngineConfig& config() const { return config_; }
  Gateway& gateway() { return *gateway_; }
  std::size_t sink_failures() const { return sink_failures_.load(); }

 private:
  std::vector<std::string> tags_for(std::string_view query) const;

  std::shared_ptr<const HoneypotProfile> profile_;
  std::shared_ptr<Gateway> gateway_;
  std::shared_ptr<RecordSink> sink_;
  EngineConfig config_;
  ClockFactory clocks_;
  std::string profile_digest_;
  std::vector<std::pair<std::regex, std::string>> technique_rules_;
  PromptObserver observer_;
  std::atomic<std::size_t> sink_failures_{0};
};

/// Deterministic non-response answer: "sh: <verb>: command not found".
std::string fallback_output(std::string_view query);

// ---------------------------------------------------------------------------
// Transports

enum class TransportKind { SshServer, PlainTcpLine };

struct AuthPolicy {
  enum class Mode { AcceptAny, FixedList };
  Mode mode = Mode::AcceptAny;
  int accept_after_attempts = 1;  // AcceptAny: succeed on this attempt (1..3)
  std::vector<std::pair<std::string, std::string>> credentials;  // FixedList

  /// attempt is 1-based.
  bool accepts(std::string_view user, std::string_view password, int attempt) const;
};

struct TransportBinding {
  TransportKind kind = TransportKind::PlainTcpLine;
  std::string listen_address = "127.0.0.1:2222";
  AuthPolicy auth;
  std::string banner = "Welcome to Ubuntu 20.04.6 LTS (GNU/Linux 5.4.0-169-generic x86_64)";
  std::string shell_prompt_template = "{user}@{host}:{cwd}{sigil} ";
};

/// Substitutes {user}, {host}, {cwd} and {sigil} ('#' for root, '$' else).
std::string render_shell_prompt(std::string_view templ, const HoneypotProfile& profile, std::string_view cwd = "~");

/// Line-level shell behaviour shared by every transport and by replay.
class ShellSession {
 public:
  struct Reply {
    std::string text;  // command output followed by the next prompt
    bool close = false;
    std::string reason;
  };

  ShellSession(Engine& engine, LiveSession session, const TransportBinding& binding);

  /// Banner and first prompt.
  std::string greeting() const;
  std::string prompt() const;
  Reply on_line(std::string_view line);
  void finish(std::string_view reason);

  LiveSession& session() { return session_; }
  const LiveSession& session() const { return session_; }

 private:
  Engine& engine_;
  LiveSession session_;
  const TransportBinding& binding_;
};

struct SshHostKey {
  std::array<unsigned char, 32> public_key{};
  std::array<unsigned char, 64> secret_key{};

  static SshHostKey generate();
  /// 32-byte seed stored as 64 hex characters; created when missing.
  static SshHostKey load_or_create(const std::filesystem::path& seed_file);
  static SshHostKey from_seed(const std::array<unsigned char, 32>& seed);
};

class BindError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Accepts connections on every binding, one thread and one isolated
/// LiveSession per connection.
class HoneypotServer {
 public:
  HoneypotServer(std::vector<TransportBinding> bindings, std::shared_ptr<Engine> engine,
                 std::optional<SshHostKey> host_key = std::nullopt, std::uint64_t seed = 0);
  ~HoneypotServer();

  /// Binds all listeners (throws BindError naming the address) and starts
  /// accepting in background threads.
  void start();
  /// Ports actually bound, in binding order (useful with port 0).
  std::vector<std::uint16_t> ports() const;
  /// Stops accepting, ends live sessions with reason "shutdown" and joins.
  void stop();
  std::size_t sessions_started() const { return sessions_started_.load(); }
  /// Blocks until no connection is being served.
  void wait_idle();

 private:
  struct Listener;
  void accept_loop(std::size_t listener_index);
  void handle_connection(int fd, std::string peer, const TransportBinding& binding);

  std::vector<TransportBinding> bindings_;
  std::shared_ptr<Engine> engine_;
  std::optional<SshHostKey> host_key_;
  SessionIdGenerator ids_;
  std::vector<std::unique_ptr<Listener>> listeners_;
  std::vector<std::thread> accept_threads_;
  struct Connections;
  std::shared_ptr<Connections> connections_;
  std::atomic<bool> stopping_{false};
  std::atomic<std::size_t> sessions_started_{0};
  bool stopped_ = false;
};

// Transport entry points; both return when the session ends.
void run_plain_tcp_session(int fd, ShellSession& shell, const std::atomic<bool>& stopping,
                           std::chrono::seconds idle_timeout);
void run_ssh_session(int fd, Engine& engine, const TransportBinding& binding, const SshHostKey& host_key,
                     std::string session_id, std::string peer, const std::atomic<bool>& stopping);

}  // namespace decoysh
