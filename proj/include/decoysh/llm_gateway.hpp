#pragma once

// Chat-completion backends behind one request/response contract.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <memory>
#include <mutex>
#include <regex>
#include <string>
#include <vector>

#include "decoysh/domain.hpp"
#include "decoysh/prompt_manager.hpp"

namespace decoysh {

struct GatewayConfig {
  std::string endpoint_url = "https://api.openai.com/v1/chat/completions";
  std::string model_name = "gpt-4";
  std::string api_key_env_var = "OPENAI_API_KEY";
  std::chrono::seconds request_timeout{60};
  int max_retries_format = 2;
  int max_concurrent_requests = 4;
  std::chrono::milliseconds min_request_interval{0};
  double temperature = 0.2;
};

/// "key: problem" strings; empty when valid.
std::vector<std::string> validate(const GatewayConfig& config);

/// What actually goes over the wire: one system message (P + S + time) and
/// one user message (memory + enhanced task).
struct ChatRequest {
  std::string system;
  std::string user;
  std::string query;  // the attacker command, for scripted matching
  int attempt = 0;    // 0 for the first call of a turn, then 1.. for repairs
};

ChatRequest make_request(const PromptBundle& bundle, int attempt = 0);

/// Serializes to the OpenAI-compatible chat-completions body.
nlohmann::json to_wire(const ChatRequest& request, const GatewayConfig& config);

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  virtual Expected<std::string> send(const ChatRequest& request, const GatewayConfig& config) = 0;
  virtual std::string kind() const = 0;
};

/// Deterministic canned replies. Immutable after construction; the reply
/// for a repair attempt is chosen by the attempt number, so replays do not
/// depend on call history.
class ScriptedBackend final : public ChatBackend {
 public:
  enum class MatchKind { Exact, Regex, Any };
  enum class Inject { None, Transport, LengthExceeded };

  struct Entry {
    MatchKind kind = MatchKind::Exact;
    std::string match;
    std::vector<std::string> replies;  // reply[min(attempt, n-1)]
    Inject inject = Inject::None;
    std::chrono::milliseconds delay{0};
  };

  explicit ScriptedBackend(std::vector<Entry> entries);

  /// JSON array of {match, reply | replies, kind?: exact|regex|any,
  /// fail?: transport|length_exceeded, delay_ms?}.
  static ScriptedBackend from_json(const nlohmann::json& script);
  static ScriptedBackend load(const std::filesystem::path& path);

  Expected<std::string> send(const ChatRequest& request, const GatewayConfig& config) override;
  std::string kind() const override { return "scripted"; }

  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
  std::vector<std::optional<std::regex>> compiled_;
};

/// OpenAI-compatible HTTP(S) backend.
class HttpChatBackend final : public ChatBackend {
 public:
  explicit HttpChatBackend(std::string api_key);

  Expected<std::string> send(const ChatRequest& request, const GatewayConfig& config) override;
  std::string kind() const override { return "live"; }

 private:
  std::string api_key_;
};

/// Maps an HTTP status and body from a chat-completions endpoint to the
/// reply text or a failure cause.
Expected<std::string> interpret_http_reply(int status, const std::string& body);

struct RepairOutcome {
  ModelVerdict verdict;
  int retry_count = 0;
  int calls = 0;
};

/// Shared by all sessions; enforces the concurrency cap and the minimum
/// spacing between outbound requests.
class Gateway {
 public:
  Gateway(std::shared_ptr<ChatBackend> backend, GatewayConfig config, VerdictPolicy policy = VerdictPolicy{});

  Expected<std::string> complete(const PromptBundle& bundle, int attempt = 0);
  Expected<std::string> complete(const ChatRequest& request);

  /// Re-asks with a corrective line on WrongFormat, at most
  /// max_retries_format times.
  RepairOutcome complete_with_repair(const PromptBundle& bundle);

  const GatewayConfig& config() const { return config_; }
  const VerdictPolicy& policy() const { return policy_; }
  std::string backend_kind() const { return backend_->kind(); }

 private:
  void acquire();
  void release();

  std::shared_ptr<ChatBackend> backend_;
  GatewayConfig config_;
  VerdictPolicy policy_;

  std::mutex mu_;
  std::condition_variable cv_;
  int in_flight_ = 0;
  std::chrono::steady_clock::time_point next_slot_{};
};

}  // namespace decoysh
