#include "decoysh/llm_gateway.hpp"

#include <fstream>
#include <thread>

namespace decoysh {

using nlohmann::json;

std::vector<std::string> validate(const GatewayConfig& c) {
  std::vector<std::string> problems;
  if (c.request_timeout.count() <= 0) problems.push_back("gateway.request_timeout_s: must be > 0");
  if (c.max_retries_format < 0 || c.max_retries_format > 3) {
    problems.push_back("gateway.max_retries_format: must be in 0..3");
  }
  if (c.max_concurrent_requests < 1) problems.push_back("gateway.max_concurrent_requests: must be >= 1");
  if (c.min_request_interval.count() < 0) problems.push_back("gateway.min_request_interval_ms: must be >= 0");
  return problems;
}

ChatRequest make_request(const PromptBundle& bundle, int attempt) {
  ChatRequest r;
  r.system = bundle.system_text;
  r.user = bundle.memory_text + bundle.task_text;
  if (attempt > 0) {
    r.user += kRepairDirective;
    r.user += '\n';
  }
  r.query = bundle.query;
  r.attempt = attempt;
  return r;
}

json to_wire(const ChatRequest& request, const GatewayConfig& config) {
  return json{
      {"model", config.model_name},
      {"temperature", config.temperature},
      {"messages",
       json::array({json{{"role", "system"}, {"content", request.system}},
                    json{{"role", "user"}, {"content", request.user}}})},
  };
}

// ---------------------------------------------------------------------------
// ScriptedBackend

ScriptedBackend::ScriptedBackend(std::vector<Entry> entries) : entries_(std::move(entries)) {
  compiled_.reserve(entries_.size());
  for (const auto& e : entries_) {
    if (e.inject == Inject::None && e.replies.empty()) {
      throw std::invalid_argument("script entry '" + e.match + "' has no reply");
    }
    if (e.kind == MatchKind::Regex) {
      compiled_.emplace_back(std::regex(e.match, std::regex::ECMAScript));
    } else {
      compiled_.emplace_back(std::nullopt);
    }
  }
}

ScriptedBackend ScriptedBackend::from_json(const json& script) {
  if (!script.is_array()) throw std::invalid_argument("script: expected a JSON array");
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < script.size(); ++i) {
    const auto& item = script[i];
    const std::string where = "script[" + std::to_string(i) + "]";
    if (!item.is_object()) throw std::invalid_argument(where + ": expected an object");
    Entry e;
    std::string kind = item.value("kind", std::string("exact"));
    if (kind == "exact") {
      e.kind = MatchKind::Exact;
    } else if (kind == "regex") {
      e.kind = MatchKind::Regex;
    } else if (kind == "any") {
      e.kind = MatchKind::Any;
    } else {
      throw std::invalid_argument(where + ".kind: unknown '" + kind + "'");
    }
    if (e.kind != MatchKind::Any) {
      if (!item.contains("match") || !item["match"].is_string()) {
        throw std::invalid_argument(where + ".match: required string");
      }
      e.match = item["match"].get<std::string>();
    }
    if (item.contains("reply")) {
      e.replies.push_back(item["reply"].get<std::string>());
    } else if (item.contains("replies")) {
      e.replies = item["replies"].get<std::vector<std::string>>();
    }
    if (item.contains("fail")) {
      auto f = item["fail"].get<std::string>();
      if (f == "transport") {
        e.inject = Inject::Transport;
      } else if (f == "length_exceeded") {
        e.inject = Inject::LengthExceeded;
      } else {
        throw std::invalid_argument(where + ".fail: unknown '" + f + "'");
      }
    }
    if (e.inject == Inject::None && e.replies.empty()) {
      throw std::invalid_argument(where + ": needs reply, replies or fail");
    }
    e.delay = std::chrono::milliseconds(item.value("delay_ms", 0));
    entries.push_back(std::move(e));
  }
  return ScriptedBackend(std::move(entries));
}

ScriptedBackend ScriptedBackend::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open script " + path.string());
  return from_json(json::parse(in));
}

Expected<std::string> ScriptedBackend::send(const ChatRequest& request, const GatewayConfig&) {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& e = entries_[i];
    bool hit = false;
    switch (e.kind) {
      case MatchKind::Exact: hit = e.match == request.query; break;
      case MatchKind::Regex: hit = std::regex_search(request.query, *compiled_[i]); break;
      case MatchKind::Any: hit = true; break;
    }
    if (!hit) continue;
    if (e.delay.count() > 0) std::this_thread::sleep_for(e.delay);
    switch (e.inject) {
      case Inject::Transport:
        return FailureCause{FailureKind::TransportError, "scripted transport failure"};
      case Inject::LengthExceeded:
        return FailureCause{FailureKind::LengthExceeded, "scripted context overflow"};
      case Inject::None:
        break;
    }
    std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(request.attempt), e.replies.size() - 1);
    return e.replies[k];
  }
  return FailureCause{FailureKind::TransportError, "unscripted query"};
}

// ---------------------------------------------------------------------------
// HTTP reply interpretation (transport lives in http_backend.cpp)

Expected<std::string> interpret_http_reply(int status, const std::string& body) {
  json j = json::parse(body, nullptr, false);
  if (status == 200) {
    if (!j.is_discarded()) {
      auto choices = j.find("choices");
      if (choices != j.end() && choices->is_array() && !choices->empty()) {
        const auto& msg = (*choices)[0].value("message", json::object());
        if (msg.contains("content") && msg["content"].is_string()) return msg["content"].get<std::string>();
      }
    }
    return FailureCause{FailureKind::TransportError, "malformed completion response"};
  }
  std::string code, message;
  if (!j.is_discarded() && j.contains("error") && j["error"].is_object()) {
    const auto& err = j["error"];
    if (err.contains("code") && err["code"].is_string()) code = err["code"].get<std::string>();
    if (err.contains("message") && err["message"].is_string()) message = err["message"].get<std::string>();
  }
  if (code == "context_length_exceeded" || message.find("context length") != std::string::npos ||
      message.find("maximum context") != std::string::npos || status == 413) {
    return FailureCause{FailureKind::LengthExceeded, message.empty() ? "HTTP " + std::to_string(status) : message};
  }
  return FailureCause{FailureKind::TransportError,
                      "HTTP " + std::to_string(status) + (message.empty() ? "" : ": " + message)};
}

// ---------------------------------------------------------------------------
// Gateway

Gateway::Gateway(std::shared_ptr<ChatBackend> backend, GatewayConfig config, VerdictPolicy policy)
    : backend_(std::move(backend)), config_(std::move(config)), policy_(std::move(policy)) {
  if (!backend_) throw std::invalid_argument("gateway needs a backend");
  if (auto problems = validate(config_); !problems.empty()) throw std::invalid_argument(problems.front());
}

void Gateway::acquire() {
  std::unique_lock lock(mu_);
  cv_.wait(lock, [&] { return in_flight_ < config_.max_concurrent_requests; });
  ++in_flight_;
  if (config_.min_request_interval.count() > 0) {
    auto now = std::chrono::steady_clock::now();
    auto slot = std::max(now, next_slot_);
    next_slot_ = slot + config_.min_request_interval;
    lock.unlock();
    std::this_thread::sleep_until(slot);
  }
}

void Gateway::release() {
  {
    std::lock_guard lock(mu_);
    --in_flight_;
  }
  cv_.notify_one();
}

Expected<std::string> Gateway::complete(const ChatRequest& request) {
  acquire();
  struct Release {
    Gateway* g;
    ~Release() { g->release(); }
  } guard{this};
  try {
    return backend_->send(request, config_);
  } catch (const std::exception& e) {
    return FailureCause{FailureKind::TransportError, e.what()};
  }
}

Expected<std::string> Gateway::complete(const PromptBundle& bundle, int attempt) {
  return complete(make_request(bundle, attempt));
}

RepairOutcome Gateway::complete_with_repair(const PromptBundle& bundle) {
  RepairOutcome out{ModelVerdict{FailureCause{FailureKind::WrongFormat, "no attempt"}}, 0, 0};
  for (int attempt = 0; attempt <= config_.max_retries_format; ++attempt) {
    auto raw = complete(bundle, attempt);
    ++out.calls;
    out.retry_count = attempt;
    if (!raw) {
      out.verdict = ModelVerdict{raw.error()};
      return out;
    }
    out.verdict = parse_verdict(*raw, policy_, bundle.query);
    if (out.verdict.ok() || out.verdict.failure().kind != FailureKind::WrongFormat) return out;
  }
  return out;
}

}  // namespace decoysh
