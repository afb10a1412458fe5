#pragma once

// Single-document JSON configuration for every subcommand.

#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "decoysh/domain.hpp"
#include "decoysh/llm_gateway.hpp"
#include "decoysh/prompt_manager.hpp"
#include "decoysh/session_ledger.hpp"
#include "decoysh/terminal_frontend.hpp"

namespace decoysh {

/// Message starts with the offending key, e.g. "gateway.backend: ...".
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class BackendKind { Scripted, Live };
std::string_view to_string(BackendKind k);

struct LedgerConfig {
  std::filesystem::path path = "transcripts";
  JsonlSink::Rotation rotation = JsonlSink::Rotation::PerDay;
  bool durable = true;
};

struct AppConfig {
  std::vector<TransportBinding> transports;
  HoneypotProfile profile = default_profile();
  GatewayConfig gateway;
  BackendKind backend = BackendKind::Scripted;
  std::optional<std::filesystem::path> script;
  EngineConfig engine;
  LedgerConfig ledger;
  std::vector<std::string> refusal_patterns = VerdictPolicy::default_refusal_patterns();
  std::vector<std::string> wrong_command_patterns = VerdictPolicy::default_wrong_command_patterns();
  std::optional<std::filesystem::path> host_key_seed;
  std::string digest;  // sha256 of the canonical document
};

/// Built-in command-to-technique tags (MITRE ATT&CK ids).
std::vector<TechniqueRule> default_technique_rules();

AppConfig default_config();

/// Relative paths resolve against `base_dir`. Unknown keys are rejected.
AppConfig parse_config(const nlohmann::json& doc, const std::filesystem::path& base_dir = ".");
AppConfig load_config(const std::filesystem::path& file);

/// Scripted backend from `script`, or the HTTP backend with the key read
/// from the configured environment variable.
std::shared_ptr<ChatBackend> make_backend(const AppConfig& config);
std::shared_ptr<Gateway> make_gateway(const AppConfig& config);

}  // namespace decoysh
