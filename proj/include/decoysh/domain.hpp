#pragma once

// Vocabulary types shared by the prompt manager, gateway, ledger and
// evaluation harness.

#include <chrono>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

namespace decoysh {

using Timestamp = std::chrono::sys_time<std::chrono::milliseconds>;

/// ISO-8601 UTC with millisecond precision, e.g. "2024-05-01T12:00:00.000Z".
std::string format_timestamp(Timestamp t);

/// Accepts "YYYY-MM-DDTHH:MM:SS[.fraction][Z|+00:00]". Fractions beyond
/// milliseconds are truncated.
std::optional<Timestamp> parse_timestamp(std::string_view text);

/// Same as parse_timestamp but keeps microseconds (Cowrie logs carry six
/// fractional digits and ordering must respect them).
std::optional<std::int64_t> parse_timestamp_micros(std::string_view text);

// ---------------------------------------------------------------------------
// Failure taxonomy

enum class FailureKind {
  WrongFormat,
  WrongCommand,
  LengthExceeded,
  SecurityPolicy,
  TransportError,
};

std::string_view to_string(FailureKind kind);
std::optional<FailureKind> failure_kind_from_string(std::string_view text);

struct FailureCause {
  FailureKind kind = FailureKind::TransportError;
  std::string detail;

  bool operator==(const FailureCause&) const = default;
};

/// Value-or-failure carrier for operations whose failure modes are part of
/// the contract rather than exceptional.
template <class T>
class Expected {
 public:
  Expected(T value) : v_(std::move(value)) {}
  Expected(FailureCause cause) : v_(std::move(cause)) {}

  bool has_value() const { return v_.index() == 0; }
  explicit operator bool() const { return has_value(); }

  T& value() { return std::get<0>(v_); }
  const T& value() const { return std::get<0>(v_); }
  T* operator->() { return &value(); }
  const T* operator->() const { return &value(); }
  T& operator*() { return value(); }
  const T& operator*() const { return value(); }

  const FailureCause& error() const { return std::get<1>(v_); }

 private:
  std::variant<T, FailureCause> v_;
};

// ---------------------------------------------------------------------------
// Interactions and dynamic memory

constexpr int kMinImpact = 0;
constexpr int kMaxImpact = 4;

/// One (Q_i, A_i, C_i, F_i) quadruple.
struct Interaction {
  int index = 0;  // 1-based; counts successful interactions only
  std::string query;
  std::string answer;
  std::string state_change;
  int impact = 0;
  Timestamp wall_time{};

  bool operator==(const Interaction&) const = default;
};

void to_json(nlohmann::json& j, const Interaction& x);
void from_json(const nlohmann::json& j, Interaction& x);

struct StateChange {
  int index = 0;
  std::string text;

  bool operator==(const StateChange&) const = default;
};

/// Accumulated natural-language system deltas. Append-only.
class StateRegister {
 public:
  /// Throws std::invalid_argument if index does not exceed the last one.
  void append(int index, std::string text);

  const std::vector<StateChange>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

 private:
  std::vector<StateChange> entries_;
};

struct LedgerEntry {
  int index = 0;
  int original_impact = 0;
  double effective_impact = 0.0;
  int decays = 0;
};

/// Impact ledger FL: one entry per interaction still held in history.
class ImpactLedger {
 public:
  explicit ImpactLedger(double weaken_factor = 0.5);

  double weaken_factor() const { return weaken_factor_; }

  void insert(int index, int impact);
  /// Multiplies every effective impact by the weaken factor once.
  void decay();
  bool erase(int index);

  /// Index of the minimal effective impact; the oldest index wins ties.
  std::optional<int> min_index() const;

  const std::vector<LedgerEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

 private:
  double weaken_factor_;
  std::vector<LedgerEntry> entries_;
};

// ---------------------------------------------------------------------------
// Static honeypot configuration (principles P and settings S)

struct FewShotExample {
  std::string command;
  std::string output;
  std::string state_change;
  int impact = 0;

  bool operator==(const FewShotExample&) const = default;
};

struct Principles {
  std::string role;
  std::string time_sensitivity;
  std::string io_format;
  std::vector<FewShotExample> few_shot;

  bool operator==(const Principles&) const = default;
};

struct Hardware {
  std::string cpu_model;
  int cpu_count = 1;
  std::optional<std::string> gpu_model;  // absent means no GPU
  std::string storage;

  bool operator==(const Hardware&) const = default;
};

struct Software {
  std::string os_name;
  std::string os_version;
  std::string kernel;
  std::string hostname;
  std::string default_user;
  std::vector<int> open_ports;
  std::vector<std::string> users;
  std::vector<std::string> services;
  std::vector<std::string> scheduled_tasks;
  std::vector<std::string> filesystem_highlights;

  bool operator==(const Software&) const = default;
};

struct Settings {
  Hardware hardware;
  Software software;

  bool operator==(const Settings&) const = default;
};

constexpr std::size_t kMaxFewShot = 8;

struct HoneypotProfile {
  Principles principles;
  Settings settings;
  Timestamp boot_time{};

  bool operator==(const HoneypotProfile&) const = default;
};

/// A ready-to-use Ubuntu server profile with five few-shot examples.
HoneypotProfile default_profile();

/// Returns a list of "key: problem" strings; empty when valid.
std::vector<std::string> validate(const HoneypotProfile& profile);

void to_json(nlohmann::json& j, const HoneypotProfile& p);
/// Missing keys fall back to default_profile(); wrong types throw
/// std::invalid_argument naming the key.
void from_json(const nlohmann::json& j, HoneypotProfile& p);

/// Hex SHA-256 of the canonical JSON serialization.
std::string profile_digest(const HoneypotProfile& profile);

/// Hex SHA-256 of arbitrary bytes.
std::string sha256_hex(std::string_view bytes);

// ---------------------------------------------------------------------------

/// Deterministic impact classifier over the command verb and the declared
/// effect. Used when the model's own impact is missing or out of range.
int score_command_class(std::string_view command, std::string_view declared_effect);

}  // namespace decoysh
