#pragma once

// Prompt assembly, verdict parsing and dynamic memory maintenance
// (history, state register, impact ledger, pruning).

#include <memory>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <vector>

#include "decoysh/domain.hpp"

namespace decoysh {

struct MemoryConfig {
  double weaken_factor = 0.5;
  std::size_t context_budget = 48'000;  // characters
  double prune_watermark = 0.9;
};

/// Per-attacker dynamic memory.
class SessionState {
 public:
  SessionState(std::shared_ptr<const HoneypotProfile> profile, MemoryConfig memory = {});

  const HoneypotProfile& profile() const { return *profile_; }
  const std::shared_ptr<const HoneypotProfile>& profile_ptr() const { return profile_; }

  const std::vector<Interaction>& history() const { return history_; }
  const StateRegister& state_register() const { return register_; }
  const ImpactLedger& ledger() const { return ledger_; }

  std::size_t context_budget() const { return memory_.context_budget; }
  double prune_watermark() const { return memory_.prune_watermark; }
  const MemoryConfig& memory_config() const { return memory_; }

  /// Number of successful interactions so far; the next one gets this + 1.
  int completed() const { return completed_; }

  /// Set by prune_memory when the prompt cannot fit even with empty history.
  bool length_exceeded() const { return length_exceeded_; }

  // Mutators used by the memory operations below.
  void append(Interaction interaction);
  bool evict(int index);
  void decay() { ledger_.decay(); }
  void set_length_exceeded(bool v) { length_exceeded_ = v; }

 private:
  std::shared_ptr<const HoneypotProfile> profile_;
  MemoryConfig memory_;
  std::vector<Interaction> history_;
  StateRegister register_;
  ImpactLedger ledger_;
  int completed_ = 0;
  bool length_exceeded_ = false;
};

/// Fully rendered model request.
struct PromptBundle {
  std::string system_text;  // principles, time block, settings
  std::string memory_text;  // state register then history
  std::string task_text;    // enhanced question for the current command
  std::string query;        // raw command, not counted in the length
  std::size_t estimated_length = 0;

  bool operator==(const PromptBundle&) const = default;
};

// Fixed directive strings embedded in every task section.
inline constexpr std::string_view kSubTaskOutput =
    "1. Given the system state, what is the terminal's output of this command?";
inline constexpr std::string_view kSubTaskStateChange =
    "2. How does the system state change as a result of this command?";
inline constexpr std::string_view kSubTaskImpact =
    "3. Assign a numerical impact value from 0 to 4 to the command's effect on the system:";
inline constexpr std::string_view kSchemaDirective =
    "Respond with exactly one JSON object and nothing else, using this schema: "
    "{\"output\": string, \"state_change\": string, \"impact\": integer 0-4}";
inline constexpr std::string_view kRepairDirective =
    "Your previous reply could not be parsed. Reply again with ONLY the JSON object "
    "{\"output\": string, \"state_change\": string, \"impact\": integer 0-4}.";

std::string render_system_text(const HoneypotProfile& profile, Timestamp now);
std::string render_memory_text(const StateRegister& reg, const std::vector<Interaction>& history);
std::string render_task_text(std::string_view query);

/// Length of the prompt that would be rendered for `query` from the
/// current state, without building the strings twice.
std::size_t estimate_prompt_length(const SessionState& state, std::string_view query, Timestamp now);

/// Builds the prompt for one turn. History entries that do not fit the
/// budget are left out of the rendering (lowest effective impact first);
/// fails with LengthExceeded when even the history-free prompt is too long.
Expected<PromptBundle> construct_prompt(const SessionState& state, std::string_view query, Timestamp now);

// ---------------------------------------------------------------------------

struct Success {
  std::string answer;
  std::string state_change;
  int impact = 0;
  bool impact_from_fallback = false;

  bool operator==(const Success&) const = default;
};

struct ModelVerdict {
  std::variant<Success, FailureCause> outcome;

  bool ok() const { return outcome.index() == 0; }
  const Success& success() const { return std::get<0>(outcome); }
  const FailureCause& failure() const { return std::get<1>(outcome); }
};

/// Refusal and wrong-command wording. Patterns are ECMAScript regexes,
/// matched case-insensitively.
class VerdictPolicy {
 public:
  VerdictPolicy();  // built-in defaults
  VerdictPolicy(std::vector<std::string> refusal_patterns, std::vector<std::string> wrong_command_patterns);

  bool is_refusal(std::string_view text) const;
  bool is_wrong_command(std::string_view text) const;

  const std::vector<std::string>& refusal_patterns() const { return refusal_src_; }
  const std::vector<std::string>& wrong_command_patterns() const { return wrong_src_; }

  static std::vector<std::string> default_refusal_patterns();
  static std::vector<std::string> default_wrong_command_patterns();

 private:
  std::vector<std::string> refusal_src_, wrong_src_;
  std::vector<std::regex> refusal_, wrong_;
};

/// Never throws. `query` feeds the fallback classifier when the reported
/// impact is missing, non-integral or out of range; without it the value
/// is clamped.
ModelVerdict parse_verdict(std::string_view raw_model_text, const VerdictPolicy& policy = VerdictPolicy{},
                           std::string_view query = {});

// ---------------------------------------------------------------------------
// Memory maintenance. Per turn: decay_ledger, update_memory, prune_memory.

/// Appends (Q_i, A_i) to history, C_i to the register and (i, F_i)
/// undecayed to the ledger. Returns the new interaction index.
int update_memory(SessionState& state, std::string_view query, const Success& verdict, Timestamp now);

void decay_ledger(SessionState& state);

struct PruneReport {
  std::vector<int> evicted;  // in eviction order
  bool length_exceeded = false;
};

/// Evicts minimal-impact history entries (oldest on ties) while the prompt
/// for `pending_query` is above watermark x budget. The register is never
/// touched.
PruneReport prune_memory(SessionState& state, std::string_view pending_query = {}, Timestamp now = {});

}  // namespace decoysh
