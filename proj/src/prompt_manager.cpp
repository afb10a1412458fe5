#include "decoysh/prompt_manager.hpp"

#include <algorithm>
#include <cmath>

namespace decoysh {

using nlohmann::json;

// ---------------------------------------------------------------------------
// SessionState

SessionState::SessionState(std::shared_ptr<const HoneypotProfile> profile, MemoryConfig memory)
    : profile_(std::move(profile)), memory_(memory), ledger_(memory.weaken_factor) {
  if (!profile_) throw std::invalid_argument("session state needs a profile");
  if (!(memory_.prune_watermark > 0.0 && memory_.prune_watermark <= 1.0)) {
    throw std::invalid_argument("prune watermark must lie in (0, 1]");
  }
  if (memory_.context_budget == 0) throw std::invalid_argument("context budget must be positive");
}

void SessionState::append(Interaction interaction) {
  if (interaction.index != completed_ + 1) throw std::invalid_argument("interaction index out of sequence");
  ledger_.insert(interaction.index, interaction.impact);
  // Read-only commands have nothing to register.
  if (interaction.state_change.find_first_not_of(" \t\r\n") != std::string::npos) {
    register_.append(interaction.index, interaction.state_change);
  }
  history_.push_back(std::move(interaction));
  ++completed_;
}

bool SessionState::evict(int index) {
  auto it = std::find_if(history_.begin(), history_.end(),
                         [&](const Interaction& x) { return x.index == index; });
  if (it == history_.end()) return false;
  history_.erase(it);
  ledger_.erase(index);
  return true;
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

void join_into(std::string& out, const std::vector<std::string>& items) {
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ", ";
    out += items[i];
  }
}

std::string verdict_json(const FewShotExample& ex) {
  json j = {{"output", ex.output}, {"state_change", ex.state_change}, {"impact", ex.impact}};
  return j.dump();
}

constexpr std::string_view kImpactScale =
    "   0 = read file, display system information\n"
    "   1 = create file, install tool\n"
    "   2 = modify files or directories, change working directory, change shell\n"
    "   3 = start or stop a service, download a file, elevate privilege\n"
    "   4 = impact services, delete files, change a password\n";

std::string render_history_entry(const Interaction& x) {
  std::string out = "[" + std::to_string(x.index) + "] $ " + x.query + "\n";
  out += x.answer;
  if (!x.answer.empty() && x.answer.back() != '\n') out += '\n';
  return out;
}

std::string render_register_entry(const StateChange& c) {
  return "[" + std::to_string(c.index) + "] " + c.text + "\n";
}

constexpr std::string_view kRegisterHeader = "## System state changes so far\n";
constexpr std::string_view kHistoryHeader = "## Recent command history\n";
constexpr std::string_view kEmptyMarker = "(none)\n";

}  // namespace

std::string render_system_text(const HoneypotProfile& profile, Timestamp now) {
  const auto& pr = profile.principles;
  const auto& hw = profile.settings.hardware;
  const auto& sw = profile.settings.software;

  std::string out;
  out += "## Principles\n";
  out += "Role: " + pr.role + "\n";
  out += "Time: " + pr.time_sensitivity + "\n";
  out += "Current time: " + format_timestamp(now) + "\n";
  out += "Boot time: " + format_timestamp(profile.boot_time) + "\n";
  out += "Format: " + pr.io_format + "\n";
  if (!pr.few_shot.empty()) {
    out += "Examples:\n";
    for (const auto& ex : pr.few_shot) {
      out += "$ " + ex.command + "\n" + verdict_json(ex) + "\n";
    }
  }

  out += "## Settings\n";
  out += "Hardware:\n";
  out += "  CPU: " + std::to_string(hw.cpu_count) + " x " + hw.cpu_model + "\n";
  out += "  GPU: " + (hw.gpu_model ? *hw.gpu_model : std::string("none")) + "\n";
  out += "  Storage: " + hw.storage + "\n";
  out += "Software:\n";
  out += "  OS: " + sw.os_name + " " + sw.os_version + "\n";
  out += "  Kernel: " + sw.kernel + "\n";
  out += "  Hostname: " + sw.hostname + "\n";
  out += "  Logged-in user: " + sw.default_user + "\n";
  out += "  Open ports: ";
  for (std::size_t i = 0; i < sw.open_ports.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(sw.open_ports[i]);
  }
  out += "\n  User accounts: ";
  join_into(out, sw.users);
  out += "\n  Running services: ";
  join_into(out, sw.services);
  out += "\n  Scheduled tasks: ";
  join_into(out, sw.scheduled_tasks);
  out += "\n  Filesystem: ";
  join_into(out, sw.filesystem_highlights);
  out += "\n";
  return out;
}

std::string render_memory_text(const StateRegister& reg, const std::vector<Interaction>& history) {
  std::string out(kRegisterHeader);
  if (reg.empty()) out += kEmptyMarker;
  for (const auto& c : reg.entries()) out += render_register_entry(c);
  out += kHistoryHeader;
  if (history.empty()) out += kEmptyMarker;
  for (const auto& x : history) out += render_history_entry(x);
  return out;
}

std::string render_task_text(std::string_view query) {
  std::string out = "## Current command\n$ ";
  out += query;
  out += "\nAnswer these sub-tasks:\n";
  out += kSubTaskOutput;
  out += '\n';
  out += kSubTaskStateChange;
  out += '\n';
  out += kSubTaskImpact;
  out += '\n';
  out += kImpactScale;
  out += kSchemaDirective;
  out += '\n';
  return out;
}

namespace {

std::size_t memory_fixed_length(const SessionState& state) {
  std::size_t n = kRegisterHeader.size() + kHistoryHeader.size();
  if (state.state_register().empty()) n += kEmptyMarker.size();
  for (const auto& c : state.state_register().entries()) n += render_register_entry(c).size();
  return n;
}

std::size_t fixed_length(const SessionState& state, std::string_view query, Timestamp now) {
  return render_system_text(state.profile(), now).size() + render_task_text(query).size() +
         memory_fixed_length(state);
}

std::size_t history_length(const std::vector<Interaction>& history) {
  if (history.empty()) return kEmptyMarker.size();
  std::size_t n = 0;
  for (const auto& x : history) n += render_history_entry(x).size();
  return n;
}

}  // namespace

std::size_t estimate_prompt_length(const SessionState& state, std::string_view query, Timestamp now) {
  return fixed_length(state, query, now) + history_length(state.history());
}

Expected<PromptBundle> construct_prompt(const SessionState& state, std::string_view query, Timestamp now) {
  const std::size_t budget = state.context_budget();
  PromptBundle b;
  b.system_text = render_system_text(state.profile(), now);
  b.task_text = render_task_text(query);
  b.query = std::string(query);
  const std::size_t base = b.system_text.size() + b.task_text.size() + memory_fixed_length(state);
  if (base + kEmptyMarker.size() > budget) {
    return FailureCause{FailureKind::LengthExceeded,
                        "prompt without history is " + std::to_string(base + kEmptyMarker.size()) +
                            " chars, budget " + std::to_string(budget)};
  }

  std::vector<Interaction> shown = state.history();
  if (base + history_length(shown) > budget) {
    // Render-only trimming; the state itself is pruned by prune_memory.
    ImpactLedger scratch = state.ledger();
    while (!shown.empty() && base + history_length(shown) > budget) {
      auto idx = scratch.min_index();
      if (!idx) break;
      scratch.erase(*idx);
      std::erase_if(shown, [&](const Interaction& x) { return x.index == *idx; });
    }
  }

  b.memory_text = render_memory_text(state.state_register(), shown);
  b.estimated_length = b.system_text.size() + b.memory_text.size() + b.task_text.size();
  return b;
}

// ---------------------------------------------------------------------------
// Verdict parsing

namespace {

std::vector<std::regex> compile(const std::vector<std::string>& patterns) {
  std::vector<std::regex> out;
  out.reserve(patterns.size());
  for (const auto& p : patterns) {
    out.emplace_back(p, std::regex::ECMAScript | std::regex::icase | std::regex::optimize);
  }
  return out;
}

bool any_match(const std::vector<std::regex>& res, std::string_view text) {
  for (const auto& re : res) {
    if (std::regex_search(text.begin(), text.end(), re)) return true;
  }
  return false;
}

// Returns the end (one past '}') of the balanced object starting at `open`.
std::optional<std::size_t> match_object(std::string_view s, std::size_t open) {
  int depth = 0;
  bool in_string = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    char c = s[i];
    if (in_string) {
      if (c == '\\') {
        ++i;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{') {
      ++depth;
    } else if (c == '}') {
      if (--depth == 0) return i + 1;
    }
  }
  return std::nullopt;
}

bool has_schema(const json& j) {
  return j.is_object() && j.contains("output") && j["output"].is_string() && j.contains("state_change") &&
         j["state_change"].is_string();
}

std::optional<json> first_schema_object(std::string_view raw) {
  for (std::size_t pos = raw.find('{'); pos != std::string_view::npos; pos = raw.find('{', pos + 1)) {
    auto end = match_object(raw, pos);
    if (!end) continue;
    json j = json::parse(raw.substr(pos, *end - pos), nullptr, /*allow_exceptions=*/false);
    if (!j.is_discarded() && has_schema(j)) return j;
  }
  return std::nullopt;
}

std::optional<int> integral_impact(const json& j) {
  if (j.is_number_integer() || j.is_number_unsigned()) {
    auto v = j.get<std::int64_t>();
    if (v >= kMinImpact && v <= kMaxImpact) return static_cast<int>(v);
    return std::nullopt;
  }
  if (j.is_number_float()) {
    double v = j.get<double>();
    if (std::isfinite(v) && v == std::floor(v) && v >= kMinImpact && v <= kMaxImpact) {
      return static_cast<int>(v);
    }
  }
  return std::nullopt;
}

int clamp_impact(const json& j) {
  if (j.is_number()) {
    double v = j.get<double>();
    if (std::isfinite(v)) return static_cast<int>(std::clamp(std::round(v), 0.0, 4.0));
  }
  return 0;
}

}  // namespace

VerdictPolicy::VerdictPolicy()
    : VerdictPolicy(default_refusal_patterns(), default_wrong_command_patterns()) {}

VerdictPolicy::VerdictPolicy(std::vector<std::string> refusal_patterns,
                             std::vector<std::string> wrong_command_patterns)
    : refusal_src_(std::move(refusal_patterns)),
      wrong_src_(std::move(wrong_command_patterns)),
      refusal_(compile(refusal_src_)),
      wrong_(compile(wrong_src_)) {}

std::vector<std::string> VerdictPolicy::default_refusal_patterns() {
  return {
      R"(\bI(?:'m| am) sorry\b)",
      R"(\bI (?:cannot|can't|can not|won't|will not) (?:help|assist|comply|do that|provide|execute|run|perform))",
      R"(\bI(?:'m| am) (?:unable|not able) to (?:help|assist|comply|execute|run|perform))",
      R"(\bas an AI\b)",
      R"(\b(?:against|violates?) (?:my|the|our) (?:policy|policies|guidelines|usage polic))",
      R"(\bI must decline\b)",
  };
}

std::vector<std::string> VerdictPolicy::default_wrong_command_patterns() {
  return {
      R"(\bnot a valid (?:linux |unix |shell |bash )?command\b)",
      R"(\b(?:the )?command (?:is|appears to be|seems) (?:invalid|incorrect|malformed|incomplete)\b)",
      R"(\binvalid command\b)",
      R"(\bcannot be executed in this (?:environment|system)\b)",
  };
}

bool VerdictPolicy::is_refusal(std::string_view text) const { return any_match(refusal_, text); }
bool VerdictPolicy::is_wrong_command(std::string_view text) const { return any_match(wrong_, text); }

ModelVerdict parse_verdict(std::string_view raw, const VerdictPolicy& policy, std::string_view query) {
  try {
    auto obj = first_schema_object(raw);
    if (!obj) {
      if (policy.is_refusal(raw)) {
        return {FailureCause{FailureKind::SecurityPolicy, "model refused: " + std::string(raw.substr(0, 200))}};
      }
      if (policy.is_wrong_command(raw)) {
        return {FailureCause{FailureKind::WrongCommand, "model rejected command: " + std::string(raw.substr(0, 200))}};
      }
      return {FailureCause{FailureKind::WrongFormat, raw.empty() ? "empty reply" : "no JSON object with output/state_change"}};
    }

    Success s;
    s.answer = (*obj)["output"].get<std::string>();
    s.state_change = (*obj)["state_change"].get<std::string>();
    if (policy.is_refusal(s.answer)) {
      return {FailureCause{FailureKind::SecurityPolicy, "model refused inside output: " + s.answer.substr(0, 200)}};
    }

    std::optional<int> impact;
    if (auto it = obj->find("impact"); it != obj->end()) impact = integral_impact(*it);
    if (impact) {
      s.impact = *impact;
    } else if (!query.empty()) {
      s.impact = score_command_class(query, s.state_change);
      s.impact_from_fallback = true;
    } else {
      auto it = obj->find("impact");
      s.impact = it == obj->end() ? 0 : clamp_impact(*it);
      s.impact_from_fallback = true;
    }
    return {std::move(s)};
  } catch (const std::exception& e) {
    return {FailureCause{FailureKind::WrongFormat, std::string("parse error: ") + e.what()}};
  }
}

// ---------------------------------------------------------------------------
// Memory maintenance

int update_memory(SessionState& state, std::string_view query, const Success& verdict, Timestamp now) {
  Interaction x;
  x.index = state.completed() + 1;
  x.query = std::string(query);
  x.answer = verdict.answer;
  x.state_change = verdict.state_change;
  x.impact = std::clamp(verdict.impact, kMinImpact, kMaxImpact);
  x.wall_time = now;
  state.append(std::move(x));
  return state.completed();
}

void decay_ledger(SessionState& state) { state.decay(); }

PruneReport prune_memory(SessionState& state, std::string_view pending_query, Timestamp now) {
  PruneReport report;
  const double threshold = state.prune_watermark() * static_cast<double>(state.context_budget());
  // Eviction only touches history, so the fixed part is measured once.
  const std::size_t fixed = fixed_length(state, pending_query, now);
  auto estimate = [&] { return fixed + history_length(state.history()); };
  while (!state.history().empty() && static_cast<double>(estimate()) > threshold) {
    auto idx = state.ledger().min_index();
    if (!idx) break;
    state.evict(*idx);
    report.evicted.push_back(*idx);
  }
  report.length_exceeded = estimate() > state.context_budget();
  state.set_length_exceeded(report.length_exceeded);
  return report;
}

}  // namespace decoysh
