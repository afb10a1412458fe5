#pragma once

// Corpus replay, per-turn labeling and the deception / interaction metrics.

#include <boost/multiprecision/cpp_int.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "decoysh/domain.hpp"
#include "decoysh/llm_gateway.hpp"
#include "decoysh/session_ledger.hpp"
#include "decoysh/terminal_frontend.hpp"

namespace decoysh {

using Rational = boost::multiprecision::cpp_rational;

// ---------------------------------------------------------------------------
// Replay

struct ReplayOptions {
  std::uint64_t seed = 0;
  Timestamp clock_start = Timestamp{std::chrono::milliseconds{1705320000000}};  // 2024-01-15T12:00:00Z
  std::chrono::milliseconds clock_step{1000};
  int parallel = 1;
  std::string peer = "203.0.113.10";
  TransportBinding binding;
  /// When set, each finished session is written to
  /// <out_dir>/sessions/NNNN.jsonl and sessions already present there are
  /// loaded instead of replayed.
  std::optional<std::filesystem::path> out_dir;
};

struct ReplayRun {
  std::vector<SessionRecord> records;  // corpus order
  std::size_t resumed = 0;
  std::vector<std::string> errors;
};

/// Each corpus session runs in a fresh engine session with its own stepped
/// clock; session ids come from `seed` in corpus order, so the output does
/// not depend on `parallel`.
ReplayRun replay(const ReplayCorpus& corpus, std::shared_ptr<const HoneypotProfile> profile,
                 std::shared_ptr<Gateway> gateway, const EngineConfig& engine_config, const ReplayOptions& options);

/// Drives one session over a plain line transport: waits for the prompt,
/// sends each command, then "exit". Returns everything received.
std::string drive_tcp_session(const std::string& host, std::uint16_t port, const std::vector<std::string>& commands,
                              const std::string& prompt, std::chrono::milliseconds timeout = std::chrono::seconds{30});

// ---------------------------------------------------------------------------
// Labels

enum class TurnClass { SALC, SALNLC, FALC, FALNLC };
std::string_view to_string(TurnClass c);

struct TurnLabel {
  bool succeeded = false;
  bool logic_compliant = false;
  std::string source;

  TurnClass turn_class() const;
  bool operator==(const TurnLabel&) const = default;
};

class Labeler {
 public:
  virtual ~Labeler() = default;
  /// nullopt when this labeler has no verdict for the turn.
  virtual std::optional<TurnLabel> label(const SessionRecord& session, const TurnRecord& turn) = 0;
  virtual std::string name() const = 0;
  virtual nlohmann::json metadata() const { return nlohmann::json::object(); }
};

struct GoldenRule {
  std::string command;  // regex searched in the command line
  std::string expect;   // regex searched in the answer
  bool success = true;
};

/// Golden-rule labeler. The first rule whose command pattern matches
/// decides; an answer that names a different host than the profile is
/// never logic compliant.
class RuleLabeler final : public Labeler {
 public:
  RuleLabeler(std::vector<GoldenRule> rules, std::string hostname,
              std::optional<TurnLabel> unmatched = std::nullopt);

  /// JSON: either a rule array or {"rules": [...], "unmatched": {...}}.
  static RuleLabeler load(const std::filesystem::path& file, std::string hostname);

  std::optional<TurnLabel> label(const SessionRecord& session, const TurnRecord& turn) override;
  std::string name() const override { return "rule"; }
  nlohmann::json metadata() const override;

  /// Shell-error wording: "command not found", "Permission denied", ...
  static bool looks_like_shell_error(std::string_view answer);
  /// True when the answer shows a hostname other than the profile's.
  bool contradicts_hostname(std::string_view query, std::string_view answer) const;

 private:
  struct Compiled {
    GoldenRule rule;
    std::regex command;
    std::regex expect;
  };
  std::vector<Compiled> rules_;
  std::string hostname_;
  std::optional<TurnLabel> unmatched_;
};

/// Human annotations from CSV: session_id,turn_index,succeeded,logic_compliant.
class ManualLabeler final : public Labeler {
 public:
  static ManualLabeler parse(std::string_view csv, std::string_view name = "<memory>");
  static ManualLabeler load(const std::filesystem::path& file);

  std::optional<TurnLabel> label(const SessionRecord& session, const TurnRecord& turn) override;
  std::string name() const override { return "manual"; }
  nlohmann::json metadata() const override;
  std::size_t size() const { return rows_.size(); }

 private:
  std::map<std::pair<std::string, int>, TurnLabel> rows_;
};

inline constexpr std::string_view kJudgeRubricVersion = "judge-rubric-1";
extern const std::string_view kJudgeRubric;

/// Asks a model to grade each turn against the fixed rubric.
class JudgeLabeler final : public Labeler {
 public:
  JudgeLabeler(std::shared_ptr<Gateway> gateway, std::shared_ptr<const HoneypotProfile> profile);

  std::optional<TurnLabel> label(const SessionRecord& session, const TurnRecord& turn) override;
  std::string name() const override { return "judge"; }
  nlohmann::json metadata() const override;

  static ChatRequest request_for(const HoneypotProfile& profile, const TurnRecord& turn);
  static std::optional<TurnLabel> parse_reply(std::string_view reply);

 private:
  std::shared_ptr<Gateway> gateway_;
  std::shared_ptr<const HoneypotProfile> profile_;
};

struct LabelSet {
  std::string labeler;
  nlohmann::json labeler_metadata = nlohmann::json::object();
  std::vector<std::vector<std::optional<TurnLabel>>> labels;  // [session][turn]
};

/// One label slot per turn. Engine failure turns never count as successful.
LabelSet classify(const std::vector<SessionRecord>& records, Labeler& labeler);

// ---------------------------------------------------------------------------
// Metrics

struct ClassCounts {
  std::uint64_t salc = 0;
  std::uint64_t salnlc = 0;
  std::uint64_t falc = 0;
  std::uint64_t falnlc = 0;
  std::uint64_t unlabeled = 0;

  std::uint64_t labeled() const { return salc + salnlc + falc + falnlc; }
  bool operator==(const ClassCounts&) const = default;
};

struct DeceptionReport {
  ClassCounts counts;
  std::optional<Rational> accuracy;
  std::optional<Rational> temptation;
  std::optional<Rational> attack_success_rate;
  std::optional<Rational> os_logic_compliance;
};

struct InteractionReport {
  std::uint64_t sessions = 0;
  std::uint64_t commands = 0;
  std::uint64_t responded = 0;
  std::optional<Rational> full_session_response_rate;
  std::optional<Rational> command_response_rate;
  std::optional<Rational> mean_session_length_pct;
  std::optional<Rational> mean_interaction_degree_pct;
};

struct TechniqueRow {
  std::string technique;
  std::uint64_t commands = 0;
  std::uint64_t responded = 0;
  std::optional<Rational> response_rate;
};

struct ScoreReport {
  std::string variant;
  std::string labeler;
  nlohmann::json labeler_metadata = nlohmann::json::object();
  DeceptionReport deception;
  InteractionReport interaction;
  std::vector<TechniqueRow> techniques;  // sorted by technique
};

DeceptionReport score_deception(const ClassCounts& counts);
InteractionReport score_interaction(const std::vector<SessionRecord>& records);
/// Turns strictly before the first engine non-response.
std::size_t executed_length(const SessionRecord& record);

/// Throws std::invalid_argument when labels and records are misaligned.
ScoreReport score(const LabelSet& labels, const std::vector<SessionRecord>& records, std::string variant = "engine");

nlohmann::json to_json(const ScoreReport& report);
/// Throws InputError naming the offending key.
ScoreReport score_report_from_json(const nlohmann::json& j);

/// Percent with two decimals, or "n/a".
std::string format_pct(const std::optional<Rational>& value);

enum class ReportFormat { Json, Csv, Markdown };

std::string render_json(const std::vector<ScoreReport>& reports);
std::string render_csv(const std::vector<ScoreReport>& reports);
std::string render_markdown(const std::vector<ScoreReport>& reports);

/// Writes report.json / report.csv / report.md into `dir`; returns the paths.
std::vector<std::filesystem::path> emit_report(const std::vector<ScoreReport>& reports, const std::filesystem::path& dir,
                                               const std::vector<ReportFormat>& formats = {
                                                   ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown});

}  // namespace decoysh
