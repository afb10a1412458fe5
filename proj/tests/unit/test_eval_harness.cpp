#include <gtest/gtest.h>

#include "decoysh/eval_harness.hpp"
#include "support.hpp"

using namespace decoysh;
using namespace decoysh::test;
using nlohmann::json;

namespace {

Rational q(int n, int d) { return Rational(n) / Rational(d); }

TurnRecord ok_turn(int index, std::string query, std::string answer, std::vector<std::string> tags = {}) {
  TurnRecord t;
  t.index = index;
  t.query = std::move(query);
  t.answer = std::move(answer);
  t.impact = 0;
  t.technique_tags = std::move(tags);
  return t;
}

TurnRecord failed_turn(int index, std::string query, FailureKind kind, std::vector<std::string> tags = {}) {
  TurnRecord t;
  t.index = index;
  t.query = std::move(query);
  t.failure = FailureCause{kind, "x"};
  t.technique_tags = std::move(tags);
  return t;
}

SessionRecord session_of(std::string id, std::vector<TurnRecord> turns) {
  SessionRecord s;
  s.session_id = std::move(id);
  s.turns = std::move(turns);
  return s;
}

std::shared_ptr<Gateway> gateway_from(const json& script) {
  return std::make_shared<Gateway>(std::make_shared<ScriptedBackend>(ScriptedBackend::from_json(script)),
                                   GatewayConfig{});
}

}  // namespace

TEST(TurnClass, Quadrants) {
  EXPECT_EQ((TurnLabel{true, true, ""}.turn_class()), TurnClass::SALC);
  EXPECT_EQ((TurnLabel{true, false, ""}.turn_class()), TurnClass::SALNLC);
  EXPECT_EQ((TurnLabel{false, true, ""}.turn_class()), TurnClass::FALC);
  EXPECT_EQ((TurnLabel{false, false, ""}.turn_class()), TurnClass::FALNLC);
  EXPECT_EQ(to_string(TurnClass::SALNLC), "SALNLC");
}

TEST(Deception, WorkedExample) {
  ClassCounts c;
  c.salc = 3;
  c.salnlc = 1;
  c.falc = 1;
  auto d = score_deception(c);
  EXPECT_EQ(*d.accuracy, q(3, 4));
  EXPECT_EQ(*d.temptation, q(3, 4));
  EXPECT_EQ(*d.attack_success_rate, q(4, 5));
  EXPECT_EQ(*d.os_logic_compliance, q(4, 5));
}

TEST(Deception, EmptyDenominatorsAreAbsent) {
  ClassCounts c;
  c.falnlc = 2;
  auto d = score_deception(c);
  EXPECT_FALSE(d.accuracy);
  EXPECT_FALSE(d.temptation);
  EXPECT_EQ(*d.attack_success_rate, 0);
  EXPECT_EQ(format_pct(d.accuracy), "n/a");
  EXPECT_FALSE(score_deception(ClassCounts{}).os_logic_compliance);
}

TEST(Interaction, LengthsAndExecution) {
  // lengths 4 and 6, executed prefixes 4 and 3
  auto a = session_of("a", {ok_turn(1, "a", ""), ok_turn(2, "b", ""), ok_turn(3, "c", ""), ok_turn(4, "d", "")});
  auto b = session_of("b", {ok_turn(1, "a", ""), ok_turn(2, "b", ""), ok_turn(3, "c", ""),
                            failed_turn(4, "d", FailureKind::TransportError), ok_turn(5, "e", ""),
                            ok_turn(6, "f", "")});
  EXPECT_EQ(executed_length(a), 4u);
  EXPECT_EQ(executed_length(b), 3u);
  auto r = score_interaction({a, b});
  EXPECT_EQ(r.sessions, 2u);
  EXPECT_EQ(r.commands, 10u);
  EXPECT_EQ(r.responded, 9u);
  EXPECT_EQ(*r.mean_session_length_pct, q(7, 10));
  EXPECT_EQ(*r.full_session_response_rate, q(1, 2));
  EXPECT_EQ(*r.command_response_rate, q(9, 10));
  EXPECT_EQ(*r.mean_interaction_degree_pct, (q(1, 1) + q(5, 6)) / 2);
}

TEST(Interaction, EmptyCorpusAndEmptySessions) {
  auto r = score_interaction({});
  EXPECT_EQ(r.sessions, 0u);
  EXPECT_FALSE(r.full_session_response_rate);
  EXPECT_FALSE(r.command_response_rate);
  EXPECT_FALSE(r.mean_session_length_pct);
  EXPECT_FALSE(r.mean_interaction_degree_pct);
  auto only_empty = score_interaction({session_of("x", {})});
  EXPECT_EQ(only_empty.sessions, 0u);
}

TEST(FormatPct, RoundsHalfUp) {
  EXPECT_EQ(format_pct(q(3, 4)), "75.00%");
  EXPECT_EQ(format_pct(q(1, 3)), "33.33%");
  EXPECT_EQ(format_pct(q(2, 3)), "66.67%");
  EXPECT_EQ(format_pct(q(1, 80000)), "0.00%");
  EXPECT_EQ(format_pct(q(1, 20000)), "0.01%");  // exactly 0.005%
  EXPECT_EQ(format_pct(Rational(1)), "100.00%");
  EXPECT_EQ(format_pct(std::nullopt), "n/a");
}

TEST(RuleLabeler, Examples) {
  RuleLabeler l({{"^uname", "^Linux web-prod-03 ", true}}, "web-prod-03");
  SessionRecord s;
  auto salc = l.label(s, ok_turn(1, "uname -a", "Linux web-prod-03 5.4.0-169-generic x86_64"));
  ASSERT_TRUE(salc);
  EXPECT_EQ(salc->turn_class(), TurnClass::SALC);

  auto falc = l.label(s, ok_turn(2, "frob", "bash: frob: command not found"));
  ASSERT_TRUE(falc);
  EXPECT_EQ(falc->turn_class(), TurnClass::FALC);

  auto salnlc = l.label(s, ok_turn(3, "hostname", "ubuntu-server"));
  ASSERT_TRUE(salnlc);
  EXPECT_EQ(salnlc->turn_class(), TurnClass::SALNLC);

  auto engine_failure = l.label(s, failed_turn(4, "wget x", FailureKind::SecurityPolicy));
  EXPECT_EQ(engine_failure->turn_class(), TurnClass::FALC);

  auto mismatch = l.label(s, ok_turn(5, "uname -a", "Darwin"));
  EXPECT_EQ(mismatch->turn_class(), TurnClass::SALNLC);

  EXPECT_FALSE(l.label(s, ok_turn(6, "ls", "a b c")));
}

TEST(RuleLabeler, UnmatchedDefaultAndFixtureLoad) {
  RuleLabeler l({}, "h", TurnLabel{true, true, "rule"});
  SessionRecord s;
  EXPECT_EQ(l.label(s, ok_turn(1, "ls", "x"))->turn_class(), TurnClass::SALC);

  auto loaded = RuleLabeler::load(fixture("golden_rules.json"), "web-prod-03");
  EXPECT_GT(loaded.metadata()["rules"].get<int>(), 0);
  EXPECT_TRUE(RuleLabeler::looks_like_shell_error("cat: /x: No such file or directory"));
  EXPECT_FALSE(RuleLabeler::looks_like_shell_error("root"));
}

TEST(ManualLabeler, ParsesAndRejects) {
  auto m = ManualLabeler::parse("session_id,turn_index,succeeded,logic_compliant\ns1,1,true,false\ns1,2,0,1\n");
  EXPECT_EQ(m.size(), 2u);
  auto s = session_of("s1", {});
  EXPECT_EQ(m.label(s, ok_turn(1, "a", ""))->turn_class(), TurnClass::SALNLC);
  EXPECT_EQ(m.label(s, ok_turn(2, "a", ""))->turn_class(), TurnClass::FALC);
  EXPECT_FALSE(m.label(s, ok_turn(3, "a", "")));
  try {
    (void)ManualLabeler::parse("session_id,turn_index,succeeded,logic_compliant\ns1,1,true,true\ns1,1,true,true\n",
                               "a.csv");
    FAIL();
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("a.csv:3:"), std::string::npos) << e.what();
  }
  EXPECT_THROW((void)ManualLabeler::parse("session_id,turn_index,succeeded,logic_compliant\ns1,x,true,true\n"),
               InputError);
}

TEST(JudgeLabeler, RubricAndReplyParsing) {
  auto p = default_profile();
  auto req = JudgeLabeler::request_for(p, failed_turn(1, "wget x", FailureKind::TransportError));
  EXPECT_EQ(req.system, kJudgeRubric);
  EXPECT_NE(req.user.find("sh: wget: command not found"), std::string::npos);
  EXPECT_NE(req.user.find(p.settings.software.hostname), std::string::npos);

  auto l = JudgeLabeler::parse_reply(R"(verdict: {"succeeded": true, "logic_compliant": false})");
  ASSERT_TRUE(l);
  EXPECT_EQ(l->turn_class(), TurnClass::SALNLC);
  EXPECT_FALSE(JudgeLabeler::parse_reply("yes"));
  EXPECT_FALSE(JudgeLabeler::parse_reply(R"({"succeeded":"yes","logic_compliant":true})"));

  JudgeLabeler judge(gateway_from(json::parse(R"([{"kind":"any","reply":"{\"succeeded\":true,\"logic_compliant\":true}"}])")),
                     std::make_shared<HoneypotProfile>(p));
  EXPECT_EQ(judge.metadata()["rubric_version"], kJudgeRubricVersion);
  SessionRecord s;
  EXPECT_EQ(judge.label(s, ok_turn(1, "id", "uid=0(root)"))->turn_class(), TurnClass::SALC);
}

TEST(Classify, FailureTurnsNeverSucceed) {
  RuleLabeler l({}, "h", TurnLabel{true, true, "rule"});
  auto recs = std::vector<SessionRecord>{
      session_of("a", {ok_turn(1, "ls", "x"), failed_turn(2, "y", FailureKind::WrongFormat)})};
  auto labels = classify(recs, l);
  ASSERT_EQ(labels.labels.size(), 1u);
  ASSERT_EQ(labels.labels[0].size(), 2u);
  EXPECT_FALSE(labels.labels[0][1]->succeeded);
  EXPECT_EQ(labels.labeler, "rule");
}

TEST(Score, MisalignedLabelsThrow) {
  LabelSet labels;
  labels.labels = {{std::nullopt}};
  EXPECT_THROW(score(labels, {}), std::invalid_argument);
  EXPECT_THROW(score(labels, {session_of("a", {})}), std::invalid_argument);
}

TEST(Score, TechniqueTableAndJsonRoundTrip) {
  auto recs = std::vector<SessionRecord>{
      session_of("a", {ok_turn(1, "uname -a", "Linux", {"T1082"}),
                       failed_turn(2, "wget x", FailureKind::SecurityPolicy, {"T1105"}),
                       ok_turn(3, "cat /proc/cpuinfo", "cpu", {"T1082"})})};
  RuleLabeler l({}, "h", TurnLabel{true, true, "rule"});
  auto report = score(classify(recs, l), recs, "engine");
  ASSERT_EQ(report.techniques.size(), 2u);
  EXPECT_EQ(report.techniques[0].technique, "T1082");
  EXPECT_EQ(*report.techniques[0].response_rate, 1);
  EXPECT_EQ(report.techniques[1].technique, "T1105");
  EXPECT_EQ(*report.techniques[1].response_rate, 0);

  auto j = to_json(report);
  EXPECT_EQ(j["interaction"]["command_response_rate"]["exact"], "2/3");
  auto back = score_report_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_THROW(score_report_from_json(json::object()), InputError);
}

TEST(Report, SideBySideRendering) {
  auto recs = std::vector<SessionRecord>{session_of("a", {ok_turn(1, "ls", "x")})};
  RuleLabeler l({}, "h", TurnLabel{true, true, "rule"});
  auto engine = score(classify(recs, l), recs, "engine");
  auto baseline = score(LabelSet{"none", json::object(), {{std::nullopt}}}, recs, "baseline");
  auto md = render_markdown({engine, baseline});
  EXPECT_NE(md.find("| Metric | engine | baseline |"), std::string::npos);
  EXPECT_NE(md.find("| Accuracy | 100.00% | n/a |"), std::string::npos);
  auto csv = render_csv({engine, baseline});
  EXPECT_TRUE(csv.starts_with("metric,engine,baseline\n"));
  EXPECT_NE(csv.find("accuracy,1.000000,n/a\n"), std::string::npos);

  TempDir dir;
  auto paths = emit_report({engine, baseline}, dir.path());
  EXPECT_EQ(paths.size(), 3u);
  auto parsed = json::parse(read_file(dir / "report.json"));
  EXPECT_EQ(parsed["reports"].size(), 2u);
}

TEST(Replay, LengthExceededMidSessionStillAttemptsRest) {
  // second reply is a scripted context overflow; the third command still runs
  auto gw = gateway_from(json::parse(
      R"([{"match":"a","reply":"{\"output\":\"A\",\"state_change\":\"\",\"impact\":0}"},
          {"match":"b","fail":"length_exceeded"},
          {"match":"c","reply":"{\"output\":\"C\",\"state_change\":\"\",\"impact\":0}"}])"));
  ReplayCorpus corpus{{{"s", {"a", "b", "c"}}}, ""};
  auto run = replay(corpus, std::make_shared<HoneypotProfile>(default_profile()), gw, EngineConfig{}, ReplayOptions{});
  ASSERT_EQ(run.records.size(), 1u);
  const auto& t = run.records[0].turns;
  ASSERT_EQ(t.size(), 3u);
  EXPECT_EQ(t[1].failure->kind, FailureKind::LengthExceeded);
  EXPECT_EQ(*t[2].answer, "C");
  auto r = score_interaction(run.records);
  EXPECT_EQ(*r.mean_session_length_pct, q(1, 3));
  EXPECT_EQ(*r.command_response_rate, q(2, 3));
}

TEST(Replay, ParallelMatchesSerialAndResumes) {
  auto corpus = load_corpus(fixture("corpus.json"));
  auto profile = std::make_shared<HoneypotProfile>(default_profile());
  auto gw = std::make_shared<Gateway>(std::make_shared<ScriptedBackend>(ScriptedBackend::load(fixture("script.json"))),
                                      GatewayConfig{});
  ReplayOptions serial;
  serial.seed = 5;
  auto a = replay(corpus, profile, gw, EngineConfig{}, serial);
  ReplayOptions par = serial;
  par.parallel = 4;
  auto b = replay(corpus, profile, gw, EngineConfig{}, par);
  EXPECT_EQ(a.records, b.records);

  TempDir dir;
  ReplayOptions out = serial;
  out.out_dir = dir.path();
  auto first = replay(corpus, profile, gw, EngineConfig{}, out);
  EXPECT_EQ(first.resumed, 0u);
  std::filesystem::remove(dir / "sessions" / "0003.jsonl");
  auto second = replay(corpus, profile, gw, EngineConfig{}, out);
  EXPECT_EQ(second.resumed, corpus.sessions.size() - 1);
  EXPECT_EQ(second.records, first.records);
  EXPECT_EQ(first.records, a.records);
}
