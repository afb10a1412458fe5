#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <set>

#include "decoysh/eval_harness.hpp"
#include "decoysh/terminal_frontend.hpp"
#include "support.hpp"

using namespace decoysh;
using namespace decoysh::test;
using nlohmann::json;

namespace {

const Timestamp kStart = *parse_timestamp("2024-01-15T12:00:00Z");

// Collects events in memory.
class MemorySink final : public RecordSink {
 public:
  bool write(const json& event) override {
    std::lock_guard lock(mu);
    events.push_back(event);
    return !fail;
  }
  std::mutex mu;
  std::vector<json> events;
  bool fail = false;
};

std::shared_ptr<Gateway> gateway_from(const std::string& script) {
  auto backend = std::make_shared<ScriptedBackend>(ScriptedBackend::from_json(json::parse(script)));
  return std::make_shared<Gateway>(backend, GatewayConfig{});
}

std::shared_ptr<Engine> engine_with(const std::string& script, std::shared_ptr<RecordSink> sink = nullptr,
                                    EngineConfig cfg = {}) {
  return std::make_shared<Engine>(std::make_shared<HoneypotProfile>(default_profile()), gateway_from(script),
                                  std::move(sink), std::move(cfg), stepped_clock_factory(kStart));
}

std::string script_of(std::initializer_list<std::pair<const char*, std::string>> items) {
  json a = json::array();
  for (const auto& [m, reply] : items) a.push_back({{"match", m}, {"reply", reply}});
  return a.dump();
}

}  // namespace

TEST(Clock, SteppedClockAdvances) {
  SteppedClock c(kStart, std::chrono::milliseconds(250));
  EXPECT_EQ(c.now(), kStart);
  EXPECT_EQ(c.now(), kStart + std::chrono::milliseconds(250));
}

TEST(SessionIds, DeterministicPerSeedAndWellFormed) {
  SessionIdGenerator a(42), b(42), c(43);
  std::set<std::string> seen;
  for (int i = 0; i < 50; ++i) {
    auto x = a.next();
    EXPECT_EQ(x, b.next());
    EXPECT_EQ(x.size(), 12u);
    EXPECT_EQ(x.find_first_not_of("0123456789abcdef"), std::string::npos);
    seen.insert(x);
  }
  EXPECT_EQ(seen.size(), 50u);
  EXPECT_NE(SessionIdGenerator(42).next(), c.next());
}

TEST(Fallback, ShellErrorUsesVerb) {
  EXPECT_EQ(fallback_output("wget http://x/y"), "sh: wget: command not found");
  EXPECT_EQ(fallback_output("  ls|grep a"), "sh: ls: command not found");
}

TEST(Prompt, RenderedFromProfile) {
  auto p = default_profile();
  EXPECT_EQ(render_shell_prompt("{user}@{host}:{cwd}{sigil} ", p), "root@web-prod-03:~# ");
  p.settings.software.default_user = "ubuntu";
  EXPECT_EQ(render_shell_prompt("{user}@{host}:{cwd}{sigil} ", p, "/tmp"), "ubuntu@web-prod-03:/tmp$ ");
}

TEST(Auth, Policies) {
  AuthPolicy any;
  any.accept_after_attempts = 2;
  EXPECT_FALSE(any.accepts("root", "x", 1));
  EXPECT_TRUE(any.accepts("root", "x", 2));
  AuthPolicy fixed;
  fixed.mode = AuthPolicy::Mode::FixedList;
  fixed.credentials = {{"root", "toor"}};
  EXPECT_TRUE(fixed.accepts("root", "toor", 1));
  EXPECT_FALSE(fixed.accepts("root", "root", 1));
}

TEST(Engine, SuccessfulTurnUpdatesMemoryAndLedger) {
  auto sink = std::make_shared<MemorySink>();
  EngineConfig cfg;
  cfg.technique_rules = {{"^uname", "T1082"}};
  auto engine = engine_with(script_of({{"uname -a", verdict_json("Linux web-prod-03\n", "", 0)},
                                       {"touch /tmp/a", verdict_json("", "created /tmp/a", 1)}}),
                            sink, cfg);
  auto s = engine->open_session("s1", "1.2.3.4");
  EXPECT_EQ(engine->run_turn(s, "uname -a"), "Linux web-prod-03\n");
  engine->run_turn(s, "touch /tmp/a");
  engine->close_session(s, "exit");

  EXPECT_EQ(s.state.completed(), 2);
  EXPECT_EQ(s.state.state_register().size(), 1u);
  ASSERT_EQ(s.record.turns.size(), 2u);
  EXPECT_EQ(s.record.turns[0].technique_tags, std::vector<std::string>{"T1082"});
  EXPECT_EQ(s.record.turns[1].impact, 1);
  // connect, two turns, close
  ASSERT_EQ(sink->events.size(), 4u);
  EXPECT_EQ(sink->events[1]["output"], "Linux web-prod-03\n");
  EXPECT_EQ(sink->events[3]["end_reason"], "exit");
}

TEST(Engine, FailureGivesFallbackAndLeavesMemoryUntouched) {
  auto engine = engine_with(R"([{"match":"wget x","reply":"I'm sorry, I can't help with that."}])");
  auto s = engine->open_session("s1", "p");
  EXPECT_EQ(engine->run_turn(s, "wget x"), "sh: wget: command not found");
  EXPECT_EQ(s.state.completed(), 0);
  EXPECT_TRUE(s.state.history().empty());
  ASSERT_TRUE(s.record.turns[0].failure);
  EXPECT_EQ(s.record.turns[0].failure->kind, FailureKind::SecurityPolicy);
  EXPECT_FALSE(s.record.turns[0].responded());
}

TEST(Engine, LengthExceededSkipsBackendAndContinues) {
  EngineConfig cfg;
  cfg.memory.context_budget = 300;
  auto engine = engine_with(R"([{"kind":"any","reply":"unused"}])", nullptr, cfg);
  int observed = 0;
  engine->set_prompt_observer([&](const LiveSession&, const PromptBundle&) { ++observed; });
  auto s = engine->open_session("s", "p");
  engine->run_turn(s, "ls");
  engine->run_turn(s, "id");
  EXPECT_EQ(observed, 0);
  ASSERT_EQ(s.record.turns.size(), 2u);
  EXPECT_EQ(s.record.turns[1].failure->kind, FailureKind::LengthExceeded);
}

TEST(Engine, SinkFailuresAreCountedNotFatal) {
  auto sink = std::make_shared<MemorySink>();
  sink->fail = true;
  auto engine = engine_with(script_of({{"id", verdict_json("uid=0(root)", "", 0)}}), sink);
  auto s = engine->open_session("s", "p");
  EXPECT_EQ(engine->run_turn(s, "id"), "uid=0(root)");
  EXPECT_EQ(engine->sink_failures(), 2u);
}

TEST(Shell, LineHandling) {
  auto engine = engine_with(script_of({{"id", verdict_json("uid=0(root)", "", 0)}}));
  TransportBinding binding;
  ShellSession shell(*engine, engine->open_session("s", "p"), binding);
  EXPECT_TRUE(shell.greeting().starts_with(binding.banner));
  EXPECT_TRUE(shell.greeting().ends_with("root@web-prod-03:~# "));
  auto empty = shell.on_line("   ");
  EXPECT_EQ(empty.text, shell.prompt());
  auto r = shell.on_line("id\r");
  EXPECT_EQ(r.text, "uid=0(root)\n" + shell.prompt());
  auto bye = shell.on_line("exit");
  EXPECT_TRUE(bye.close);
  EXPECT_EQ(bye.reason, "exit");
  EXPECT_EQ(shell.session().record.turns.size(), 1u);
}

TEST(Shell, MaxTurnsCloses) {
  EngineConfig cfg;
  cfg.max_turns = 2;
  auto engine = engine_with(R"([{"kind":"any","reply":"{\"output\":\"\",\"state_change\":\"\",\"impact\":0}"}])",
                            nullptr, cfg);
  TransportBinding binding;
  ShellSession shell(*engine, engine->open_session("s", "p"), binding);
  EXPECT_FALSE(shell.on_line("a").close);
  auto r = shell.on_line("b");
  EXPECT_TRUE(r.close);
  EXPECT_EQ(r.reason, "max_turns");
}

TEST(Server, PlainTcpSessionIsRecorded) {
  TempDir dir;
  auto sink = std::make_shared<JsonlSink>(dir / "t.jsonl", JsonlSink::Rotation::PerRun, false);
  auto engine = engine_with(script_of({{"whoami", verdict_json("root", "", 0)}}), sink);
  TransportBinding binding;
  binding.listen_address = "127.0.0.1:0";
  HoneypotServer server({binding}, engine, std::nullopt, 9);
  server.start();
  auto port = server.ports().at(0);
  ASSERT_NE(port, 0);
  auto prompt = render_shell_prompt(binding.shell_prompt_template, engine->profile());
  auto got = drive_tcp_session("127.0.0.1", port, {"whoami", "nosuch"}, prompt);
  server.wait_idle();
  server.stop();
  EXPECT_NE(got.find("root\n"), std::string::npos) << got;
  EXPECT_NE(got.find("sh: nosuch: command not found"), std::string::npos);
  EXPECT_EQ(server.sessions_started(), 1u);

  auto load = load_transcripts({dir / "t.jsonl"}, true);
  ASSERT_EQ(load.records.size(), 1u);
  const auto& r = load.records[0];
  EXPECT_EQ(r.session_id, SessionIdGenerator(9).next());
  EXPECT_EQ(r.peer, "127.0.0.1");
  ASSERT_EQ(r.turns.size(), 2u);
  EXPECT_TRUE(r.turns[0].responded());
  EXPECT_EQ(r.turns[1].failure->kind, FailureKind::TransportError);
  EXPECT_EQ(r.end_reason, "exit");
}

TEST(Server, BindErrorNamesAddress) {
  auto engine = engine_with("[]");
  TransportBinding a;
  a.listen_address = "127.0.0.1:0";
  HoneypotServer first({a}, engine);
  first.start();
  TransportBinding b;
  b.listen_address = "127.0.0.1:" + std::to_string(first.ports().at(0));
  HoneypotServer second({b}, engine);
  try {
    second.start();
    FAIL() << "expected BindError";
  } catch (const BindError& e) {
    EXPECT_NE(std::string(e.what()).find(b.listen_address), std::string::npos) << e.what();
  }
  first.stop();
}

TEST(Server, StopEndsLiveSessionsWithShutdown) {
  TempDir dir;
  auto sink = std::make_shared<JsonlSink>(dir / "t.jsonl", JsonlSink::Rotation::PerRun, false);
  auto engine = engine_with("[]", sink);
  TransportBinding binding;
  binding.listen_address = "127.0.0.1:0";
  HoneypotServer server({binding}, engine);
  server.start();
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(server.ports().at(0));
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  ASSERT_EQ(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr), 0);
  char buf[256];
  ASSERT_GT(::recv(fd, buf, sizeof buf, 0), 0);  // greeting
  server.stop();
  ::close(fd);
  auto load = load_transcripts({dir / "t.jsonl"}, true);
  ASSERT_EQ(load.records.size(), 1u);
  EXPECT_EQ(load.records[0].end_reason, "shutdown");
}

TEST(HostKey, SeedFileIsStable) {
  TempDir dir;
  auto seed = dir / "key.seed";
  auto a = SshHostKey::load_or_create(seed);
  ASSERT_TRUE(std::filesystem::exists(seed));
  EXPECT_EQ(read_file(seed).substr(0, 64).find_first_not_of("0123456789abcdef"), std::string::npos);
  auto b = SshHostKey::load_or_create(seed);
  EXPECT_EQ(a.public_key, b.public_key);
  EXPECT_NE(SshHostKey::generate().public_key, a.public_key);
  std::array<unsigned char, 32> zero{};
  EXPECT_EQ(SshHostKey::from_seed(zero).public_key, SshHostKey::from_seed(zero).public_key);
}
