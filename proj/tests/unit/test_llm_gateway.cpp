#include <gtest/gtest.h>

#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include <atomic>
#include <thread>

#include "decoysh/llm_gateway.hpp"
#include "support.hpp"

using namespace decoysh;
using decoysh::test::verdict_json;
using nlohmann::json;

namespace {

PromptBundle bundle_for(std::string query) {
  PromptBundle b;
  b.system_text = "sys\n";
  b.memory_text = "mem\n";
  b.task_text = "task\n";
  b.query = std::move(query);
  return b;
}

std::shared_ptr<ScriptedBackend> scripted(const char* text) {
  return std::make_shared<ScriptedBackend>(ScriptedBackend::from_json(json::parse(text)));
}

// Records the peak number of overlapping send() calls.
class CountingBackend final : public ChatBackend {
 public:
  Expected<std::string> send(const ChatRequest&, const GatewayConfig&) override {
    int now = ++in_flight;
    int prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    --in_flight;
    return verdict_json("ok", "", 0);
  }
  std::string kind() const override { return "counting"; }
  std::atomic<int> in_flight{0};
  std::atomic<int> peak{0};
};

}  // namespace

TEST(Request, RepairAttemptsCarryDirective) {
  auto b = bundle_for("ls");
  auto first = make_request(b, 0);
  auto second = make_request(b, 1);
  EXPECT_EQ(first.system, "sys\n");
  EXPECT_EQ(first.user, "mem\ntask\n");
  EXPECT_EQ(first.user.find(kRepairDirective), std::string::npos);
  EXPECT_NE(second.user.find(kRepairDirective), std::string::npos);
  EXPECT_EQ(second.attempt, 1);
}

TEST(Request, WireFormatIsChatCompletions) {
  GatewayConfig cfg;
  cfg.model_name = "m";
  auto w = to_wire(make_request(bundle_for("ls")), cfg);
  EXPECT_EQ(w["model"], "m");
  ASSERT_EQ(w["messages"].size(), 2u);
  EXPECT_EQ(w["messages"][0]["role"], "system");
  EXPECT_EQ(w["messages"][1]["role"], "user");
}

TEST(Scripted, MatchOrderAndKinds) {
  auto b = scripted(R"([
    {"match":"ls","reply":"exact"},
    {"match":"^cat ","kind":"regex","reply":"regex"},
    {"kind":"any","reply":"any"}])");
  GatewayConfig cfg;
  ChatRequest r;
  r.query = "ls";
  EXPECT_EQ(*b->send(r, cfg), "exact");
  r.query = "cat /etc/passwd";
  EXPECT_EQ(*b->send(r, cfg), "regex");
  r.query = "whatever";
  EXPECT_EQ(*b->send(r, cfg), "any");
}

TEST(Scripted, RepliesIndexedByAttempt) {
  auto b = scripted(R"([{"match":"ls","replies":["a","b"]}])");
  GatewayConfig cfg;
  ChatRequest r;
  r.query = "ls";
  r.attempt = 0;
  EXPECT_EQ(*b->send(r, cfg), "a");
  r.attempt = 1;
  EXPECT_EQ(*b->send(r, cfg), "b");
  r.attempt = 3;
  EXPECT_EQ(*b->send(r, cfg), "b");
}

TEST(Scripted, InjectedAndUnscriptedFailures) {
  auto b = scripted(R"([{"match":"t","fail":"transport"},{"match":"l","fail":"length_exceeded"}])");
  GatewayConfig cfg;
  ChatRequest r;
  r.query = "t";
  EXPECT_EQ(b->send(r, cfg).error().kind, FailureKind::TransportError);
  r.query = "l";
  EXPECT_EQ(b->send(r, cfg).error().kind, FailureKind::LengthExceeded);
  r.query = "zzz";
  EXPECT_EQ(b->send(r, cfg).error().kind, FailureKind::TransportError);
}

TEST(Scripted, RejectsBadScripts) {
  EXPECT_THROW(ScriptedBackend::from_json(json::object()), std::invalid_argument);
  EXPECT_THROW(ScriptedBackend::from_json(json::parse(R"([{"match":"x"}])")), std::invalid_argument);
  EXPECT_THROW(ScriptedBackend::from_json(json::parse(R"([{"match":"x","reply":"y","kind":"glob"}])")),
               std::invalid_argument);
}

TEST(Gateway, RepairSucceedsOnSecondAttempt) {
  std::string good = verdict_json("hi", "", 0);
  auto b = std::make_shared<ScriptedBackend>(
      std::vector<ScriptedBackend::Entry>{{ScriptedBackend::MatchKind::Exact, "echo hi", {"garbage", good}}});
  Gateway g(b, GatewayConfig{});
  auto out = g.complete_with_repair(bundle_for("echo hi"));
  ASSERT_TRUE(out.verdict.ok());
  EXPECT_EQ(out.verdict.success().answer, "hi");
  EXPECT_EQ(out.retry_count, 1);
  EXPECT_EQ(out.calls, 2);
}

TEST(Gateway, RepairGivesUpAfterLimit) {
  GatewayConfig cfg;
  cfg.max_retries_format = 2;
  Gateway g(scripted(R"([{"match":"x","reply":"nope"}])"), cfg);
  auto out = g.complete_with_repair(bundle_for("x"));
  ASSERT_FALSE(out.verdict.ok());
  EXPECT_EQ(out.verdict.failure().kind, FailureKind::WrongFormat);
  EXPECT_EQ(out.calls, 3);
  EXPECT_EQ(out.retry_count, 2);
}

TEST(Gateway, NoRepairForOtherFailures) {
  Gateway g(scripted(R"([{"match":"x","reply":"I'm sorry, I cannot help with that."}])"), GatewayConfig{});
  auto out = g.complete_with_repair(bundle_for("x"));
  EXPECT_EQ(out.verdict.failure().kind, FailureKind::SecurityPolicy);
  EXPECT_EQ(out.calls, 1);
}

TEST(Gateway, ConcurrencyCapHolds) {
  auto backend = std::make_shared<CountingBackend>();
  GatewayConfig cfg;
  cfg.max_concurrent_requests = 2;
  Gateway g(backend, cfg);
  std::vector<std::thread> threads;
  for (int i = 0; i < 8; ++i) threads.emplace_back([&] { (void)g.complete(bundle_for("ls")); });
  for (auto& t : threads) t.join();
  EXPECT_LE(backend->peak.load(), 2);
  EXPECT_GE(backend->peak.load(), 1);
}

TEST(Gateway, RejectsInvalidConfig) {
  GatewayConfig cfg;
  cfg.max_retries_format = 7;
  EXPECT_THROW(Gateway(scripted(R"([{"kind":"any","reply":"x"}])"), cfg), std::invalid_argument);
  EXPECT_FALSE(validate(cfg).empty());
}

TEST(HttpReply, Interpretation) {
  auto ok = interpret_http_reply(200, R"({"choices":[{"message":{"role":"assistant","content":"hello"}}]})");
  ASSERT_TRUE(ok);
  EXPECT_EQ(*ok, "hello");
  EXPECT_EQ(interpret_http_reply(200, "not json").error().kind, FailureKind::TransportError);
  EXPECT_EQ(interpret_http_reply(400, R"({"error":{"code":"context_length_exceeded","message":"too long"}})").error().kind,
            FailureKind::LengthExceeded);
  EXPECT_EQ(interpret_http_reply(429, R"({"error":{"message":"rate limited"}})").error().kind,
            FailureKind::TransportError);
  EXPECT_EQ(interpret_http_reply(500, "").error().kind, FailureKind::TransportError);
}

TEST(HttpBackend, TalksToLocalEndpoint) {
  httplib::Server server;
  std::string seen_auth;
  json seen_body;
  server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    seen_body = json::parse(req.body);
    json reply = {{"choices", json::array({{{"message", {{"role", "assistant"}, {"content", verdict_json("up", "", 0)}}}}})}};
    res.set_content(reply.dump(), "application/json");
  });
  int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  GatewayConfig cfg;
  cfg.endpoint_url = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  cfg.request_timeout = std::chrono::seconds(5);
  auto backend = std::make_shared<HttpChatBackend>("k-123");
  Gateway g(backend, cfg);
  auto out = g.complete_with_repair(bundle_for("uptime"));
  server.stop();
  t.join();

  ASSERT_TRUE(out.verdict.ok());
  EXPECT_EQ(out.verdict.success().answer, "up");
  EXPECT_EQ(seen_auth, "Bearer k-123");
  EXPECT_EQ(seen_body["messages"][1]["content"], "mem\ntask\n");
}

TEST(HttpBackend, UnreachableIsTransportError) {
  GatewayConfig cfg;
  cfg.endpoint_url = "http://127.0.0.1:1/v1/chat/completions";
  cfg.request_timeout = std::chrono::seconds(2);
  HttpChatBackend b("");
  auto r = b.send(make_request(bundle_for("ls")), cfg);
  ASSERT_FALSE(r);
  EXPECT_EQ(r.error().kind, FailureKind::TransportError);
}
