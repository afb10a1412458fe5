// httplib is heavy; keep it in this translation unit only.
#define CPPHTTPLIB_OPENSSL_SUPPORT
#include <httplib.h>

#include "decoysh/llm_gateway.hpp"

namespace decoysh {

namespace {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

std::optional<SplitUrl> split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) return std::nullopt;
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return SplitUrl{url, "/"};
  return SplitUrl{url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

HttpChatBackend::HttpChatBackend(std::string api_key) : api_key_(std::move(api_key)) {}

Expected<std::string> HttpChatBackend::send(const ChatRequest& request, const GatewayConfig& config) {
  auto url = split_url(config.endpoint_url);
  if (!url) return FailureCause{FailureKind::TransportError, "bad endpoint_url " + config.endpoint_url};

  httplib::Client client(url->origin);
  if (!client.is_valid()) return FailureCause{FailureKind::TransportError, "unsupported endpoint " + url->origin};
  auto timeout = std::chrono::duration_cast<std::chrono::seconds>(config.request_timeout).count();
  client.set_connection_timeout(static_cast<time_t>(timeout), 0);
  client.set_read_timeout(static_cast<time_t>(timeout), 0);
  client.set_write_timeout(static_cast<time_t>(timeout), 0);

  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);

  auto res = client.Post(url->path, headers, to_wire(request, config).dump(-1, ' ', false, nlohmann::json::error_handler_t::replace), "application/json");
  if (!res) {
    return FailureCause{FailureKind::TransportError, "request failed: " + httplib::to_string(res.error())};
  }
  return interpret_http_reply(res->status, res->body);
}

}  // namespace decoysh
