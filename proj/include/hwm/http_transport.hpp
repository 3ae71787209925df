#pragma once

#include <cctype>
#include <chrono>
#include <cstdlib>
#include <string>

// Eigen (through oracle.hpp) must come before httplib, whose resolver
// headers define a `_res` macro that collides with Eigen parameter names.
#include "hwm/oracle.hpp"

#include <httplib.h>

// Chat-completions client for a live knowledge oracle. Speaks the common
// OpenAI-style JSON protocol; plausibility questions also request token log
// probabilities so the prior can use log P("yes").
namespace hwm::oracle {

struct HttpConfig {
  std::string base_url;  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  std::string model;
  std::string api_key;
  double temperature = 0.0;
  int top_logprobs = 5;
  int timeout_seconds = 120;

  // HWM_ORACLE_URL, HWM_ORACLE_MODEL, HWM_ORACLE_API_KEY; an optional
  // HWM_ORACLE_PATH overrides the endpoint path.
  static HttpConfig from_env() {
    auto env = [](const char* k) {
      const char* v = std::getenv(k);
      return v ? std::string(v) : std::string();
    };
    HttpConfig c;
    c.base_url = env("HWM_ORACLE_URL");
    c.model = env("HWM_ORACLE_MODEL");
    c.api_key = env("HWM_ORACLE_API_KEY");
    if (auto p = env("HWM_ORACLE_PATH"); !p.empty()) c.path = p;
    if (c.base_url.empty()) throw OracleError("HWM_ORACLE_URL is not set");
    if (c.model.empty()) throw OracleError("HWM_ORACLE_MODEL is not set");
    return c;
  }
};

namespace detail {

inline std::string lower_trim(std::string s) {
  std::string out;
  for (char c : s)
    if (!std::isspace(static_cast<unsigned char>(c))) out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// log P("yes") from the first generated token's alternatives, if present.
inline std::optional<double> yes_log_prob(const Value& choice) {
  const Value* lp = choice.find("logprobs");
  if (!lp || !lp->is_object()) return std::nullopt;
  const Value* content = lp->find("content");
  if (!content || !content->is_array() || content->as_array().empty()) return std::nullopt;
  const Value& first = content->as_array().front();
  auto is_yes = [](const Value& t) {
    const Value* tok = t.find("token");
    return tok && tok->is_text() && lower_trim(tok->as_text()) == "yes";
  };
  if (is_yes(first) && first.find("logprob")) return first.at("logprob").as_number();
  if (const Value* top = first.find("top_logprobs"); top && top->is_array()) {
    std::optional<double> best;
    for (const auto& t : top->as_array())
      if (is_yes(t) && t.find("logprob")) best = std::max(best.value_or(-1e300), t.at("logprob").as_number());
    return best;
  }
  return std::nullopt;
}

}  // namespace detail

class HttpTransport final : public Transport {
 public:
  explicit HttpTransport(HttpConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.base_url.empty()) throw OracleError("oracle URL is empty");
  }

  OracleResponse send(const OracleRequest& request, const Prompt* prompt) override {
    if (!prompt) throw OracleError("the HTTP oracle needs prompt templates");
    Value body = Value::object(
        {{"model", cfg_.model},
         {"temperature", cfg_.temperature},
         {"messages", Value::array({Value::object({{"role", "system"}, {"content", prompt->system}}),
                                    Value::object({{"role", "user"}, {"content", prompt->user}})})}});
    if (request.kind == RequestKind::plausibility) {
      body["logprobs"] = true;
      body["top_logprobs"] = cfg_.top_logprobs;
      body["max_tokens"] = 1;
    }

    httplib::Client client(cfg_.base_url);
    client.set_connection_timeout(std::chrono::seconds(cfg_.timeout_seconds));
    client.set_read_timeout(std::chrono::seconds(cfg_.timeout_seconds));
    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
    auto res = client.Post(cfg_.path, headers, doc::dump(body), "application/json");
    if (!res) throw TransportError("oracle request failed: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500)
      throw TransportError("oracle answered HTTP " + std::to_string(res->status));
    if (res->status != 200) throw OracleError("oracle answered HTTP " + std::to_string(res->status) + ": " + res->body);

    Value reply;
    try {
      reply = doc::parse(res->body);
    } catch (const std::exception& e) {
      throw TransportError(std::string("oracle reply is not JSON: ") + e.what());
    }
    const Value* choices = reply.find("choices");
    if (!choices || !choices->is_array() || choices->as_array().empty())
      throw TransportError("oracle reply has no choices");
    const Value& choice = choices->as_array().front();
    const Value* msg = choice.find("message");
    const Value* content = msg ? msg->find("content") : nullptr;
    if (!content || !content->is_text()) throw TransportError("oracle reply has no message content");
    return {content->as_text(), detail::yes_log_prob(choice)};
  }

 private:
  HttpConfig cfg_;
};

}  // namespace hwm::oracle
