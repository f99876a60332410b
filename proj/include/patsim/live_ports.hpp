#pragma once

// HTTP adapters for live mode. Endpoints and credentials come from the
// environment only:
//
//   PATSIM_CHAT_BASE_URL   e.g. http://localhost:8000/v1   (chat completions)
//   PATSIM_CHAT_API_KEY    bearer token, optional
//   PATSIM_CHAT_MODEL      model name sent in the request body
//   PATSIM_SUT_BASE_URL    decision aid under test
//   PATSIM_SUT_API_KEY     optional
//   PATSIM_JUDGE_BASE_URL, PATSIM_JUDGE_API_KEY, PATSIM_JUDGE_MODEL
//                          same contract as the chat port, used by the judge
//   PATSIM_CLASSIFIER_BASE_URL   depression/toxicity scoring, optional
//
// Chat contract: POST {base}/chat/completions with
//   {"model": m, "messages": [{"role": "system"|"user"|"assistant", "content": s}...]}
// and read choices[0].message.content from the reply.
//
// Decision-aid contract: POST {base}/next_question, {base}/recommend and
// {base}/intake with {"history": [{"stage", "aid", "patient"}...]} or
// {"text": s}; replies {"stage", "utterance"}, {"recommendation"} and
// {"mentions": [{"text", "candidates", "scores", "accepted"}]}.

#include <cstdlib>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "patsim/error.hpp"
#include "patsim/metrics.hpp"
#include "patsim/orchestrator.hpp"

namespace patsim {

struct Endpoint {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path prefix without trailing slash
  std::string api_key;

  static Endpoint parse(const std::string& url, std::string api_key = {}) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) throw ConfigError("base URL '" + url + "' lacks a scheme");
    const auto slash = url.find('/', scheme + 3);
    Endpoint e;
    e.origin = url.substr(0, slash);
    e.prefix = slash == std::string::npos ? "" : url.substr(slash);
    while (!e.prefix.empty() && e.prefix.back() == '/') e.prefix.pop_back();
    e.api_key = std::move(api_key);
    return e;
  }
};

inline std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

inline nlohmann::json post_json(const Endpoint& ep, const std::string& path, const nlohmann::json& body,
                                int timeout_seconds = 120) {
  httplib::Client cli(ep.origin);
  cli.set_connection_timeout(10);
  cli.set_read_timeout(timeout_seconds);
  httplib::Headers headers;
  if (!ep.api_key.empty()) headers.emplace("Authorization", "Bearer " + ep.api_key);
  auto res = cli.Post(ep.prefix + path, headers, body.dump(), "application/json");
  if (!res) throw PortError("POST " + ep.origin + ep.prefix + path + ": " + httplib::to_string(res.error()));
  if (res->status < 200 || res->status >= 300)
    throw PortError("POST " + ep.prefix + path + ": HTTP " + std::to_string(res->status));
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw PortError("POST " + ep.prefix + path + ": reply is not JSON: " + e.what());
  }
}

class HttpChatPort final : public ChatPort {
 public:
  HttpChatPort(Endpoint ep, std::string model) : ep_(std::move(ep)), model_(std::move(model)) {}

  // prefix "PATSIM_CHAT" for the simulator, "PATSIM_JUDGE" for the judge.
  static HttpChatPort from_env(const std::string& prefix = "PATSIM_CHAT") {
    auto var = [&](const char* suffix) { return prefix + suffix; };
    auto url = env(var("_BASE_URL").c_str());
    if (!url) throw ConfigError(var("_BASE_URL") + " is not set");
    return HttpChatPort(Endpoint::parse(*url, env(var("_API_KEY").c_str()).value_or("")),
                        env(var("_MODEL").c_str()).value_or("default"));
  }

  std::string request(const std::string& system, const std::vector<ChatMessage>& history) override {
    nlohmann::json msgs = nlohmann::json::array();
    msgs.push_back({{"role", "system"}, {"content", system}});
    for (const auto& m : history) msgs.push_back({{"role", m.role}, {"content", m.content}});
    const auto reply = post_json(ep_, "/chat/completions", {{"model", model_}, {"messages", msgs}, {"temperature", 0}});
    try {
      return reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw PortError(std::string("chat reply lacks choices[0].message.content: ") + e.what());
    }
  }

 private:
  Endpoint ep_;
  std::string model_;
};

class HttpSutPort final : public SutPort {
 public:
  explicit HttpSutPort(Endpoint ep) : ep_(std::move(ep)) {}

  static HttpSutPort from_env() {
    auto url = env("PATSIM_SUT_BASE_URL");
    if (!url) throw ConfigError("PATSIM_SUT_BASE_URL is not set");
    return HttpSutPort(Endpoint::parse(*url, env("PATSIM_SUT_API_KEY").value_or("")));
  }

  AidQuestion next_question(const std::vector<DialogueTurn>& history) override {
    const auto r = post_json(ep_, "/next_question", {{"history", encode(history)}});
    try {
      return {parse_intake_stage(r.at("stage").get<std::string>()), r.at("utterance").get<std::string>()};
    } catch (const nlohmann::json::exception& e) {
      throw PortError(std::string("next_question reply: ") + e.what());
    } catch (const ParseError& e) {
      throw PortError(std::string("next_question reply: ") + e.what());
    }
  }

  std::string recommend(const std::vector<DialogueTurn>& history) override {
    const auto r = post_json(ep_, "/recommend", {{"history", encode(history)}});
    try {
      return r.at("recommendation").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw PortError(std::string("recommend reply: ") + e.what());
    }
  }

  std::vector<IntakeMention> intake(std::string_view text) override {
    const auto r = post_json(ep_, "/intake", {{"text", std::string(text)}});
    std::vector<IntakeMention> out;
    try {
      for (const auto& m : r.at("mentions")) out.push_back(intake_mention_from_json(m));
    } catch (const nlohmann::json::exception& e) {
      throw PortError(std::string("intake reply: ") + e.what());
    }
    return out;
  }

 private:
  static nlohmann::json encode(const std::vector<DialogueTurn>& history) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& d : history)
      a.push_back({{"stage", to_string(d.stage)}, {"aid", d.aid_utterance}, {"patient", d.patient_text}});
    return a;
  }

  Endpoint ep_;
};

// POST {base}/score with {"label": "depression"|"toxicity", "text": s} -> {"probability": p}
class HttpClassifier final : public ProbabilityClassifier {
 public:
  HttpClassifier(Endpoint ep, std::string label) : ep_(std::move(ep)), label_(std::move(label)) {}

  double score(std::string_view text) const override {
    const auto r = post_json(ep_, "/score", {{"label", label_}, {"text", std::string(text)}});
    double p = 0.0;
    try {
      p = r.at("probability").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw PortError(std::string("classifier reply: ") + e.what());
    }
    if (!(p >= 0.0 && p <= 1.0)) throw PortError("classifier returned a value outside [0, 1]");
    return p;
  }

 private:
  Endpoint ep_;
  std::string label_;
};

}  // namespace patsim
