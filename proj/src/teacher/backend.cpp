#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "telldrive/teacher/backend.hpp"

#include <httplib.h>

#include <sstream>

#include "telldrive/errors.hpp"
#include "telldrive/teacher/teacher.hpp"

namespace telldrive::teacher {

using nlohmann::json;

json to_json(const ChatRequest& r) {
  json messages = json::array();
  for (const auto& m : r.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
  return {{"messages", messages}, {"temperature", r.temperature}, {"max_tokens", r.max_tokens}};
}

ChatRequest chat_request_from_json(const json& j) {
  ChatRequest r;
  for (const auto& m : j.at("messages"))
    r.messages.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
  r.temperature = j.at("temperature").get<double>();
  r.max_tokens = j.at("max_tokens").get<int>();
  return r;
}

// ---------------------------------------------------------------- scripted

std::string ScriptedBackend::chat(const ChatRequest& request) {
  std::optional<json> data;
  for (auto it = request.messages.rbegin(); it != request.messages.rend() && !data; ++it)
    data = extract_data_block(it->content);
  if (!data) throw BackendError("scripted backend: prompt carries no data block");
  try {
    const auto kind = data->at("kind").get<std::string>();
    if (kind == "decision") {
      const auto action = scripted_decide_from_data(*data);
      std::ostringstream os;
      os << "Step 1: checked the time to conflict of every nearby vehicle.\n"
         << "Step 2: applied the scripted rule cascade.\n"
         << json{{"action", std::string(sim::to_token(action))}, {"reason", "scripted rule cascade"}}.dump();
      return os.str();
    }
    if (kind == "reflection") {
      const auto input = reflection_input_from_data(*data);
      const auto rule = canonical_rule(input);
      json reply = {{"policy_delta", "Avoid " + std::string(sim::to_token(rule.forbidden_action)) +
                                         " when a conflict is this close."},
                    {"prompt_delta", rule.describe()},
                    {"constraints", json::array({teacher::to_json(rule)})}};
      return "The flagged steps show the risky action.\n" + reply.dump();
    }
    throw BackendError("scripted backend: unknown data block kind '" + kind + "'");
  } catch (const BackendError&) {
    throw;
  } catch (const std::exception& e) {
    throw BackendError(std::string("scripted backend: malformed data block: ") + e.what());
  }
}

// ---------------------------------------------------------------- remote

RemoteBackend::RemoteBackend(RemoteOptions options) : options_(std::move(options)) {
  const auto& url = options_.endpoint;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) {
    throw ConfigError("teacher.endpoint", "expected scheme://host[:port]/path, got '" + url + "'");
  }
  const auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
  if (options_.model.empty()) throw ConfigError("teacher.model", "must be set for the remote backend");
}

std::string RemoteBackend::chat(const ChatRequest& request) {
  httplib::Client client(scheme_host_port_);
  const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
  const auto micros = std::chrono::duration_cast<std::chrono::microseconds>(options_.timeout - seconds);
  client.set_connection_timeout(seconds.count(), micros.count());
  client.set_read_timeout(seconds.count(), micros.count());
  client.set_write_timeout(seconds.count(), micros.count());
  httplib::Headers headers;
  if (!options_.api_key.empty()) headers.emplace("Authorization", "Bearer " + options_.api_key);

  json body = to_json(request);
  body["model"] = options_.model;
  auto res = client.Post(path_, headers, body.dump(), "application/json");
  if (!res) throw BackendError("remote backend: " + httplib::to_string(res.error()));
  if (res->status != 200) {
    throw BackendError("remote backend: HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
  }
  try {
    return json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw BackendError(std::string("remote backend: unexpected response body: ") + e.what());
  }
}

// ---------------------------------------------------------------- record / replay

RecordingBackend::RecordingBackend(std::unique_ptr<ChatBackend> inner, const std::filesystem::path& path)
    : inner_(std::move(inner)), out_(path) {
  if (!out_) throw ConfigError("record", "cannot write transcript " + path.string());
}

std::string RecordingBackend::chat(const ChatRequest& request) {
  auto response = inner_->chat(request);
  out_ << json{{"backend", inner_->name()}, {"request", to_json(request)}, {"response", response}}.dump() << '\n';
  out_.flush();
  return response;
}

ReplayBackend::ReplayBackend(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("replay", "cannot read transcript " + path.string());
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      auto j = json::parse(line);
      exchanges_.emplace_back(j.at("request"), j.at("response").get<std::string>());
      if (exchanges_.size() == 1 && j.contains("backend")) name_ = j.at("backend").get<std::string>();
    } catch (const json::exception& e) {
      throw ConfigError("replay", path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

std::string ReplayBackend::chat(const ChatRequest& request) {
  if (next_ >= exchanges_.size()) throw BackendError("replay backend: transcript exhausted");
  const auto& [recorded, response] = exchanges_[next_];
  if (recorded != to_json(request)) {
    throw BackendError("replay backend: request " + std::to_string(next_) + " differs from the transcript");
  }
  ++next_;
  return response;
}

}  // namespace telldrive::teacher
