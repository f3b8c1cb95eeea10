#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace telldrive::teacher {

struct ChatMessage {
  std::string role;  // "system" | "user" | "assistant"
  std::string content;
  bool operator==(const ChatMessage&) const = default;
};

struct ChatRequest {
  std::vector<ChatMessage> messages;
  double temperature = 0.0;
  int max_tokens = 512;
};

nlohmann::json to_json(const ChatRequest& r);
ChatRequest chat_request_from_json(const nlohmann::json& j);

/// Transport or protocol failure of a chat backend, including timeouts.
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  /// Returns the assistant text. Throws BackendError on failure.
  virtual std::string chat(const ChatRequest& request) = 0;
  virtual std::string name() const = 0;
};

/// Deterministic offline teacher: answers decision and reflection prompts by
/// reading the JSON data block they embed and applying the scripted rules.
class ScriptedBackend : public ChatBackend {
 public:
  std::string chat(const ChatRequest& request) override;
  std::string name() const override { return "scripted"; }
};

struct RemoteOptions {
  std::string endpoint;  // e.g. https://api.example.com/v1/chat/completions
  std::string model;
  std::string api_key;   // sent as a bearer token when nonempty
  std::chrono::milliseconds timeout{30000};
};

/// Chat-completions client: POST {model, messages, temperature, max_tokens},
/// reply text read from choices[0].message.content.
class RemoteBackend : public ChatBackend {
 public:
  explicit RemoteBackend(RemoteOptions options);
  std::string chat(const ChatRequest& request) override;
  std::string name() const override { return "remote"; }

 private:
  RemoteOptions options_;
  std::string scheme_host_port_;
  std::string path_;
};

/// Wraps another backend and appends each {request, response} exchange to a
/// JSONL transcript.
class RecordingBackend : public ChatBackend {
 public:
  RecordingBackend(std::unique_ptr<ChatBackend> inner, const std::filesystem::path& path);
  std::string chat(const ChatRequest& request) override;
  std::string name() const override { return inner_->name(); }

 private:
  std::unique_ptr<ChatBackend> inner_;
  std::ofstream out_;
};

/// Serves responses from a JSONL transcript in order. A request that differs
/// from the recorded one, or running past the end, is a BackendError. Reports
/// the recorded backend's name so decisions keep their original source.
class ReplayBackend : public ChatBackend {
 public:
  explicit ReplayBackend(const std::filesystem::path& path);
  std::string chat(const ChatRequest& request) override;
  std::string name() const override { return name_; }
  std::size_t remaining() const { return exchanges_.size() - next_; }

 private:
  std::string name_ = "replay";
  std::vector<std::pair<nlohmann::json, std::string>> exchanges_;
  std::size_t next_ = 0;
};

}  // namespace telldrive::teacher
