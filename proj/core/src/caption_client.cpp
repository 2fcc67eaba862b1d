// SPDX-License-Identifier: Apache-2.0
#include "fgad/caption_client.hpp"

#include "fgad/feature_file.hpp"
#include "fgad/hashing.hpp"
#include "fgad/numeric.hpp"
#include "prompt_assets.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cstdlib>
#include <thread>

namespace fgad::captions {
namespace {

using nlohmann::json;

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path part, no trailing slash
};

SplitUrl split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw EndpointError("base_url must start with http:// or https://");
  const auto path_start = url.find('/', scheme_end + 3);
  SplitUrl s;
  s.origin = url.substr(0, path_start);
  s.prefix = path_start == std::string::npos ? "" : url.substr(path_start);
  while (!s.prefix.empty() && s.prefix.back() == '/') s.prefix.pop_back();
  return s;
}

std::string user_instruction(const std::string& category) {
  return "Category: " + category +
         ". Caption this normal image following the system instructions and reply with the JSON object only.";
}

}  // namespace

void EndpointConfig::validate(bool live) const {
  if (live && base_url.empty()) throw DomainError("EndpointConfig: base_url is required in live mode");
  if (max_retries < 0 || max_retries > 10) throw DomainError("EndpointConfig: max_retries must be in [0, 10]");
  if (!(temperature >= 0.0)) throw DomainError("EndpointConfig: temperature must be >= 0");
  if (!(timeout_seconds > 0.0)) throw DomainError("EndpointConfig: timeout must be > 0");
  if (!(backoff_seconds >= 0.0)) throw DomainError("EndpointConfig: backoff must be >= 0");
}

EndpointConfig EndpointConfig::with_environment_key(EndpointConfig cfg) {
  const char* key = std::getenv(kApiKeyEnv);
  cfg.api_key = key ? key : "";
  return cfg;
}

void CaptionRequest::validate() const {
  if (category.empty()) throw DomainError("CaptionRequest: empty category");
  if (image.has_value() == scene_reference.has_value()) {
    throw DomainError("CaptionRequest: exactly one of image payload and scene reference is required");
  }
}

std::string system_prompt(std::string_view template_id) {
  if (template_id == kDefaultTemplate) return assets::kMfscSystemPromptV1;
  throw DomainError("unknown system prompt template: " + std::string(template_id));
}

HttpResponse HttpTransport::post(const std::string& base_url, const std::string& path, const Headers& headers,
                                 const std::string& body, double timeout_seconds) {
  const SplitUrl url = split_url(base_url);
  httplib::Client client(url.origin);
  const auto secs = static_cast<time_t>(timeout_seconds);
  const auto usecs = static_cast<time_t>((timeout_seconds - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  client.set_write_timeout(secs, usecs);
  httplib::Headers h;
  for (const auto& [k, v] : headers) h.emplace(k, v);
  auto res = client.Post(url.prefix + path, h, body, "application/json");
  if (!res) throw TransportError("POST " + base_url + path + " failed: " + httplib::to_string(res.error()));
  return {res->status, res->body};
}

mfsc::ValidationReport check_schema(std::string_view raw_response) { return mfsc::check_text(raw_response); }

void FixtureRegistry::add(const std::string& category, std::filesystem::path path) {
  entries_[category] = std::move(path);
}

FixtureRegistry FixtureRegistry::from_directory(const std::filesystem::path& dir) {
  FixtureRegistry r;
  if (!std::filesystem::is_directory(dir)) throw DomainError("fixture directory not found: " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".json") r.add(e.path().stem().string(), e.path());
  }
  return r;
}

std::optional<std::filesystem::path> FixtureRegistry::find(const std::string& category) const {
  auto it = entries_.find(category);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::string> FixtureRegistry::categories() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : entries_) out.push_back(k);
  return out;
}

std::string build_chat_body(const EndpointConfig& cfg, const std::vector<std::pair<std::string, std::string>>& messages,
                            const std::optional<ImagePayload>& image) {
  json msgs = json::array();
  bool first_user = true;
  for (const auto& [role, text] : messages) {
    if (role == "user" && first_user && image) {
      first_user = false;
      const std::string url = "data:" + image->media_type + ";base64," + base64_encode(image->bytes);
      msgs.push_back(json{{"role", "user"},
                          {"content", json::array({json{{"type", "text"}, {"text", text}},
                                                   json{{"type", "image_url"}, {"image_url", json{{"url", url}}}}})}});
      continue;
    }
    if (role == "user") first_user = false;
    msgs.push_back(json{{"role", role}, {"content", text}});
  }
  return json{{"model", cfg.model_name}, {"temperature", cfg.temperature}, {"messages", msgs}}.dump();
}

CaptionClient::CaptionClient(EndpointConfig cfg, std::shared_ptr<Transport> transport, std::filesystem::path cache_dir,
                             FixtureRegistry fixtures)
    : cfg_(std::move(cfg)),
      transport_(std::move(transport)),
      cache_dir_(std::move(cache_dir)),
      fixtures_(std::move(fixtures)),
      network_calls_(std::make_shared<std::atomic<std::uint64_t>>(0)) {
  cfg_.validate(false);
  if (!transport_) transport_ = std::make_shared<HttpTransport>();
}

std::string CaptionClient::cache_key(const CaptionRequest& req) const {
  json j{{"category", req.category},
         {"template", req.system_prompt_template_id},
         {"template_sha256", sha256_hex(system_prompt(req.system_prompt_template_id))},
         {"model", cfg_.model_name},
         {"temperature", cfg_.temperature}};
  if (req.image) {
    j["image_sha256"] = sha256_hex(req.image->bytes);
    j["media_type"] = req.image->media_type;
  } else {
    j["scene_reference"] = *req.scene_reference;
  }
  return sha256_hex(j.dump());
}

std::filesystem::path CaptionClient::cache_path(const CaptionRequest& req) const {
  return cache_dir_ / req.category / (cache_key(req) + ".json");
}

std::optional<mfsc::MFSCDocument> CaptionClient::read_cache(const std::filesystem::path& path) const {
  if (!std::filesystem::exists(path)) return std::nullopt;
  try {
    const json j = json::parse(read_file_bytes(path));
    return mfsc::parse_document(j.at("document").get<std::string>());
  } catch (const std::exception&) {
    // A damaged entry is treated as a miss and overwritten.
    return std::nullopt;
  }
}

void CaptionClient::write_cache(const std::filesystem::path& path, const std::string& raw,
                                const mfsc::MFSCDocument& doc) const {
  std::filesystem::create_directories(path.parent_path());
  const json j{{"raw_response", raw}, {"document", mfsc::serialize(doc)}};
  write_file_atomic(path, j.dump(2) + "\n");
}

std::string CaptionClient::complete(const std::vector<std::pair<std::string, std::string>>& messages,
                                    const std::optional<ImagePayload>& image) const {
  if (!transport_) throw EndpointError("no transport configured for live captioning");
  const std::string body = build_chat_body(cfg_, messages, image);
  Headers headers = {{"Content-Type", "application/json"}};
  if (!cfg_.api_key.empty()) headers.emplace_back("Authorization", "Bearer " + cfg_.api_key);
  std::string last_error;
  double delay = cfg_.backoff_seconds;
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 0 && delay > 0.0) {
      std::this_thread::sleep_for(std::chrono::duration<double>(delay));
      delay *= 2.0;
    }
    HttpResponse res;
    try {
      network_calls_->fetch_add(1);
      res = transport_->post(cfg_.base_url, "/chat/completions", headers, body, cfg_.timeout_seconds);
    } catch (const TransportError& e) {
      last_error = e.what();
      continue;
    }
    if (res.status == 429 || res.status >= 500) {
      last_error = "HTTP " + std::to_string(res.status);
      continue;
    }
    if (res.status < 200 || res.status >= 300) {
      throw EndpointError("endpoint returned HTTP " + std::to_string(res.status) + ": " + res.body);
    }
    try {
      const json j = json::parse(res.body);
      return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const json::exception& e) {
      throw EndpointError(std::string("malformed chat-completion response: ") + e.what());
    }
  }
  throw EndpointError("endpoint unreachable after " + std::to_string(cfg_.max_retries + 1) +
                      " attempts: " + last_error);
}

mfsc::MFSCDocument CaptionClient::generate(const CaptionRequest& req) const {
  req.validate();
  const bool cache = !cache_dir_.empty();
  const auto path = cache ? cache_path(req) : std::filesystem::path{};
  if (cache) {
    if (auto hit = read_cache(path)) return *hit;
  }

  if (req.fixture_mode()) {
    const auto fixture = fixtures_.find(req.category);
    if (!fixture) throw DomainError("no caption fixture registered for category " + req.category);
    const std::string raw = read_file_bytes(*fixture);
    const auto report = check_schema(raw);
    if (!report.ok()) throw SchemaError("caption fixture for " + req.category + " is invalid", report);
    auto doc = mfsc::parse_document(raw);
    if (cache) write_cache(path, raw, doc);
    return doc;
  }

  cfg_.validate(true);
  std::vector<std::pair<std::string, std::string>> messages = {
      {"system", system_prompt(req.system_prompt_template_id)}, {"user", user_instruction(req.category)}};
  mfsc::ValidationReport report;
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    const std::string raw = complete(messages, req.image);
    report = check_schema(raw);
    if (report.ok()) {
      auto doc = mfsc::parse_document(raw);
      if (cache) write_cache(path, raw, doc);
      return doc;
    }
    messages.emplace_back("assistant", raw);
    messages.emplace_back("user", "The JSON failed validation:\n" + report.to_text() +
                                      "Return the complete corrected JSON object only.");
  }
  throw SchemaError("captions failed schema validation after " + std::to_string(cfg_.max_retries) + " re-prompts",
                    report);
}

}  // namespace fgad::captions
