// SPDX-License-Identifier: Apache-2.0
#pragma once
// MFSC caption generation through an OpenAI-compatible chat-completion
// endpoint, with a fixture mode that never touches the network.

#include "fgad/mfsc.hpp"

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace fgad::captions {

inline constexpr const char* kApiKeyEnv = "FGAD_API_KEY";
inline constexpr const char* kDefaultTemplate = "mfsc_system_prompt_v1";

struct EndpointConfig {
  std::string base_url;
  std::string model_name = "gpt-4o";
  std::string api_key;  ///< never serialized; see from_environment
  double timeout_seconds = 60.0;
  int max_retries = 3;
  double temperature = 0.0;
  double backoff_seconds = 0.5;  ///< first transport-retry delay, doubled each time

  /// Throws DomainError. Live mode additionally needs base_url.
  void validate(bool live) const;
  /// Copies cfg and fills api_key from FGAD_API_KEY (empty if unset).
  static EndpointConfig with_environment_key(EndpointConfig cfg);
};

struct ImagePayload {
  std::string bytes;
  std::string media_type = "image/png";
};

struct CaptionRequest {
  std::string category;
  std::optional<ImagePayload> image;           ///< live mode
  std::optional<std::string> scene_reference;  ///< fixture mode
  std::string system_prompt_template_id = kDefaultTemplate;
  void validate() const;
  bool fixture_mode() const noexcept { return scene_reference.has_value(); }
};

/// Text of a versioned system-prompt template. Throws DomainError for unknown ids.
std::string system_prompt(std::string_view template_id);

using Headers = std::vector<std::pair<std::string, std::string>>;

struct HttpResponse {
  int status = 0;
  std::string body;
};

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Transport {
 public:
  virtual ~Transport() = default;
  /// POST base_url + path. Throws TransportError when no response arrives.
  virtual HttpResponse post(const std::string& base_url, const std::string& path, const Headers& headers,
                            const std::string& body, double timeout_seconds) = 0;
};

/// cpp-httplib backed transport (http and https).
class HttpTransport final : public Transport {
 public:
  HttpResponse post(const std::string& base_url, const std::string& path, const Headers& headers,
                    const std::string& body, double timeout_seconds) override;
};

class EndpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SchemaError : public std::runtime_error {
 public:
  SchemaError(const std::string& message, mfsc::ValidationReport report)
      : std::runtime_error(message), report_(std::move(report)) {}
  const mfsc::ValidationReport& report() const noexcept { return report_; }

 private:
  mfsc::ValidationReport report_;
};

/// Parse + validate; never throws.
mfsc::ValidationReport check_schema(std::string_view raw_response);

/// Category -> in-tree MFSC document path.
class FixtureRegistry {
 public:
  void add(const std::string& category, std::filesystem::path path);
  /// Registers every <category>.json in dir.
  static FixtureRegistry from_directory(const std::filesystem::path& dir);
  std::optional<std::filesystem::path> find(const std::string& category) const;
  std::vector<std::string> categories() const;

 private:
  std::map<std::string, std::filesystem::path> entries_;
};

/// Chat-completion request body for one conversation.
std::string build_chat_body(const EndpointConfig& cfg, const std::vector<std::pair<std::string, std::string>>& messages,
                            const std::optional<ImagePayload>& image);

class CaptionClient {
 public:
  /// A null transport selects HttpTransport.
  CaptionClient(EndpointConfig cfg, std::shared_ptr<Transport> transport, std::filesystem::path cache_dir,
                FixtureRegistry fixtures);

  /// Returns a document that validates cleanly. Throws EndpointError,
  /// SchemaError, or DomainError (no fixture / bad request).
  mfsc::MFSCDocument generate(const CaptionRequest& req) const;

  /// Content hash under which a request is cached.
  std::string cache_key(const CaptionRequest& req) const;
  std::filesystem::path cache_path(const CaptionRequest& req) const;

  std::uint64_t network_calls() const noexcept { return network_calls_->load(); }

 private:
  std::optional<mfsc::MFSCDocument> read_cache(const std::filesystem::path& path) const;
  void write_cache(const std::filesystem::path& path, const std::string& raw, const mfsc::MFSCDocument& doc) const;
  std::string complete(const std::vector<std::pair<std::string, std::string>>& messages,
                       const std::optional<ImagePayload>& image) const;

  EndpointConfig cfg_;
  std::shared_ptr<Transport> transport_;
  std::filesystem::path cache_dir_;
  FixtureRegistry fixtures_;
  std::shared_ptr<std::atomic<std::uint64_t>> network_calls_;
};

}  // namespace fgad::captions
