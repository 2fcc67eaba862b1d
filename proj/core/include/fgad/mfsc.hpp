// SPDX-License-Identifier: Apache-2.0
#pragma once

// Multi-level fine-grained semantic caption documents: an image summary, a
// foreground view (component counts and their logical relation), a
// background description, and per-component captions with attributes.

#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fgad::mfsc {

inline constexpr int kWireVersion = 1;

enum class Connector { Single, And, Or, With };

std::string_view to_string(Connector c);

struct AttributeValue {
  std::vector<std::string> base_values;
  Connector connector = Connector::Single;

  bool operator==(const AttributeValue&) const = default;
};

struct ComponentCaption {
  std::string name;
  std::map<std::string, AttributeValue> attributes;
  std::string caption_text;

  bool operator==(const ComponentCaption&) const = default;
};

struct ForegroundRelation {
  std::map<std::string, int> component_counts;
  std::string relation_text;

  bool operator==(const ForegroundRelation&) const = default;
};

struct MFSCDocument {
  std::string category;
  std::string summary;
  std::string background;
  ForegroundRelation foreground;
  std::vector<ComponentCaption> components;
  std::map<std::string, std::vector<std::string>> attribute_vocabulary;

  std::size_t component_count() const noexcept { return components.size(); }
  const ComponentCaption* find_component(std::string_view name) const;

  bool operator==(const MFSCDocument&) const = default;
};

struct Violation {
  std::string path;  ///< e.g. "components[1].attributes.color.connector"
  std::string rule;  ///< e.g. "connector/arity"
  std::string message;

  bool operator==(const Violation&) const = default;
};

struct ValidationReport {
  std::vector<Violation> violations;

  bool ok() const noexcept { return violations.empty(); }
  bool has_rule(std::string_view rule) const;
  /// One "path: rule: message" line per violation.
  std::string to_text() const;
};

enum class ErrorKind { Syntax, Schema, Vocabulary };

class DocumentError : public std::runtime_error {
 public:
  DocumentError(ErrorKind kind, std::string message, ValidationReport report);

  ErrorKind kind() const noexcept { return kind_; }
  const ValidationReport& report() const noexcept { return report_; }

 private:
  ErrorKind kind_;
  ValidationReport report_;
};

/// Parses and fully validates the JSON wire format. Throws DocumentError.
MFSCDocument parse_document(std::string_view text);

/// Checks every document invariant. Never throws.
ValidationReport validate(const MFSCDocument& doc);

/// Canonical serialization: sorted keys, fixed indentation, trailing newline.
/// Throws DocumentError(Schema) if the document is invalid.
std::string serialize(const MFSCDocument& doc);

/// Parse + validate into a report; any failure becomes a violation.
ValidationReport check_text(std::string_view text);

}  // namespace fgad::mfsc
