// SPDX-License-Identifier: Apache-2.0
#include "fgad/mfsc.hpp"

#include <json.hpp>

#include <algorithm>
#include <limits>
#include <optional>
#include <set>
#include <sstream>

namespace fgad::mfsc {
namespace {

using nlohmann::json;

std::optional<Connector> connector_from_string(std::string_view s) {
  if (s == "single") return Connector::Single;
  if (s == "and") return Connector::And;
  if (s == "or") return Connector::Or;
  if (s == "with") return Connector::With;
  return std::nullopt;
}

// Structural decoder: walks the JSON tree, records every violation with its
// field path, and fills whatever parts of the document are well-formed.
class Decoder {
 public:
  explicit Decoder(ValidationReport& report) : report_(report) {}

  void decode(const json& root, MFSCDocument& doc) {
    if (!root.is_object()) {
      add("", "type", "document must be a JSON object");
      return;
    }
    check_keys(root, "", {"mfsc_version", "category", "summary", "background", "foreground",
                          "components", "vocabulary"});
    if (const json* v = field(root, "", "mfsc_version")) {
      if (!v->is_number_integer()) {
        add("mfsc_version", "type", "mfsc_version must be an integer");
      } else if (v->get<long long>() != kWireVersion) {
        add("mfsc_version", "version/unsupported",
            "unsupported mfsc_version " + v->dump() + " (expected 1)");
      }
    }
    string_field(root, "", "category", doc.category);
    string_field(root, "", "summary", doc.summary);
    string_field(root, "", "background", doc.background);

    if (const json* fg = field(root, "", "foreground")) {
      if (!fg->is_object()) {
        add("foreground", "type", "foreground must be an object");
      } else {
        check_keys(*fg, "foreground", {"counts", "relation_text"});
        string_field(*fg, "foreground", "relation_text", doc.foreground.relation_text);
        if (const json* counts = field(*fg, "foreground", "counts")) {
          if (!counts->is_object()) {
            add("foreground.counts", "type", "counts must be an object");
          } else {
            for (const auto& [name, n] : counts->items()) {
              const std::string path = "foreground.counts." + name;
              if (!n.is_number_integer()) {
                add(path, "type", "count must be an integer");
                continue;
              }
              const long long value = n.get<long long>();
              if (value > std::numeric_limits<int>::max() || value < std::numeric_limits<int>::min()) {
                add(path, "foreground/count", "count out of range");
                continue;
              }
              doc.foreground.component_counts[name] = static_cast<int>(value);
            }
          }
        }
      }
    }

    if (const json* comps = field(root, "", "components")) {
      if (!comps->is_array()) {
        add("components", "type", "components must be an array");
      } else {
        for (std::size_t i = 0; i < comps->size(); ++i) {
          ComponentCaption cc;
          if (decode_component((*comps)[i], "components[" + std::to_string(i) + "]", cc)) {
            doc.components.push_back(std::move(cc));
          }
        }
      }
    }

    if (const json* vocab = field(root, "", "vocabulary")) {
      if (!vocab->is_object()) {
        add("vocabulary", "type", "vocabulary must be an object");
      } else {
        for (const auto& [attr, values] : vocab->items()) {
          const std::string path = "vocabulary." + attr;
          std::vector<std::string> list;
          if (string_list(values, path, list)) {
            doc.attribute_vocabulary[attr] = std::move(list);
          }
        }
      }
    }
  }

 private:
  void add(std::string path, std::string rule, std::string message) {
    report_.violations.push_back({std::move(path), std::move(rule), std::move(message)});
  }

  static std::string join(const std::string& base, const std::string& key) {
    return base.empty() ? key : base + "." + key;
  }

  const json* field(const json& obj, const std::string& base, const std::string& key) {
    auto it = obj.find(key);
    if (it == obj.end()) {
      add(join(base, key), "missing-field", "missing field: " + key);
      return nullptr;
    }
    return &*it;
  }

  void check_keys(const json& obj, const std::string& base, std::initializer_list<const char*> allowed) {
    for (const auto& [key, _] : obj.items()) {
      const bool known = std::any_of(allowed.begin(), allowed.end(),
                                     [&](const char* a) { return key == a; });
      if (!known) add(join(base, key), "unknown-field", "unknown field: " + key);
    }
  }

  void string_field(const json& obj, const std::string& base, const std::string& key, std::string& out) {
    if (const json* v = field(obj, base, key)) {
      if (!v->is_string()) {
        add(join(base, key), "type", key + " must be a string");
      } else {
        out = v->get<std::string>();
      }
    }
  }

  bool string_list(const json& values, const std::string& path, std::vector<std::string>& out) {
    if (!values.is_array()) {
      add(path, "type", "expected an array of strings");
      return false;
    }
    bool ok = true;
    for (std::size_t j = 0; j < values.size(); ++j) {
      if (!values[j].is_string()) {
        add(path + "[" + std::to_string(j) + "]", "type", "expected a string");
        ok = false;
      } else {
        out.push_back(values[j].get<std::string>());
      }
    }
    return ok;
  }

  bool decode_component(const json& c, const std::string& path, ComponentCaption& out) {
    if (!c.is_object()) {
      add(path, "type", "component must be an object");
      return false;
    }
    const std::size_t before = report_.violations.size();
    check_keys(c, path, {"name", "attributes", "caption_text"});
    string_field(c, path, "name", out.name);
    string_field(c, path, "caption_text", out.caption_text);
    if (const json* attrs = field(c, path, "attributes")) {
      if (!attrs->is_object()) {
        add(path + ".attributes", "type", "attributes must be an object");
      } else {
        for (const auto& [name, av] : attrs->items()) {
          const std::string apath = path + ".attributes." + name;
          if (!av.is_object()) {
            add(apath, "type", "attribute value must be an object");
            continue;
          }
          check_keys(av, apath, {"values", "connector"});
          AttributeValue value;
          bool ok = true;
          if (const json* vals = field(av, apath, "values")) {
            ok = string_list(*vals, apath + ".values", value.base_values) && ok;
          } else {
            ok = false;
          }
          if (const json* conn = field(av, apath, "connector")) {
            if (!conn->is_string()) {
              add(apath + ".connector", "type", "connector must be a string");
              ok = false;
            } else if (auto parsed = connector_from_string(conn->get<std::string>())) {
              value.connector = *parsed;
            } else {
              add(apath + ".connector", "connector/enum",
                  "connector must be one of single, and, or, with (got \"" + conn->get<std::string>() +
                      "\")");
              ok = false;
            }
          } else {
            ok = false;
          }
          if (ok) out.attributes[name] = std::move(value);
        }
      }
    }
    return report_.violations.size() == before;
  }

  ValidationReport& report_;
};

json attribute_to_json(const AttributeValue& v) {
  return json{{"values", v.base_values}, {"connector", std::string(to_string(v.connector))}};
}

json document_to_json(const MFSCDocument& doc) {
  json comps = json::array();
  for (const auto& c : doc.components) {
    json attrs = json::object();
    for (const auto& [name, value] : c.attributes) attrs[name] = attribute_to_json(value);
    comps.push_back(json{{"name", c.name}, {"attributes", attrs}, {"caption_text", c.caption_text}});
  }
  json counts = json::object();
  for (const auto& [name, n] : doc.foreground.component_counts) counts[name] = n;
  json vocab = json::object();
  for (const auto& [attr, values] : doc.attribute_vocabulary) vocab[attr] = values;
  return json{{"mfsc_version", kWireVersion},
              {"category", doc.category},
              {"summary", doc.summary},
              {"background", doc.background},
              {"foreground", json{{"counts", counts}, {"relation_text", doc.foreground.relation_text}}},
              {"components", comps},
              {"vocabulary", vocab}};
}

bool is_vocabulary_rule(const std::string& rule) { return rule.rfind("vocabulary/", 0) == 0; }

}  // namespace

std::string_view to_string(Connector c) {
  switch (c) {
    case Connector::Single: return "single";
    case Connector::And: return "and";
    case Connector::Or: return "or";
    case Connector::With: return "with";
  }
  return "single";
}

const ComponentCaption* MFSCDocument::find_component(std::string_view name) const {
  for (const auto& c : components) {
    if (c.name == name) return &c;
  }
  return nullptr;
}

bool ValidationReport::has_rule(std::string_view rule) const {
  return std::any_of(violations.begin(), violations.end(),
                     [&](const Violation& v) { return v.rule == rule; });
}

std::string ValidationReport::to_text() const {
  std::ostringstream os;
  for (const auto& v : violations) {
    os << (v.path.empty() ? "<document>" : v.path) << ": " << v.rule << ": " << v.message << '\n';
  }
  return os.str();
}

DocumentError::DocumentError(ErrorKind kind, std::string message, ValidationReport report)
    : std::runtime_error(std::move(message)), kind_(kind), report_(std::move(report)) {}

ValidationReport validate(const MFSCDocument& doc) {
  ValidationReport r;
  auto add = [&](std::string path, std::string rule, std::string msg) {
    r.violations.push_back({std::move(path), std::move(rule), std::move(msg)});
  };
  if (doc.summary.empty()) add("summary", "summary/empty", "summary must be nonempty");
  if (doc.components.empty()) add("components", "components/empty", "at least one component is required");

  std::set<std::string> names;
  for (std::size_t i = 0; i < doc.components.size(); ++i) {
    const auto& c = doc.components[i];
    const std::string path = "components[" + std::to_string(i) + "]";
    if (c.name.empty()) add(path + ".name", "component/name-empty", "component name must be nonempty");
    if (!c.name.empty() && !names.insert(c.name).second) {
      add(path + ".name", "component/duplicate-name", "duplicate component name: " + c.name);
    }
    if (c.caption_text.empty()) {
      add(path + ".caption_text", "component/caption-empty", "caption_text must be nonempty");
    }
    for (const auto& [attr, value] : c.attributes) {
      const std::string apath = path + ".attributes." + attr;
      if (value.base_values.empty()) {
        add(apath + ".values", "attribute/empty-values", "attribute needs at least one base value");
      }
      const bool single = value.connector == Connector::Single;
      if (!value.base_values.empty() && single != (value.base_values.size() == 1)) {
        add(apath + ".connector", "connector/arity",
            single ? "connector single requires exactly one base value"
                   : "connector " + std::string(to_string(value.connector)) +
                         " requires at least two base values");
      }
      auto vocab = doc.attribute_vocabulary.find(attr);
      if (vocab == doc.attribute_vocabulary.end()) {
        add(apath, "vocabulary/unknown-attribute", "attribute " + attr + " has no vocabulary");
        continue;
      }
      for (std::size_t j = 0; j < value.base_values.size(); ++j) {
        const auto& bv = value.base_values[j];
        if (std::find(vocab->second.begin(), vocab->second.end(), bv) == vocab->second.end()) {
          add(apath + ".values[" + std::to_string(j) + "]", "vocabulary/unknown-value",
              "value \"" + bv + "\" is not in the vocabulary for " + attr);
        }
      }
    }
  }
  for (const auto& [name, n] : doc.foreground.component_counts) {
    const std::string path = "foreground.counts." + name;
    if (n < 1) add(path, "foreground/count", "count must be at least 1");
    if (!doc.find_component(name)) {
      add(path, "foreground/unknown-component", "count references unknown component " + name);
    }
  }
  for (const auto& [attr, values] : doc.attribute_vocabulary) {
    if (values.empty()) add("vocabulary." + attr, "vocabulary/empty", "vocabulary list must be nonempty");
  }
  return r;
}

MFSCDocument parse_document(std::string_view text) {
  json root;
  try {
    root = json::parse(text.begin(), text.end());
  } catch (const json::parse_error& e) {
    ValidationReport r;
    r.violations.push_back({"", "syntax", e.what()});
    throw DocumentError(ErrorKind::Syntax,
                        "syntax error at byte " + std::to_string(e.byte) + ": " + e.what(), r);
  }
  MFSCDocument doc;
  ValidationReport structural;
  Decoder(structural).decode(root, doc);
  if (!structural.ok()) {
    const auto& first = structural.violations.front();
    throw DocumentError(ErrorKind::Schema, "schema violation at " + first.path + ": " + first.message,
                        structural);
  }
  ValidationReport report = validate(doc);
  if (!report.ok()) {
    const bool vocab_only = std::all_of(report.violations.begin(), report.violations.end(),
                                        [](const Violation& v) { return is_vocabulary_rule(v.rule); });
    const auto& first = report.violations.front();
    throw DocumentError(vocab_only ? ErrorKind::Vocabulary : ErrorKind::Schema,
                        (vocab_only ? "vocabulary violation at " : "schema violation at ") + first.path +
                            ": " + first.message,
                        report);
  }
  return doc;
}

std::string serialize(const MFSCDocument& doc) {
  ValidationReport report = validate(doc);
  if (!report.ok()) {
    throw DocumentError(ErrorKind::Schema, "refusing to serialize invalid document", report);
  }
  return document_to_json(doc).dump(2) + "\n";
}

ValidationReport check_text(std::string_view text) {
  try {
    parse_document(text);
    return {};
  } catch (const DocumentError& e) {
    return e.report();
  }
}

}  // namespace fgad::mfsc
