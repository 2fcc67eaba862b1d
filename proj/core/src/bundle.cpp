// SPDX-License-Identifier: Apache-2.0
#include "fgad/bundle.hpp"

#include "fgad/feature_file.hpp"
#include "fgad/hashing.hpp"
#include "fgad/score_map_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstring>
#include <set>
#include <system_error>
#include <unistd.h>

namespace fgad::bundle {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kManifest = "manifest.json";

struct BranchFile {
  const char* name;
  qf::Branch qf::Params::*branch;
  Eigen::MatrixXd qf::Branch::*matrix;
};

const BranchFile kBranchFiles[] = {
    {"qf_normal_wq.mat", &qf::Params::normal, &qf::Branch::wq},
    {"qf_normal_wk.mat", &qf::Params::normal, &qf::Branch::wk},
    {"qf_normal_wv.mat", &qf::Params::normal, &qf::Branch::wv},
    {"qf_abnormal_wq.mat", &qf::Params::abnormal, &qf::Branch::wq},
    {"qf_abnormal_wk.mat", &qf::Params::abnormal, &qf::Branch::wk},
    {"qf_abnormal_wv.mat", &qf::Params::abnormal, &qf::Branch::wv},
};

bool is_core_file(const std::string& name) {
  static const std::set<std::string> core = {
      "config.json",      "encoder.json",     "model.json",       "mfsc.json",        "prompts.json",
      "params.json",      "qf_normal_wq.mat", "qf_normal_wk.mat", "qf_normal_wv.mat", "qf_abnormal_wq.mat",
      "qf_abnormal_wk.mat", "qf_abnormal_wv.mat", "qf_wf.mat",     "qf_bias.mat",      "qf_queries.mat",
      "intrinsics.mat",   "memory.mat",       "probe.feat",       "probe.smap",       "probe.json"};
  return core.count(name) > 0;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

FeatMat stack_rows(const std::vector<FeatVec>& rows) {
  FeatMat m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return m;
}

TokenGrid quantize_grid(const TokenGrid& g) { return decode_feature_file(encode_feature_file(g)); }

const std::string& require(const std::map<std::string, std::string>& files, const std::string& name) {
  const auto it = files.find(name);
  if (it == files.end()) throw FormatError(name, "missing from bundle");
  return it->second;
}

json parse_json(const std::string& name, const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(name, e.what());
  }
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::memcmp(&a[i], &b[i], sizeof(double)) != 0) return false;
  }
  return true;
}

std::string version_name(int v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "v%04d", v);
  return buf;
}

int parse_version(const std::string& name) {
  if (name.size() != 5 || name[0] != 'v') return -1;
  int v = 0;
  for (char c : name.substr(1)) {
    if (c < '0' || c > '9') return -1;
    v = v * 10 + (c - '0');
  }
  return v;
}

}  // namespace

Probe make_probe(const pipeline::Model& model, const TokenGrid& query) {
  Probe p;
  p.query = quantize_grid(query);
  const auto inf = model.infer(p.query);
  p.m_pix = quantize_f32(inf.m_pix);
  p.m_img = inf.m_img;
  return p;
}

std::map<std::string, std::string> bundle_files(const Bundle& b) {
  const auto& m = b.model;
  std::map<std::string, std::string> files;
  files["config.json"] = b.config_json;
  files["encoder.json"] = encoder_spec_to_json(m.encoder);
  files["model.json"] = dump(json{{"category", m.category}, {"logit_scale", m.scale.value()}});
  files["mfsc.json"] = mfsc::serialize(m.doc);
  files["prompts.json"] = prompts::prompts_to_json(m.prompts);
  files["params.json"] = prompts::parameters_to_json(m.params);
  for (const auto& f : kBranchFiles) files[f.name] = encode_matrix((m.qf.*(f.branch)).*(f.matrix));
  files["qf_wf.mat"] = encode_matrix(m.qf.wf);
  files["qf_bias.mat"] = encode_matrix(m.qf.bias.transpose());
  files["qf_queries.mat"] = encode_matrix(m.qf.queries);
  files["intrinsics.mat"] = encode_matrix(stack_rows(m.intrinsics));
  files["memory.mat"] = encode_matrix(m.memory.bank);
  files["probe.feat"] = encode_feature_file(b.probe.query);
  files["probe.smap"] = encode_score_map(b.probe.m_pix);
  files["probe.json"] = dump(json{{"m_img", b.probe.m_img}});
  for (const auto& [name, bytes] : b.extras) {
    if (name == kManifest || files.count(name) || name.find('/') != std::string::npos || name.empty() || name[0] == '.') {
      throw std::invalid_argument("bundle extra file name not allowed: " + name);
    }
    files[name] = bytes;
  }

  json hashes = json::object();
  for (const auto& [name, bytes] : files) hashes[name] = sha256_hex(bytes);
  files[kManifest] = dump(json{{"format", kFormatName},
                               {"version", kFormatVersion},
                               {"category", m.category},
                               {"files", hashes}});
  return files;
}

void save_bundle(const Bundle& b, const fs::path& dir) {
  if (fs::exists(dir)) throw std::runtime_error("bundle directory already exists: " + dir.string());
  const auto files = bundle_files(b);
  if (!dir.parent_path().empty()) fs::create_directories(dir.parent_path());
  static std::atomic<unsigned> counter{0};
  const fs::path tmp = dir.parent_path() / ("." + dir.filename().string() + ".tmp-" + std::to_string(::getpid()) +
                                            "-" + std::to_string(counter++));
  fs::create_directory(tmp);
  try {
    for (const auto& [name, bytes] : files) write_file_atomic(tmp / name, bytes);
    std::error_code ec;
    fs::rename(tmp, dir, ec);
    if (ec) throw std::runtime_error("cannot move bundle into place at " + dir.string() + ": " + ec.message());
  } catch (...) {
    std::error_code ignored;
    fs::remove_all(tmp, ignored);
    throw;
  }
}

Bundle load_bundle(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a bundle directory: " + dir.string());
  std::map<std::string, std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) files[entry.path().filename().string()] = read_file_bytes(entry.path());
  }
  const json manifest = parse_json(kManifest, require(files, kManifest));
  if (manifest.value("format", std::string{}) != kFormatName) throw FormatError("manifest", "not an fgad bundle");
  if (manifest.value("version", 0) != kFormatVersion) throw FormatError("manifest", "unsupported bundle version");
  const json& hashes = manifest.at("files");
  for (const auto& [name, bytes] : files) {
    if (name == kManifest) continue;
    if (!hashes.contains(name)) throw FormatError(name, "file not listed in manifest");
  }
  for (const auto& [name, digest] : hashes.items()) {
    if (sha256_hex(require(files, name)) != digest.get<std::string>()) throw FormatError(name, "content hash mismatch");
  }

  Bundle b;
  auto& m = b.model;
  b.config_json = files.at("config.json");
  try {
    m.encoder = encoder_spec_from_json(files.at("encoder.json"));
    const json model = parse_json("model.json", files.at("model.json"));
    m.category = model.at("category").get<std::string>();
    m.scale = LogitScale(model.at("logit_scale").get<double>());
    m.doc = mfsc::parse_document(files.at("mfsc.json"));
    m.prompts = prompts::prompts_from_json(files.at("prompts.json"));
    m.params = prompts::parameters_from_json(files.at("params.json"));
    for (const auto& f : kBranchFiles) (m.qf.*(f.branch)).*(f.matrix) = decode_matrix(files.at(f.name));
    m.qf.wf = decode_matrix(files.at("qf_wf.mat"));
    m.qf.bias = decode_matrix(files.at("qf_bias.mat")).row(0).transpose();
    m.qf.queries = decode_matrix(files.at("qf_queries.mat"));
    m.memory.bank = decode_matrix(files.at("memory.mat"));
    b.probe.query = decode_feature_file(files.at("probe.feat"));
    b.probe.m_pix = decode_score_map(files.at("probe.smap"));
    b.probe.m_img = parse_json("probe.json", files.at("probe.json")).at("m_img").get<double>();
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError("bundle", e.what());
  }
  for (const auto& [name, bytes] : files) {
    if (name != kManifest && !is_core_file(name)) b.extras[name] = bytes;
  }
  if (m.qf.dim() != m.encoder.feature_dim || m.memory.bank.cols() != m.encoder.feature_dim) {
    throw FormatError("bundle", "matrix dimensions disagree with the encoder spec");
  }
  m.refresh();

  const FeatMat stored = decode_matrix(files.at("intrinsics.mat"));
  const FeatMat recomputed = stack_rows(m.intrinsics);
  if (stored.rows() != recomputed.rows() || stored.cols() != recomputed.cols() ||
      std::memcmp(stored.data(), recomputed.data(), sizeof(double) * static_cast<std::size_t>(stored.size())) != 0) {
    throw FormatError("intrinsics.mat", "stored intrinsic queries do not match the recomputed ones");
  }
  return b;
}

bool verify_probe(const Bundle& b) {
  const auto inf = b.model.infer(b.probe.query);
  const ScoreMap q = quantize_f32(inf.m_pix);
  return q.height() == b.probe.m_pix.height() && q.width() == b.probe.m_pix.width() &&
         same_bits(q.values(), b.probe.m_pix.values()) &&
         std::memcmp(&inf.m_img, &b.probe.m_img, sizeof(double)) == 0;
}

std::string inspect(const fs::path& dir) {
  const Bundle b = load_bundle(dir);
  const auto& m = b.model;
  json comps = json::array();
  for (const auto& c : m.doc.components) comps.push_back(c.name);
  const json manifest = json::parse(read_file_bytes(dir / kManifest));
  const json out{{"path", dir.string()},
                 {"category", m.category},
                 {"components", comps},
                 {"templates", m.prompts.templates.size()},
                 {"n_ab", m.prompts.n_ab},
                 {"learnable_parameters", m.params.size()},
                 {"query_former_parameters", m.qf.size()},
                 {"families", m.qf.families()},
                 {"memory_tokens", m.memory.size()},
                 {"feature_dim", m.encoder.feature_dim},
                 {"logit_scale", m.scale.value()},
                 {"probe", {{"m_img", b.probe.m_img}, {"m_pix_max", b.probe.m_pix.max()}}},
                 {"probe_reproduces", verify_probe(b)},
                 {"manifest", manifest}};
  return dump(out);
}

fs::path next_version_dir(const fs::path& root, std::string_view category) {
  const fs::path base = root / std::string(category);
  int highest = 0;
  if (fs::is_directory(base)) {
    for (const auto& e : fs::directory_iterator(base)) highest = std::max(highest, parse_version(e.path().filename().string()));
  }
  return base / version_name(highest + 1);
}

fs::path latest_version_dir(const fs::path& root, std::string_view category) {
  const fs::path base = root / std::string(category);
  int highest = 0;
  if (fs::is_directory(base)) {
    for (const auto& e : fs::directory_iterator(base)) {
      if (e.is_directory()) highest = std::max(highest, parse_version(e.path().filename().string()));
    }
  }
  if (highest == 0) throw std::runtime_error("no bundle under " + base.string());
  return base / version_name(highest);
}

}  // namespace fgad::bundle
