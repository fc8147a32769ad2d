#include "moescope/manifest.hpp"

#include <json.hpp>

#include <fstream>

#include "moescope/common.hpp"

namespace moescope {

std::string file_hash_hex(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ValidationError("manifest: cannot read " + p.string());
  std::uint64_t h = 0xcbf29ce484222325ull;
  char buf[65536];
  while (is) {
    is.read(buf, sizeof(buf));
    h = fnv1a64(buf, static_cast<std::size_t>(is.gcount()), h);
  }
  return hex64(h);
}

std::string string_hash_hex(const std::string& s) { return hex64(fnv1a64(s)); }

ManifestBuilder::ManifestBuilder(std::string command, std::string resolved_config_json)
    : command_(std::move(command)), config_json_(std::move(resolved_config_json)) {}

void ManifestBuilder::add_input(const std::filesystem::path& p) {
  inputs_.emplace_back(p.string(), file_hash_hex(p));
}

void ManifestBuilder::add_artifact(const std::filesystem::path& p) {
  artifacts_.emplace_back(p.string(), file_hash_hex(p));
}

void ManifestBuilder::write(const std::filesystem::path& file) const {
  nlohmann::json j;
  j["command"] = command_;
  j["config"] = nlohmann::json::parse(config_json_);
  j["config_hash"] = string_hash_hex(config_json_);
  for (const auto& [path, hash] : inputs_) j["inputs"][path] = hash;
  for (const auto& [path, hash] : artifacts_) j["artifacts"][path] = hash;
  if (inputs_.empty()) j["inputs"] = nlohmann::json::object();
  if (artifacts_.empty()) j["artifacts"] = nlohmann::json::object();
  std::ofstream os(file);
  if (!os) throw ValidationError("manifest: cannot write " + file.string());
  os << j.dump(2) << "\n";
}

}  // namespace moescope
