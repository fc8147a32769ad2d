#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace moescope {

// FNV-1a 64 over the file bytes, as 16 hex digits.
std::string file_hash_hex(const std::filesystem::path& p);
std::string string_hash_hex(const std::string& s);

// Every subcommand writes a manifest recording the resolved configuration
// and the hashes of everything it read and wrote, so a run can be audited
// byte-for-byte.
class ManifestBuilder {
 public:
  ManifestBuilder(std::string command, std::string resolved_config_json);
  void add_input(const std::filesystem::path& p);
  void add_artifact(const std::filesystem::path& p);
  void write(const std::filesystem::path& file) const;

 private:
  std::string command_;
  std::string config_json_;
  std::vector<std::pair<std::string, std::string>> inputs_;
  std::vector<std::pair<std::string, std::string>> artifacts_;
};

}  // namespace moescope
