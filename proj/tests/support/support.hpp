#pragma once

#include <stdlib.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include <json.hpp>

namespace decoysh::test {

inline std::filesystem::path fixture(std::string_view rel) { return std::filesystem::path(DECOYSH_FIXTURES) / rel; }

inline std::filesystem::path tool_path() { return std::filesystem::path(DECOYSH_TOOL); }

class TempDir {
 public:
  TempDir() {
    std::string templ = (std::filesystem::temp_directory_path() / "decoysh-XXXXXX").string();
    if (!::mkdtemp(templ.data())) throw std::runtime_error("mkdtemp failed");
    path_ = templ;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(std::string_view rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, std::string_view text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

/// A well-formed model reply.
inline std::string verdict_json(std::string_view output, std::string_view state_change, int impact) {
  return nlohmann::json{{"output", output}, {"state_change", state_change}, {"impact", impact}}.dump();
}

}  // namespace decoysh::test
