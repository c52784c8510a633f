#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace neurmatch::cli {

// Merged "section.key" -> value settings. Sources, lowest precedence first:
// NEURMATCH_<SECTION>_<KEY> environment variables, the config file, flags.
class RunConfig {
 public:
  // Every accepted key with its default value.
  static const std::map<std::string, std::string>& known_keys();

  // TOML-like: "[section]" headers, "key = value" lines, '#' comments.
  // Unknown sections or keys are rejected.
  void load_file(const std::filesystem::path& path);
  void load_text(const std::string& text, const std::string& origin = "config");
  void load_env(char** envp);
  void set(const std::string& key, const std::string& value,
           const std::string& origin = "flag");

  std::string get(const std::string& key) const;
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::string origin(const std::string& key) const;

 private:
  struct Entry {
    std::string value;
    std::string origin;
  };
  std::map<std::string, Entry> values_;
};

}  // namespace neurmatch::cli
