#include "neurmatch/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "neurmatch/error.hpp"

namespace neurmatch::cli {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void require_known(const std::string& key, const std::string& origin) {
  if (!RunConfig::known_keys().contains(key)) {
    throw ArgumentError(origin + ": unknown setting '" + key + "'");
  }
}

}  // namespace

const std::map<std::string, std::string>& RunConfig::known_keys() {
  static const std::map<std::string, std::string> keys = {
      {"global.seed", "7"},
      {"global.workers", "1"},
      {"matcher.temperature", "0.1"},
      {"matcher.min_score", "0.2"},
      {"verify.tau", "0.05"},
      {"verify.subsets_per_match", "64"},
      {"verify.n_subsets", "0"},
      {"verify.min_coverage", "8"},
      {"ransac.iterations", "1000"},
      {"ransac.inlier_threshold", "3"},
      {"ransac.min_inliers", "3"},
      {"ransac.model", "similarity"},
      {"tre.estimator", "tps"},
      {"tre.lambda", "1"},
      {"train.epochs", "0"},
      {"train.learning_rate", "0"},
      {"train.batch_size", "0"},
  };
  return keys;
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ArgumentError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  load_text(ss.str(), path.string());
}

void RunConfig::load_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line, section;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(number);
    if (line.front() == '[') {
      if (line.back() != ']') throw ArgumentError(where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ArgumentError(where + ": expected key = value");
    if (section.empty()) throw ArgumentError(where + ": setting outside a section");
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') {
      value = value.substr(1, value.size() - 2);
    }
    const std::string key = section + "." + trim(line.substr(0, eq));
    require_known(key, where);
    values_[key] = {value, where};
  }
}

void RunConfig::load_env(char** envp) {
  if (envp == nullptr) return;
  const std::string prefix = "NEURMATCH_";
  for (char** e = envp; *e != nullptr; ++e) {
    const std::string entry(*e);
    if (!entry.starts_with(prefix)) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string name = entry.substr(prefix.size(), eq - prefix.size());
    std::transform(name.begin(), name.end(), name.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    const auto us = name.find('_');
    if (us == std::string::npos) {
      throw ArgumentError("environment: cannot map NEURMATCH_" + name);
    }
    const std::string key = name.substr(0, us) + "." + name.substr(us + 1);
    require_known(key, "environment");
    // Lowest precedence: never override a file value.
    if (!values_.contains(key)) values_[key] = {entry.substr(eq + 1), "environment"};
  }
}

void RunConfig::set(const std::string& key, const std::string& value,
                    const std::string& origin) {
  require_known(key, origin);
  values_[key] = {value, origin};
}

std::string RunConfig::get(const std::string& key) const {
  require_known(key, "lookup");
  const auto it = values_.find(key);
  return it == values_.end() ? known_keys().at(key) : it->second.value;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string v = get(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ArgumentError(origin(key) + ": '" + key + "' expects a number, got '" + v + "'");
  }
}

long long RunConfig::get_int(const std::string& key) const {
  const std::string v = get(key);
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ArgumentError(origin(key) + ": '" + key + "' expects an integer, got '" + v + "'");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string v = get(key);
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ArgumentError(origin(key) + ": '" + key + "' expects true or false");
}

std::string RunConfig::origin(const std::string& key) const {
  const auto it = values_.find(key);
  return it == values_.end() ? "default" : it->second.origin;
}

}  // namespace neurmatch::cli
