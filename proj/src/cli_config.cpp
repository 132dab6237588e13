#include "ialgca/cli_config.hpp"

#include <fstream>

#include "ialgca/common.hpp"

namespace ialgca {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t");
  size_t b = s.find_last_not_of(" \t");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

}  // namespace

std::map<std::string, std::string> read_config_file(const std::string& path,
                                                    const std::set<std::string>& allowed) {
  std::ifstream is(path);
  if (!is) throw IoError(cat("cannot open config '", path, "'"));
  std::map<std::string, std::string> out;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.ends_with("\r")) line.pop_back();
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(cat("config '", path, "' line ", line_no, ": expected key = value"));
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError(cat("config '", path, "' line ", line_no, ": empty key"));
    if (!allowed.count(key))
      throw ConfigError(cat("config '", path, "' line ", line_no, ": unknown key '", key, "'"));
    out[key] = value;  // later keys override
  }
  return out;
}

AblationFile parse_ablation_file(const std::string& path) {
  static const std::set<std::string> kGlobalKeys = {
      "seeds", "epochs", "lr", "gamma", "batch", "seed", "u", "v",
      "aux_weight", "eval_every"};
  static const std::set<std::string> kCellKeys = {"attention", "ial", "aux", "lambda", "r"};

  std::ifstream is(path);
  if (!is) throw IoError(cat("cannot open ablation spec '", path, "'"));
  AblationFile out;
  AblationFileCell* current = nullptr;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.ends_with("\r")) line.pop_back();
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError(cat("spec '", path, "' line ", line_no, ": unterminated section"));
      std::string inner = trim(t.substr(1, t.size() - 2));
      if (inner.rfind("cell", 0) != 0)
        throw ConfigError(cat("spec '", path, "' line ", line_no,
                              ": expected [cell NAME] section"));
      std::string name = trim(inner.substr(4));
      if (name.empty())
        throw ConfigError(cat("spec '", path, "' line ", line_no, ": cell needs a name"));
      out.cells.push_back({name, {}});
      current = &out.cells.back();
      continue;
    }
    auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(cat("spec '", path, "' line ", line_no, ": expected key = value"));
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    const auto& allowed = current ? kCellKeys : kGlobalKeys;
    if (!allowed.count(key))
      throw ConfigError(cat("spec '", path, "' line ", line_no, ": unknown key '", key,
                            current ? "' in cell section" : "'"));
    (current ? current->kv : out.globals)[key] = value;
  }
  if (out.cells.empty())
    throw ConfigError(cat("spec '", path, "' defines no [cell NAME] sections"));
  return out;
}

bool parse_bool(const std::string& value, const std::string& what) {
  if (value == "on" || value == "true" || value == "1") return true;
  if (value == "off" || value == "false" || value == "0") return false;
  throw ConfigError(cat("bad boolean '", value, "' for ", what, " (on|off)"));
}

}  // namespace ialgca
