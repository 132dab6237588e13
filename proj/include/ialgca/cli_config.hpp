#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace ialgca {

// `key = value` files: blank lines and #-comments ignored, later keys
// override earlier ones, unknown keys rejected with their line number.
std::map<std::string, std::string> read_config_file(const std::string& path,
                                                    const std::set<std::string>& allowed);

// Ablation matrix file: global `key = value` lines plus one `[cell NAME]`
// section per configuration, each holding attention/lambda/aux/r/ial keys.
struct AblationFileCell {
  std::string name;
  std::map<std::string, std::string> kv;
};
struct AblationFile {
  std::map<std::string, std::string> globals;
  std::vector<AblationFileCell> cells;
};
AblationFile parse_ablation_file(const std::string& path);

bool parse_bool(const std::string& value, const std::string& what);

}  // namespace ialgca
