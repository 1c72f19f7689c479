#pragma once

#include <map>
#include <string>
#include <vector>

namespace cradle::cli {

/// Entry point shared by the cradle binary and the in-process CLI tests.
/// Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
int run(const std::vector<std::string>& args);
int run(int argc, const char* const* argv);

/// Strict key=value config with [section] headers and # comments. Unknown
/// keys are rejected by the command that consumes a section.
struct ConfigFile {
  std::map<std::string, std::map<std::string, std::string>> sections;
  static ConfigFile parse(const std::string& path);
  static ConfigFile parse_text(const std::string& text, const std::string& origin);
};

}  // namespace cradle::cli
