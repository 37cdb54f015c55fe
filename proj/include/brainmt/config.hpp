#pragma once

#include <map>
#include <string>
#include <vector>

#include "brainmt/common.hpp"

namespace brainmt {

// Flat key=value configuration files, one pair per line, '#' comments.
using KvConfig = std::map<std::string, std::string>;

KvConfig parse_kv_file(const std::string& path);
KvConfig parse_kv_text(const std::string& text, const std::string& origin = "<text>");

bool kv_has(const KvConfig& c, const std::string& key);
// Throw ConfigError naming the key when missing or unparsable.
std::string kv_get(const KvConfig& c, const std::string& key);
std::string kv_get(const KvConfig& c, const std::string& key, const std::string& fallback);
int64_t kv_get_int(const KvConfig& c, const std::string& key);
int64_t kv_get_int(const KvConfig& c, const std::string& key, int64_t fallback);
double kv_get_double(const KvConfig& c, const std::string& key);
double kv_get_double(const KvConfig& c, const std::string& key, double fallback);

// "32" (cubic) or "32,48,64".
void parse_dims(const std::string& value, int& H, int& W, int& D);

}  // namespace brainmt
