#include "brainmt/config.hpp"

#include <fstream>
#include <sstream>

namespace brainmt {

namespace {

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KvConfig parse_kv_text(const std::string& text, const std::string& origin) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) +
                        ": expected key=value, got: " + line);
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    cfg[key] = val;
  }
  return cfg;
}

KvConfig parse_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_kv_text(ss.str(), path);
}

bool kv_has(const KvConfig& c, const std::string& key) { return c.count(key) > 0; }

std::string kv_get(const KvConfig& c, const std::string& key) {
  auto it = c.find(key);
  if (it == c.end()) throw ConfigError("missing configuration key: " + key);
  return it->second;
}

std::string kv_get(const KvConfig& c, const std::string& key, const std::string& fallback) {
  auto it = c.find(key);
  return it == c.end() ? fallback : it->second;
}

int64_t kv_get_int(const KvConfig& c, const std::string& key) {
  const std::string v = kv_get(c, key);
  try {
    size_t pos = 0;
    int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("configuration key '" + key + "' is not an integer: " + v);
  }
}

int64_t kv_get_int(const KvConfig& c, const std::string& key, int64_t fallback) {
  return kv_has(c, key) ? kv_get_int(c, key) : fallback;
}

double kv_get_double(const KvConfig& c, const std::string& key) {
  const std::string v = kv_get(c, key);
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("configuration key '" + key + "' is not a number: " + v);
  }
}

double kv_get_double(const KvConfig& c, const std::string& key, double fallback) {
  return kv_has(c, key) ? kv_get_double(c, key) : fallback;
}

void parse_dims(const std::string& value, int& H, int& W, int& D) {
  std::vector<int> parts;
  std::stringstream ss(value);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      parts.push_back(std::stoi(trim(tok)));
    } catch (const std::exception&) {
      throw ConfigError("bad dims value: " + value);
    }
  }
  if (parts.size() == 1) {
    H = W = D = parts[0];
  } else if (parts.size() == 3) {
    H = parts[0];
    W = parts[1];
    D = parts[2];
  } else {
    throw ConfigError("dims must be one or three comma-separated integers: " + value);
  }
}

}  // namespace brainmt
