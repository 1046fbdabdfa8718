#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "spiga/error.hpp"

namespace spiga {

inline nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ParseError("JSON parse failure in " + path + ": " + e.what());
  }
  return j;
}

// Config objects are closed schemas: any key we do not understand is an error,
// not a silent no-op.
inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known,
                                const std::string& context) {
  if (!j.is_object()) throw ParseError(context + " must be a JSON object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (item.key() == k) {
        ok = true;
        break;
      }
    if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + context);
  }
}

template <typename T>
T json_get(const nlohmann::json& j, const char* key, const std::string& context) {
  if (!j.contains(key)) throw ConfigError("missing key '" + std::string(key) + "' in " + context);
  try {
    return j.at(key).get<T>();
  } catch (const std::exception& e) {
    throw ConfigError("bad value for '" + std::string(key) + "' in " + context + ": " + e.what());
  }
}

template <typename T>
T json_get_or(const nlohmann::json& j, const char* key, const std::string& context, T fallback) {
  if (!j.contains(key)) return fallback;
  return json_get<T>(j, key, context);
}

// All file outputs go through write-to-temp + atomic rename so a failed run
// never leaves a partial file behind.
inline void write_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
  }
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw IoError("write failure on " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot rename " + tmp.string() + " to " + path + ": " + ec.message());
  }
}

}  // namespace spiga
