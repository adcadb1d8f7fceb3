// Copyright 2026 The adhoc-fusion Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdlib>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <string_view>

namespace adhoc_fusion::log {

enum class Level { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

inline Level parse_level(std::string_view s, Level fallback) {
  if (s == "error") return Level::kError;
  if (s == "warn") return Level::kWarn;
  if (s == "info") return Level::kInfo;
  if (s == "debug") return Level::kDebug;
  return fallback;
}

// Threshold taken from ADHOC_FUSION_LOG on first use; defaults to warn.
inline Level& threshold() {
  static Level level = [] {
    const char* env = std::getenv("ADHOC_FUSION_LOG");
    return env ? parse_level(env, Level::kWarn) : Level::kWarn;
  }();
  return level;
}

inline void write(Level level, std::string_view msg) {
  if (static_cast<int>(level) > static_cast<int>(threshold())) return;
  static constexpr std::string_view kNames[] = {"ERROR", "WARN", "INFO", "DEBUG"};
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << "[" << kNames[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void error(std::string_view msg) { write(Level::kError, msg); }
inline void warn(std::string_view msg) { write(Level::kWarn, msg); }
inline void info(std::string_view msg) { write(Level::kInfo, msg); }
inline void debug(std::string_view msg) { write(Level::kDebug, msg); }

}  // namespace adhoc_fusion::log
