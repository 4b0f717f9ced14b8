// Copyright 2026 The thermaldet Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Process-wide warning sink; tests swap it to capture messages.

#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace thermaldet {

using LogSink = std::function<void(const std::string&)>;

inline LogSink& log_sink() {
  static LogSink sink = [](const std::string& m) { std::cerr << m << '\n'; };
  return sink;
}

inline void log_warning(const std::string& message) { log_sink()("warning: " + message); }

// Restores the previous sink on scope exit.
class ScopedLogSink {
 public:
  explicit ScopedLogSink(LogSink sink) : saved_(log_sink()) { log_sink() = std::move(sink); }
  ~ScopedLogSink() { log_sink() = saved_; }
  ScopedLogSink(const ScopedLogSink&) = delete;
  ScopedLogSink& operator=(const ScopedLogSink&) = delete;

 private:
  LogSink saved_;
};

}  // namespace thermaldet
