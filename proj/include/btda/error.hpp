// include/btda/error.hpp
//
// Copyright 2026 The btda-lab Authors
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

#pragma once

#include <stdexcept>
#include <string>

namespace btda {

/// Error codes shared across the library. Each code maps to one of the
/// CLI exit classes: 2 = configuration, 3 = runtime numeric/data, 4 = I/O.
enum class Err {
  kBadK,
  kBadDim,
  kEmptySpecs,
  kNoSupport,
  kEmptyDomain,
  kEmptyClass,
  kEmpty,
  kIo,
  kBadMagic,
  kTruncated,
  kBadArch,
  kShape,
  kNonFinite,
  kBadProb,
  kLogDomain,
  kBadMethod,
  kConfig,
};

inline const char* err_name(Err e) {
  switch (e) {
    case Err::kBadK: return "E_BAD_K";
    case Err::kBadDim: return "E_BAD_DIM";
    case Err::kEmptySpecs: return "E_EMPTY_SPECS";
    case Err::kNoSupport: return "E_NO_SUPPORT";
    case Err::kEmptyDomain: return "E_EMPTY_DOMAIN";
    case Err::kEmptyClass: return "E_EMPTY_CLASS";
    case Err::kEmpty: return "E_EMPTY";
    case Err::kIo: return "E_IO";
    case Err::kBadMagic: return "E_BAD_MAGIC";
    case Err::kTruncated: return "E_TRUNCATED";
    case Err::kBadArch: return "E_BAD_ARCH";
    case Err::kShape: return "E_SHAPE";
    case Err::kNonFinite: return "E_NONFINITE";
    case Err::kBadProb: return "E_BAD_PROB";
    case Err::kLogDomain: return "E_LOG_DOMAIN";
    case Err::kBadMethod: return "E_BAD_METHOD";
    case Err::kConfig: return "E_CONFIG";
  }
  return "E_UNKNOWN";
}

/// Process exit code class for an error (see cli.hpp).
inline int err_exit_code(Err e) {
  switch (e) {
    case Err::kIo:
    case Err::kBadMagic:
    case Err::kTruncated:
      return 4;
    case Err::kConfig:
    case Err::kBadMethod:
    case Err::kBadK:
    case Err::kBadDim:
    case Err::kEmptySpecs:
    case Err::kBadArch:
    case Err::kShape:
      return 2;
    default:
      return 3;
  }
}

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& msg)
      : std::runtime_error(std::string(err_name(code)) + ": " + msg), code_(code) {}

  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void fail(Err code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool cond, Err code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace btda
