// Copyright 2026 The tensorpar Authors. All Rights Reserved.
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

namespace tp {

/// Root of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An id or position lies outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A scalar argument lies outside its domain.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Inconsistent configuration, detected before any worker starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Members of a collective disagreed about what they were calling.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// A collective did not complete within the rendezvous timeout.
class DeadlockError : public Error {
 public:
  using Error::Error;
};

/// Another worker failed and the simulated job is being torn down.
class AbortedError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf produced by a public operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Data-parallel replicas no longer hold identical parameters.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace tp
