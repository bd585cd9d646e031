#pragma once

#include <stdexcept>
#include <string>

namespace qasf {

// Invalid configuration: shapes, architecture, incompatible parameter sets.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad input data: out-of-range classes, empty sample sets, non-finite values.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violation of the client/server exchange contract: stale caches, replayed
// rounds, interleaved sessions, malformed frames.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace qasf
