#pragma once

#include <stdexcept>
#include <string>

namespace lvf {

// Exit codes used by the CLI: 2 config/contract, 3 numeric, 4 I/O.
class Error : public std::runtime_error {
 public:
  Error(const std::string& msg, int exit_code)
      : std::runtime_error(msg), exit_code_(exit_code) {}
  int exit_code() const { return exit_code_; }

 private:
  int exit_code_;
};

// Bad configuration: unknown keys, invalid flag values, inconsistent setups.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error(m, 2) {}
};

// Tensor dimension mismatch; message names the offending shapes.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& m) : Error(m, 2) {}
};

// Violated API precondition (caller bug rather than data problem).
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& m) : Error(m, 2) {}
};

// Image/patch geometry that does not divide evenly.
class GeometryError : public Error {
 public:
  explicit GeometryError(const std::string& m) : Error(m, 2) {}
};

// Degradation parameter outside its documented range; message names field and range.
class ParamError : public Error {
 public:
  explicit ParamError(const std::string& m) : Error(m, 2) {}
};

// NaN/Inf produced from finite inputs, domain violations, sampler divergence.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error(m, 3) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error(m, 4) {}
};

}  // namespace lvf
