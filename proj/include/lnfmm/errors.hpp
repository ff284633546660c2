#pragma once

#include <stdexcept>
#include <string>

namespace lnfmm {

// Base of every error the library throws. `code()` is a stable short token
// used by the CLI when it prints machine-parseable failures.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class DimensionError : public Error {
 public:
  DimensionError(const std::string& op, const std::string& lhs, const std::string& rhs)
      : Error("dimension", op + ": shape mismatch " + lhs + " vs " + rhs),
        lhs_(lhs),
        rhs_(rhs) {}

  const std::string& lhs() const noexcept { return lhs_; }
  const std::string& rhs() const noexcept { return rhs_; }

 private:
  std::string lhs_;
  std::string rhs_;
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& message) : Error("contract", message) {}
};

class NonFiniteError : public Error {
 public:
  NonFiniteError(std::string where, const std::string& message)
      : Error("non_finite", where + ": " + message), where_(std::move(where)) {}

  // Parameter group or layer that produced the value.
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

class InitRequiredError : public Error {
 public:
  explicit InitRequiredError(const std::string& message) : Error("init_required", message) {}
};

class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error("config", field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& message) : Error("format", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

}  // namespace lnfmm
