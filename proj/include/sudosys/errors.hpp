#pragma once

#include <optional>
#include <stdexcept>
#include <string>

namespace sudosys {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed configuration document: missing field or wrong type.
class SchemaError : public Error {
 public:
  using Error::Error;
};

// Structurally valid configuration that breaks a domain invariant.
// `stage` names the offending stage when there is one.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what, std::optional<int> stage = std::nullopt)
      : Error(what), stage_(stage) {}

  std::optional<int> stage() const { return stage_; }

 private:
  std::optional<int> stage_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Blank client utterance.
class EmptyInput : public Error {
 public:
  EmptyInput() : Error("user input is empty") {}
  explicit EmptyInput(const std::string& what) : Error(what) {}
};

}  // namespace sudosys
