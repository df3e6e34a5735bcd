#pragma once

#include <stdexcept>
#include <string>

namespace txnf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad user input: config fields, schema contents, record contents.
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& message)
      : Error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

/// Artifact produced for a different schema than the one consuming it.
class SchemaMismatch : public Error {
 public:
  using Error::Error;
};

/// Training produced a NaN/Inf loss.
class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(const std::string& attribute)
      : Error("non-finite loss for attribute '" + attribute + "'"), attribute_(attribute) {}
  const std::string& attribute() const { return attribute_; }

 private:
  std::string attribute_;
};

}  // namespace txnf
