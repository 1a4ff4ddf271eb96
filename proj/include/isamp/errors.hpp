#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace isamp {

/// Base class for all isamp exceptions.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class EmptySample : public Error {
 public:
  using Error::Error;
};

class SingularDesign : public Error {
 public:
  using Error::Error;
};

class SingularJacobian : public Error {
 public:
  using Error::Error;
};

class SingularBread : public Error {
 public:
  using Error::Error;
};

class NonConvergence : public Error {
 public:
  using Error::Error;
};

class InfiniteMoment : public Error {
 public:
  using Error::Error;
};

class NumericUnderflow : public Error {
 public:
  using Error::Error;
};

class DegenerateResponsibility : public NumericUnderflow {
 public:
  using NumericUnderflow::NumericUnderflow;
};

class ComponentCollapse : public Error {
 public:
  using Error::Error;
};

class DegenerateDenominator : public Error {
 public:
  using Error::Error;
};

/// Cauchy-Schwarz denominator E(W-1|x) - E(We|x)^2/E(We^2|x) hit zero.
class CauchySchwarzDegeneracy : public Error {
 public:
  CauchySchwarzDegeneracy(const std::string& msg, double at_x)
      : Error(msg), offending_x(at_x) {}
  double offending_x;
};

class NonFiniteIntegrand : public Error {
 public:
  using Error::Error;
};

/// One dataset-validation failure.
struct Violation {
  enum class Code {
    EmptyDataset,
    MissingField,
    WeightOutOfRange,
    SettingMismatch,
    BadStratum,
    BadDesign,
  };
  Code code;
  long record = -1;  // -1: dataset-level
  std::string message;
};

inline const char* violation_code_name(Violation::Code c) {
  switch (c) {
    case Violation::Code::EmptyDataset: return "EmptyDataset";
    case Violation::Code::MissingField: return "MissingField";
    case Violation::Code::WeightOutOfRange: return "WeightOutOfRange";
    case Violation::Code::SettingMismatch: return "SettingMismatch";
    case Violation::Code::BadStratum: return "BadStratum";
    case Violation::Code::BadDesign: return "BadDesign";
  }
  return "Unknown";
}

class ValidationError : public Error {
 public:
  explicit ValidationError(std::vector<Violation> v)
      : Error(summarize(v)), violations(std::move(v)) {}
  std::vector<Violation> violations;

 private:
  static std::string summarize(const std::vector<Violation>& v) {
    if (v.empty()) return "validation failed";
    std::string s = violation_code_name(v.front().code);
    s += ": ";
    s += v.front().message;
    if (v.size() > 1) s += " (+" + std::to_string(v.size() - 1) + " more)";
    return s;
  }
};

}  // namespace isamp
