#pragma once

#include <stdexcept>
#include <string>

namespace phg2st {

// Base of every error raised by the library. Subclasses map onto the CLI
// exit-code contract (see tools/phg2st.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error { using Error::Error; };
class ParameterError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class ValidationError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class NumericalError : public Error { using Error::Error; };
class CheckpointError : public Error { using Error::Error; };

}  // namespace phg2st
