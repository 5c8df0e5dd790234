#pragma once

#include <stdexcept>
#include <string>

namespace delay_hjb {

// Bad arguments: dimension mismatches, out-of-range parameters.
using InvalidArgument = std::invalid_argument;

// Evaluation outside a function's domain (for instance u >= u_bar in the spending cost).
using DomainError = std::domain_error;

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A probed structural assumption does not hold; the message names the witness.
class PreconditionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace delay_hjb
