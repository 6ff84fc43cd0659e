#pragma once

#include <stdexcept>
#include <string>

namespace unrect {

// Input outside a documented guard range (bad dimension, depth too large, ...).
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A point or set left the domain a map is defined on.
class DomainError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// A constrained search found no admissible candidate.
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A budget inequality of the iteration ledger was violated.
class BudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace unrect
