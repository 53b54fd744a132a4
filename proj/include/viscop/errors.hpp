#pragma once

#include <stdexcept>
#include <string>

namespace viscop {

/// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf encountered, or a numerically singular quantity.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API misuse, e.g. calling backward() on a non-scalar.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A batch with nothing to learn from (all positions masked, empty answer, empty benchmark).
class DegenerateBatchError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid or incomplete configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training produced a non-finite loss.
class NumericAbort : public std::runtime_error {
 public:
  NumericAbort(std::size_t step, const std::string& what)
      : std::runtime_error(what), step_(step) {}
  [[nodiscard]] std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace viscop
