#pragma once

#include <stdexcept>
#include <string>

namespace flat {

// Data/format problems: bad shapes, non-finite values, unreadable manifests.
class data_error : public std::runtime_error {
  public:
    explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem problems while loading or saving artifacts.
class io_error : public std::runtime_error {
  public:
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical failures: eigensolver breakdown, corrupted accumulators,
// singular blocks that survive regularization.
class numeric_error : public std::runtime_error {
  public:
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad arguments to an operation (rank out of range, sparsity out of range).
class usage_error : public std::invalid_argument {
  public:
    explicit usage_error(const std::string& msg) : std::invalid_argument(msg) {}
};

} // namespace flat
