#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace aanet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree. Carries both shapes for diagnostics.
class ShapeError : public Error {
 public:
  ShapeError(const std::string& what, std::size_t lhs_rows, std::size_t lhs_cols,
             std::size_t rhs_rows, std::size_t rhs_cols)
      : Error(what + ": " + std::to_string(lhs_rows) + "x" + std::to_string(lhs_cols) +
              " vs " + std::to_string(rhs_rows) + "x" + std::to_string(rhs_cols)),
        lhs_rows(lhs_rows), lhs_cols(lhs_cols), rhs_rows(rhs_rows), rhs_cols(rhs_cols) {}

  std::size_t lhs_rows, lhs_cols, rhs_rows, rhs_cols;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

/// A finite-difference probe produced a non-finite objective value.
class ProbeError : public Error {
 public:
  ProbeError(std::size_t row, std::size_t col)
      : Error("non-finite objective at probe (" + std::to_string(row) + ", " +
              std::to_string(col) + ")"),
        row(row), col(col) {}

  std::size_t row, col;
};

/// CTC has no valid alignment of the labels onto the available frames.
class AlignmentError : public Error {
 public:
  AlignmentError() : Error("sequence too short for labels") {}
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace aanet
