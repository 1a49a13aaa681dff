#pragma once

#include <stdexcept>
#include <string>

namespace skeldiff {

// Every library failure derives from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
  using Error::Error;
};

class TopologyError : public Error {
  using Error::Error;
};

class ConfigError : public Error {
  using Error::Error;
};

class DegenerateRotationError : public Error {
  using Error::Error;
};

class ValidationError : public Error {
  using Error::Error;
};

class StatsError : public Error {
  using Error::Error;
};

class LabelingError : public Error {
  using Error::Error;
};

class ExportError : public Error {
  using Error::Error;
};

class CheckpointError : public Error {
  using Error::Error;
};

class TrainingError : public Error {
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(int line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

}  // namespace skeldiff
