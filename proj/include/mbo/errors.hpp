#ifndef MBO_ERRORS_HPP
#define MBO_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace mbo {

// Base of every error raised by the library. The CLI maps subclasses onto exit
// codes (config 2, missing prerequisite 3, numeric 4).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line) : Error(what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Non-finite values. `stage` names where they surfaced (loss, gradient, sampler step ...).
class NumericError : public Error {
 public:
  NumericError(const std::string& stage, const std::string& what) : Error(stage + ": " + what), stage_(stage) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class InapplicableMetric : public Error {
 public:
  using Error::Error;
};

class LookupError : public Error {
 public:
  using Error::Error;
};

class StudyError : public Error {
 public:
  using Error::Error;
};

class MissingArtifact : public Error {
 public:
  using Error::Error;
};

class UndefinedCorrelation : public Error {
 public:
  using Error::Error;
};

}  // namespace mbo

#endif  // MBO_ERRORS_HPP
