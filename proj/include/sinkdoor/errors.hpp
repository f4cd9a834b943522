#pragma once

#include <stdexcept>
#include <string>

namespace sinkdoor {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map the kind onto an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
  using Error::Error;
};
class NumericError : public Error {
  using Error::Error;
};
class ContractError : public Error {
  using Error::Error;
};
class ConfigError : public Error {
  using Error::Error;
};
class LengthError : public Error {
  using Error::Error;
};
class VocabError : public Error {
  using Error::Error;
};
class InputError : public Error {
  using Error::Error;
};
class IoError : public Error {
  using Error::Error;
};
// A statistic is undefined for the input (e.g. zero variance).
class DegenerateError : public Error {
  using Error::Error;
};

class TrainingFault : public Error {
 public:
  TrainingFault(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

}  // namespace sinkdoor
