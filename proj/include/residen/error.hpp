#pragma once

#include <stdexcept>
#include <string>

namespace residen {

enum class ErrorKind {
  Config,
  Dimension,
  Usage,
  Data,
  Label,
  Io,
  Numeric,
  UndefinedMetric,
  Protocol,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define RESIDEN_DEFINE_ERROR(Name, Kind)                                        \
  class Name : public Error {                                                   \
   public:                                                                      \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {}    \
  };

RESIDEN_DEFINE_ERROR(ConfigError, Config)
RESIDEN_DEFINE_ERROR(DimensionError, Dimension)
RESIDEN_DEFINE_ERROR(UsageError, Usage)
RESIDEN_DEFINE_ERROR(DataError, Data)
RESIDEN_DEFINE_ERROR(LabelError, Label)
RESIDEN_DEFINE_ERROR(IoError, Io)
RESIDEN_DEFINE_ERROR(NumericError, Numeric)
RESIDEN_DEFINE_ERROR(UndefinedMetricError, UndefinedMetric)
RESIDEN_DEFINE_ERROR(ProtocolError, Protocol)

#undef RESIDEN_DEFINE_ERROR

// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 5 protocol.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Dimension:
    case ErrorKind::Usage:
      return 2;
    case ErrorKind::Data:
    case ErrorKind::Label:
    case ErrorKind::Io:
      return 3;
    case ErrorKind::Numeric:
    case ErrorKind::UndefinedMetric:
      return 4;
    case ErrorKind::Protocol:
      return 5;
  }
  return 1;
}

}  // namespace residen
