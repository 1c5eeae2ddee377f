#pragma once

#include <stdexcept>
#include <string>

namespace dddr {

/// Broad failure classes. The CLI maps them onto exit codes.
enum class ErrorKind {
  Usage,    // bad configuration or arguments
  Data,     // malformed or missing input data / artifacts
  Numeric,  // shape errors, non-finite values, divergence
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::Usage, what) {}
};

/// A stage needed an artifact from an earlier stage that is not on disk.
class MissingArtifact : public Error {
 public:
  explicit MissingArtifact(const std::string& path)
      : Error(ErrorKind::Data, "missing artifact: " + path), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

}  // namespace dddr
