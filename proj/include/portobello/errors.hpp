#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>

namespace portobello {

// Root of every exception thrown by the library.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// frames
struct LookupError : Error {
  using Error::Error;
};
struct UnknownFrame : LookupError {
  using LookupError::LookupError;
};
struct ExtrapolationError : LookupError {
  using LookupError::LookupError;
};
struct ConnectivityError : LookupError {
  using LookupError::LookupError;
};
struct CycleError : Error {
  using Error::Error;
};
struct ReparentError : Error {
  using Error::Error;
};

// file formats
struct IoError : Error {
  using Error::Error;
};
struct FormatError : Error {
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset(offset) {}
  std::size_t offset;
};

// registration / localization
struct NoCorrespondences : Error {
  using Error::Error;
};
struct RegistrationDiverged : Error {
  RegistrationDiverged(std::size_t scan_index, double fitness)
      : Error("registration diverged at scan " + std::to_string(scan_index) +
              " (fitness " + std::to_string(fitness) + ")"),
        scan_index(scan_index),
        fitness(fitness) {}
  std::size_t scan_index;
  double fitness;
};
struct InitializationFailed : Error {
  using Error::Error;
};

// scenario
struct SchemaError : Error {
  SchemaError(std::string path, const std::string& reason)
      : Error(path + ": " + reason), path(std::move(path)) {}
  std::string path;
};
struct DanglingReference : Error {
  explicit DanglingReference(std::string id)
      : Error("dangling reference to '" + id + "'"), id(std::move(id)) {}
  std::string id;
};

// wire protocol
struct FrameError : Error {
  using Error::Error;
};
struct UnknownType : Error {
  explicit UnknownType(unsigned tag)
      : Error("unknown message type tag " + std::to_string(tag)), tag(tag) {}
  unsigned tag;
};
struct BindError : Error {
  using Error::Error;
};

// harness
struct RouteUnreachable : Error {
  using Error::Error;
};
struct ScenarioMismatch : Error {
  using Error::Error;
};

}  // namespace portobello
