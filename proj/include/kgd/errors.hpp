#pragma once

#include <stdexcept>
#include <string>

namespace kgd {

// Base for all toolkit errors. Subclasses map to the CLI exit codes:
// ConfigError -> 2 (usage/config), everything else -> 1 (runtime/IO).
struct KgdError : std::runtime_error {
  explicit KgdError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : KgdError {
  using KgdError::KgdError;
};

struct IoError : KgdError {
  using KgdError::KgdError;
};

struct ParseError : KgdError {
  using KgdError::KgdError;
};

struct EmptyStore : KgdError {
  using KgdError::KgdError;
};

struct LengthMismatch : KgdError {
  using KgdError::KgdError;
};

struct DanglingReference : KgdError {
  using KgdError::KgdError;
};

struct ExhaustedPools : KgdError {
  using KgdError::KgdError;
};

struct SingleClassError : KgdError {
  using KgdError::KgdError;
};

struct NoPositives : KgdError {
  using KgdError::KgdError;
};

struct VocabMismatch : KgdError {
  using KgdError::KgdError;
};

struct DivergedError : KgdError {
  using KgdError::KgdError;
};

struct NotKnowledgeSeeking : KgdError {
  using KgdError::KgdError;
};

struct NoTemplates : KgdError {
  using KgdError::KgdError;
};

struct EmptyReference : KgdError {
  using KgdError::KgdError;
};

}  // namespace kgd
