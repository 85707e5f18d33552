#pragma once

#include <stdexcept>
#include <string>

namespace kbd {

// Dataset file did not match the declared schema.
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Entity annotation or lookup failed against the lexicon.
struct LexiconError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct VocabularyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A caller broke an operation's precondition.
struct ContractViolation : std::logic_error {
  using std::logic_error::logic_error;
};

// Training produced a non-finite value.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Checkpoint, sidecar, or vocabulary do not belong together.
struct ArtifactMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace kbd
