#pragma once

#include <stdexcept>
#include <string>

namespace gadms {

// Failure categories surfaced by the library. The CLI maps these onto
// process exit codes, tests match on them directly.
enum class ErrorKind {
  Length,           // sequence exceeds the configured token budget
  Vocabulary,       // token id outside the vocabulary
  Shape,            // tensor dimensions inconsistent with the config
  DegenerateInput,  // zero-norm vector, empty sequence, all-invalid mask
  Alignment,        // score/sequence length mismatch
  Contract,         // caller violated a documented precondition
  Config,           // invalid configuration value
  Label,            // ground-truth labels unusable (e.g. row with no positive)
  MalformedRecord,  // curation record fails its own invariants
  Template,         // caption template references an unknown slot
  Io,               // file read/write failure
  Integrity,        // checkpoint or manifest corrupt
  Compatibility,    // checkpoint and corpus disagree (vocab, shapes)
  Numeric,          // non-finite loss or similar numeric abort
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

inline void check(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

}  // namespace gadms
