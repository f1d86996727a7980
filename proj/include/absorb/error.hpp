#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace absorb {

// Machine-readable error categories. The CLI prints them as
// "error: <code>: <message>".
enum class Errc {
  structural,        // dimension mismatch, orphaned files, bad library layout
  degenerate_input,  // nothing computable in the input
  domain,            // parameter outside its mathematical domain
  shape,             // tensor/channel mismatch
  malformed_header,
  bad_maxval,
  truncated_payload,
  io,
  config,
  divergence,
  not_found,
};

inline std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::structural: return "structural";
    case Errc::degenerate_input: return "degenerate-input";
    case Errc::domain: return "domain";
    case Errc::shape: return "shape";
    case Errc::malformed_header: return "malformed-header";
    case Errc::bad_maxval: return "bad-maxval";
    case Errc::truncated_payload: return "truncated-payload";
    case Errc::io: return "io";
    case Errc::config: return "config";
    case Errc::divergence: return "divergence";
    case Errc::not_found: return "not-found";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

}  // namespace absorb
