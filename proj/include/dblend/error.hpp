#pragma once

#include <stdexcept>
#include <string>

namespace dblend {

enum class ErrorCode {
    invalid_argument,
    shape_mismatch,
    non_finite,
    bad_magic,
    version_mismatch,
    truncation,
    vocab_mismatch,
    malformed,
    io,
    divergence,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
   public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

   private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
    if (!cond) fail(code, what);
}

}  // namespace dblend
