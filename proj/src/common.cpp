#include <cmath>
#include <numbers>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "dblend/error.hpp"
#include "dblend/rng.hpp"
#include "dblend/tensor.hpp"

namespace dblend {

namespace {

// Tape tensors are large and short-lived; keeping them on the heap instead of
// fresh mmap regions avoids a page-fault storm on every forward pass.
[[maybe_unused]] const bool malloc_tuned = [] {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
    return true;
}();

}  // namespace

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_argument: return "invalid argument";
        case ErrorCode::shape_mismatch: return "shape mismatch";
        case ErrorCode::non_finite: return "non-finite value";
        case ErrorCode::bad_magic: return "bad magic";
        case ErrorCode::version_mismatch: return "version mismatch";
        case ErrorCode::truncation: return "truncation";
        case ErrorCode::vocab_mismatch: return "vocabulary hash mismatch";
        case ErrorCode::malformed: return "malformed input";
        case ErrorCode::io: return "i/o failure";
        case ErrorCode::divergence: return "divergence";
    }
    return "unknown";
}

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

double CounterRng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

}  // namespace dblend
