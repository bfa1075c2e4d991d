#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace gatsbi {

/// Base error for everything the library raises on bad input or bad state.
struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when a serialized container or episode fails validation.
struct FormatError : Error {
    using Error::Error;
};

/// Raised when a tensor invariant (shape, finiteness, normalization) breaks.
struct InvariantError : Error {
    using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw Error(msg);
}

/// splitmix64: cheap, well-mixed stream derivation for seeding sub-generators.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Derive an independent seed for a named stream (step index, batch lane, ...).
inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
    return splitmix64(base ^ splitmix64(stream + 0x51ed270bull));
}

}  // namespace gatsbi
