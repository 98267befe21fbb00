#ifndef SWIPE_COMMON_HPP
#define SWIPE_COMMON_HPP

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

namespace swipe {

// Error hierarchy. The CLI maps ConfigError/ParseError/ValidationError to
// exit code 2 (user error) and everything else to 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class BoundsError : public Error {
public:
    using Error::Error;
};

class TrainingError : public Error {
public:
    using Error::Error;
};

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view text)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

/// Derives an independent stream seed from the root seed and a component name.
/// Every random consumer in the project goes through this so a single root
/// seed pins the whole run.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view component)
{
    return detail::splitmix64(root ^ detail::splitmix64(detail::fnv1a(component)));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view component, std::uint64_t index)
{
    return detail::splitmix64(derive_seed(root, component) + detail::splitmix64(index));
}

} // namespace swipe

#endif
