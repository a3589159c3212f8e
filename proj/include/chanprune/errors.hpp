#ifndef CHANPRUNE_ERRORS_HPP_
#define CHANPRUNE_ERRORS_HPP_

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace chanprune {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
	using std::runtime_error::runtime_error;
};

/// Operand extents do not match what a kernel or layer expects.
class DimensionError : public Error {
public:
	using Error::Error;
};

/// A derived extent (conv output size, pool output size) is not a positive integer.
class ShapeError : public Error {
public:
	using Error::Error;
};

/// An object was used in the wrong lifecycle state (stale record, M = 0, ...).
class StateError : public Error {
public:
	using Error::Error;
};

/// Caller supplied an invalid argument value.
class InputError : public Error {
public:
	using Error::Error;
};

/// Malformed file contents. Carries the byte offset where parsing failed.
class FormatError : public Error {
public:
	FormatError(const std::string& what, std::size_t offset)
			: Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
	std::size_t offset() const noexcept { return offset_; }
private:
	std::size_t offset_;
};

/// The requested operation is not supported for this graph pattern.
class CapabilityError : public Error {
public:
	using Error::Error;
};

/// Training diverged.
class TrainingError : public Error {
public:
	using Error::Error;
};

/// Invalid experiment configuration (unknown key, bad value).
class ConfigError : public Error {
public:
	using Error::Error;
};

namespace detail {

inline std::string shape_str(const std::vector<std::size_t>& shape) {
	std::ostringstream os;
	os << '[';
	for (std::size_t i = 0; i < shape.size(); ++i) {
		if (i) os << 'x';
		os << shape[i];
	}
	os << ']';
	return os.str();
}

}  // namespace detail

}  // namespace chanprune

#endif  // CHANPRUNE_ERRORS_HPP_
