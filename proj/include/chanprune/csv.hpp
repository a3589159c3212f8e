#ifndef CHANPRUNE_CSV_HPP_
#define CHANPRUNE_CSV_HPP_

#include <charconv>
#include <cstdint>
#include <istream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "errors.hpp"

namespace chanprune {

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
	char buf[64];
	const auto r = std::to_chars(buf, buf + sizeof buf, v);
	return std::string(buf, r.ptr);
}

inline double parse_double(std::string_view s) {
	double v = 0;
	const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
	if (r.ec != std::errc() || r.ptr != s.data() + s.size())
		throw FormatError("not a number: '" + std::string(s) + "'", 0);
	return v;
}

inline std::uint64_t parse_u64(std::string_view s) {
	std::uint64_t v = 0;
	const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
	if (r.ec != std::errc() || r.ptr != s.data() + s.size())
		throw FormatError("not an unsigned integer: '" + std::string(s) + "'", 0);
	return v;
}

inline std::vector<std::string_view> split_fields(std::string_view line, char sep = ',') {
	std::vector<std::string_view> out;
	std::size_t start = 0;
	for (;;) {
		const std::size_t p = line.find(sep, start);
		out.push_back(line.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
		if (p == std::string_view::npos) break;
		start = p + 1;
	}
	return out;
}

/// Reads all data rows of a CSV stream after checking its header line.
inline std::vector<std::vector<std::string>> read_csv_rows(std::istream& in, std::string_view header) {
	std::string line;
	if (!std::getline(in, line) || line != header)
		throw FormatError("expected CSV header '" + std::string(header) + "'", 0);
	const std::size_t width = split_fields(header).size();
	std::vector<std::vector<std::string>> rows;
	std::size_t offset = line.size() + 1;
	while (std::getline(in, line)) {
		if (line.empty()) continue;
		const auto f = split_fields(line);
		if (f.size() != width)
			throw FormatError("CSV row has " + std::to_string(f.size()) + " fields, expected " + std::to_string(width),
					offset);
		rows.emplace_back(f.begin(), f.end());
		offset += line.size() + 1;
	}
	return rows;
}

}  // namespace chanprune

#endif  // CHANPRUNE_CSV_HPP_
