#ifndef FLOWCAST_TEXTIO_HPP
#define FLOWCAST_TEXTIO_HPP

#include <string>
#include <vector>

namespace flowcast::textio {

/// %.17g: shortest form that round-trips an IEEE double exactly.
std::string format_double(double v);

/// Splits on every comma; empty fields are preserved.
std::vector<std::string> split_csv(const std::string& line);

[[noreturn]] void parse_fail(long line_no, const std::string& what);

/// Whole-string conversions that report the offending line and field.
double parse_double(const std::string& s, long line_no, const char* what);
long parse_long(const std::string& s, long line_no, const char* what);

}  // namespace flowcast::textio

#endif  // FLOWCAST_TEXTIO_HPP
