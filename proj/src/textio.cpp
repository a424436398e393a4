#include "flowcast/textio.hpp"

#include <cstdio>
#include <stdexcept>

namespace flowcast::textio {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

[[noreturn]] void parse_fail(long line_no, const std::string& what) {
  throw std::runtime_error("log parse error at line " + std::to_string(line_no) + ": " + what);
}

double parse_double(const std::string& s, long line_no, const char* what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) parse_fail(line_no, std::string("trailing characters in ") + what);
    return v;
  } catch (const std::logic_error&) {
    parse_fail(line_no, std::string("bad ") + what + " '" + s + "'");
  }
}

long parse_long(const std::string& s, long line_no, const char* what) {
  try {
    std::size_t used = 0;
    const long v = std::stol(s, &used);
    if (used != s.size()) parse_fail(line_no, std::string("trailing characters in ") + what);
    return v;
  } catch (const std::logic_error&) {
    parse_fail(line_no, std::string("bad ") + what + " '" + s + "'");
  }
}

}  // namespace flowcast::textio
