#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "loda/errors.hpp"
#include "loda/matrix.hpp"

namespace loda {

// All file formats in this project are text. Doubles are printed with 17
// significant digits, which round-trips every finite double exactly, so a
// parse -> re-emit cycle is byte identical.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return std::string(buf);
}

inline double parse_double(const std::string& s, bool* ok = nullptr) {
  const char* begin = s.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  bool good = end != begin && end != nullptr && *end == '\0';
  if (ok) *ok = good;
  return good ? v : 0.0;
}

inline long parse_long(const std::string& s, bool* ok = nullptr) {
  const char* begin = s.c_str();
  char* end = nullptr;
  long v = std::strtol(begin, &end, 10);
  bool good = end != begin && end != nullptr && *end == '\0';
  if (ok) *ok = good;
  return good ? v : 0;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

inline void write_matrix_block(std::ostream& os, const Matrix& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) os << ' ';
      os << format_double(m(i, j));
    }
    os << '\n';
  }
}

inline Matrix read_matrix_block(std::istream& is, std::size_t rows,
                                std::size_t cols, const std::string& what) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    std::string line;
    if (!std::getline(is, line))
      throw IoError("truncated matrix block for " + what);
    std::istringstream ls(line);
    for (std::size_t j = 0; j < cols; ++j) {
      std::string tok;
      if (!(ls >> tok))
        throw IoError("short row in matrix block for " + what);
      bool ok = false;
      m(i, j) = parse_double(tok, &ok);
      if (!ok) throw IoError("bad numeric field in matrix block for " + what);
    }
  }
  return m;
}

inline void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os << body;
  if (!os) throw IoError("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for reading: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace loda
