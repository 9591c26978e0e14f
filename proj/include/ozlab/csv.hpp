#pragma once

#include <cmath>
#include <cstdio>
#include <initializer_list>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

namespace ozlab {

// Round-trip exact, locale independent formatting so reruns compare byte for byte.
inline std::string csv_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(std::ostream& os, std::string run_id) : os_(os), run_id_(std::move(run_id)) {}

  void header(std::initializer_list<const char*> cols) {
    os_ << "run_id";
    for (const char* c : cols) os_ << ',' << c;
    os_ << '\n';
  }

  template <class... Ts>
  void row(const Ts&... xs) {
    os_ << run_id_;
    ((os_ << ',' << cell(xs)), ...);
    os_ << '\n';
  }

 private:
  template <class T>
  static std::string cell(const T& x) {
    if constexpr (std::is_same_v<T, bool>) return x ? "1" : "0";
    else if constexpr (std::is_floating_point_v<T>) return csv_number(static_cast<double>(x));
    else if constexpr (std::is_integral_v<T>) return std::to_string(x);
    else return std::string(x);
  }

  std::ostream& os_;
  std::string run_id_;
};

}  // namespace ozlab
