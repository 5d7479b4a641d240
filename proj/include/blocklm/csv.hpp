#pragma once

#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

namespace blocklm {

// RFC 4180 writer: comma separated, CRLF-free (\n) line ends, fields quoted
// when they contain a comma, quote or newline.
class CsvWriter {
 public:
  explicit CsvWriter(std::ostream& out) : out_(&out) {}

  void row(const std::vector<std::string>& fields);

  template <typename... Ts>
  void values(const Ts&... vs) {
    row({to_field(vs)...});
  }

  static std::string escape(const std::string& field);

 private:
  template <typename T>
  static std::string to_field(const T& v) {
    if constexpr (std::is_convertible_v<T, std::string>) {
      return std::string(v);
    } else if constexpr (std::is_floating_point_v<T>) {
      // integral values (byte and FLOP counts) print exactly
      if (v == static_cast<T>(static_cast<long long>(v)) && v < static_cast<T>(1e18) && v > static_cast<T>(-1e18)) {
        return std::to_string(static_cast<long long>(v));
      }
      std::ostringstream s;
      s.precision(9);
      s << v;
      return s.str();
    } else {
      return std::to_string(v);
    }
  }

  std::ostream* out_;
};

std::ofstream open_output(const std::filesystem::path& path);

}  // namespace blocklm
