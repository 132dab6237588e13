#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ialgca {

// All failures carry a short machine-greppable code plus a human message.
class Error : public std::runtime_error {
 public:
  Error(std::string code, std::string msg)
      : std::runtime_error(code + ": " + msg), code_(std::move(code)), msg_(std::move(msg)) {}
  const std::string& code() const { return code_; }
  const std::string& message() const { return msg_; }

 private:
  std::string code_;
  std::string msg_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error("E_SHAPE", msg) {}
};
struct NumericError : Error {
  explicit NumericError(const std::string& msg) : Error("E_NUMERIC", msg) {}
};
struct ContractError : Error {
  explicit ContractError(const std::string& msg) : Error("E_CONTRACT", msg) {}
};
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error("E_IO", msg) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error("E_CONFIG", msg) {}
};
struct OracleError : Error {
  explicit OracleError(const std::string& msg) : Error("E_ORACLE", msg) {}
};

namespace detail {
inline void cat_one(std::ostringstream&) {}
template <class T, class... Rest>
void cat_one(std::ostringstream& os, const T& v, const Rest&... rest) {
  os << v;
  cat_one(os, rest...);
}
}  // namespace detail

template <class... Args>
std::string cat(const Args&... args) {
  std::ostringstream os;
  detail::cat_one(os, args...);
  return os.str();
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

}  // namespace ialgca
