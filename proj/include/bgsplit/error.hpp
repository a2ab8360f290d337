#ifndef BGSPLIT_ERROR_HPP
#define BGSPLIT_ERROR_HPP

#include <stdexcept>
#include <string>

namespace bgsplit {

enum class ErrorKind {
  invalid_input,
  invalid_label,
  configuration,
  numerical_divergence,
  ingestion,
  undefined_metric,
  io,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::invalid_input: return "invalid input";
    case ErrorKind::invalid_label: return "invalid label";
    case ErrorKind::configuration: return "configuration error";
    case ErrorKind::numerical_divergence: return "numerical divergence";
    case ErrorKind::ingestion: return "ingestion error";
    case ErrorKind::undefined_metric: return "undefined metric";
    case ErrorKind::io: return "i/o error";
  }
  return "error";
}

// Every failure raised by the library. `module()` names the component that
// raised it so the CLI can print module-qualified messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string module, const std::string& what)
      : std::runtime_error(module + ": " + to_string(kind) + ": " + what),
        kind_(kind),
        module_(std::move(module)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& module() const noexcept { return module_; }

 private:
  ErrorKind kind_;
  std::string module_;
};

namespace detail {

[[noreturn]] inline void fail(ErrorKind kind, const char* module, const std::string& what) {
  throw Error(kind, module, what);
}

}  // namespace detail
}  // namespace bgsplit

#endif  // BGSPLIT_ERROR_HPP
