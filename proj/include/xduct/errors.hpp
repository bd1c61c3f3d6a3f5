#pragma once

#include <stdexcept>
#include <string>

namespace xduct {

// Root of every error thrown by the library. The CLI maps these onto a
// single-line "error: <kind>: <message>" diagnostic.
class Error : public std::runtime_error {
 public:
  Error(const char* kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  const char* kind() const noexcept { return kind_; }

 private:
  const char* kind_;
};

#define XDUCT_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                          \
   public:                                                             \
    explicit Name(const std::string& what) : Error(tag, what) {}       \
  };

XDUCT_DEFINE_ERROR(ShapeError, "shape")
XDUCT_DEFINE_ERROR(DomainError, "domain")
XDUCT_DEFINE_ERROR(ArgumentError, "argument")
XDUCT_DEFINE_ERROR(ContractError, "contract")
XDUCT_DEFINE_ERROR(NumericError, "numeric")
XDUCT_DEFINE_ERROR(ConfigError, "config")
XDUCT_DEFINE_ERROR(EncodingError, "encoding")
XDUCT_DEFINE_ERROR(SizeError, "size")
XDUCT_DEFINE_ERROR(DataError, "data")
XDUCT_DEFINE_ERROR(IoError, "io")
XDUCT_DEFINE_ERROR(FormatError, "format")

#undef XDUCT_DEFINE_ERROR

}  // namespace xduct
