#pragma once

#include <stdexcept>
#include <string>

namespace cid {

// Every library failure derives from Error; kind() is the stable, machine-readable tag
// that the CLI prints on its single error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define CID_DEFINE_ERROR(Name)                                               \
  class Name : public Error {                                                \
   public:                                                                   \
    explicit Name(const std::string& message) : Error(#Name, message) {}     \
  };

CID_DEFINE_ERROR(ShapeError)
CID_DEFINE_ERROR(DimensionError)
CID_DEFINE_ERROR(ParserFailure)
CID_DEFINE_ERROR(CaptionerFailure)
CID_DEFINE_ERROR(TokenizationError)
CID_DEFINE_ERROR(SequenceTooLong)
CID_DEFINE_ERROR(IndexError)
CID_DEFINE_ERROR(ArityError)
CID_DEFINE_ERROR(TimestepError)
CID_DEFINE_ERROR(ConfigError)
CID_DEFINE_ERROR(EmptyMaskError)
CID_DEFINE_ERROR(DivergenceError)
CID_DEFINE_ERROR(FrozenViolation)
CID_DEFINE_ERROR(ManifestCorrupt)
CID_DEFINE_ERROR(MissingFile)
CID_DEFINE_ERROR(NoCommonRegions)
CID_DEFINE_ERROR(CheckpointMismatch)
CID_DEFINE_ERROR(AdapterUnavailable)
CID_DEFINE_ERROR(IoError)

#undef CID_DEFINE_ERROR

}  // namespace cid
