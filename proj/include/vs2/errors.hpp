#pragma once

#include <stdexcept>
#include <string>

namespace vs2 {

// Every domain failure derives from Error so callers (and the CLI) can catch
// one type and map it to an exit status.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define VS2_DEFINE_ERROR(Name)          \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  }

VS2_DEFINE_ERROR(FormatError);
VS2_DEFINE_ERROR(TruncationError);
VS2_DEFINE_ERROR(DataError);
VS2_DEFINE_ERROR(IoError);
VS2_DEFINE_ERROR(ShapeError);
VS2_DEFINE_ERROR(ConfigError);
VS2_DEFINE_ERROR(DegenerateBatchError);
VS2_DEFINE_ERROR(NumericsError);
VS2_DEFINE_ERROR(DegenerateInputError);
VS2_DEFINE_ERROR(CancellationError);
VS2_DEFINE_ERROR(CoverageError);
VS2_DEFINE_ERROR(KeyError);
VS2_DEFINE_ERROR(EmptyGroupsError);
VS2_DEFINE_ERROR(DegenerateWeightsError);
VS2_DEFINE_ERROR(DeadFeatureError);

#undef VS2_DEFINE_ERROR

}  // namespace vs2
