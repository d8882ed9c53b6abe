// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace bflab {

// Every failure raised by the library derives from Error so callers (the CLI
// in particular) can map families of failures onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define BFLAB_DEFINE_ERROR(Name)            \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  }

BFLAB_DEFINE_ERROR(ShapeError);
BFLAB_DEFINE_ERROR(ContractError);
BFLAB_DEFINE_ERROR(IndexError);
BFLAB_DEFINE_ERROR(LocationError);
BFLAB_DEFINE_ERROR(BlockedError);
BFLAB_DEFINE_ERROR(FormatError);
BFLAB_DEFINE_ERROR(AnnotationError);
BFLAB_DEFINE_ERROR(CorpusError);
BFLAB_DEFINE_ERROR(ConfigError);
BFLAB_DEFINE_ERROR(TrainingError);
BFLAB_DEFINE_ERROR(AttackError);

#undef BFLAB_DEFINE_ERROR

}  // namespace bflab
