#pragma once

#include "doctest.h"
#include "radicalign/common.hpp"

// Passes when `expr` throws radicalign::Error of the given kind.
#define CHECK_THROWS_KIND(expr, expected_kind)                 \
  do {                                                         \
    bool thrown_ = false;                                      \
    try {                                                      \
      (void)(expr);                                            \
    } catch (const radicalign::Error& e_) {                    \
      thrown_ = true;                                          \
      CHECK_MESSAGE(e_.kind() == (expected_kind), e_.what()); \
    }                                                          \
    CHECK_MESSAGE(thrown_, "expected " #expected_kind);        \
  } while (0)
