#pragma once

#include <functional>

#include "ac/errors.hpp"
#include "doctest.h"

// Asserts that fn throws ac::Error with the given kind.
inline void expect_error(ac::ErrorKind kind, const std::function<void()>& fn) {
  bool threw = false;
  try {
    fn();
  } catch (const ac::Error& e) {
    threw = true;
    CHECK(e.kind() == kind);
  }
  CHECK_MESSAGE(threw, "expected an error of kind ", ac::error_kind_name(kind));
}
