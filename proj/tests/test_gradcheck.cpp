#include <chrono>

#include "doctest.h"
#include "htr/gradcheck.hpp"

using namespace htr;

TEST_CASE("finite-difference suite passes for every op and the micro encoder-decoder") {
  const auto start = std::chrono::steady_clock::now();
  const auto results = run_gradcheck_suite(2024, 10, 1e-4);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  CHECK(results.size() >= 24);
  for (const auto& r : results) {
    INFO(r.name << " max relative error " << r.max_error);
    CHECK(r.passed);
    if (r.name == "micro_encoder_decoder") CHECK(r.max_error < 1e-5);
  }
  CHECK(seconds < 60.0);
}
