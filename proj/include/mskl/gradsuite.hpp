#pragma once

// Randomized finite-difference suite over every differentiable op and over
// full backbone losses.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mskl/autodiff.hpp"

namespace mskl::gradsuite {

struct SuiteConfig {
  std::size_t n_configs = 50;
  std::size_t max_length = 12;
  std::uint64_t seed = 0;
  ad::GradCheckOptions check;
  // Coordinates sampled per parameter for configurations that use the
  // full-size backbone (embedding width 512).
  std::size_t sampled_coords = 12;
};

struct CaseResult {
  std::size_t config = 0;
  std::string name;
  ad::GradCheckReport report;
};

struct SuiteReport {
  std::vector<CaseResult> cases;
  std::size_t configs = 0;
  std::size_t coords_checked = 0;
  std::size_t coords_nonsmooth = 0;
  double max_rel_error = 0.0;
  std::string worst_case;
  bool passed = true;
};

// Op names covered by the op-level cases.
const std::vector<std::string>& covered_ops();

SuiteReport run_suite(const SuiteConfig& config);

}  // namespace mskl::gradsuite
