#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gistlab/tensor.hpp"

namespace gistlab {

/// Builds a scalar loss on a fresh tape. It is called repeatedly while the
/// checked tensor is perturbed in place.
using LossFn = std::function<Tensor<double>(Tape<double>&)>;

inline constexpr double kGradCheckFloor = 1e-6;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Fourth-order central differences
///   (-f(x + 2h e_i) + 8 f(x + h e_i) - 8 f(x - h e_i) + f(x - 2h e_i)) / 12h
/// against the tape gradient for every coordinate of `x`. Relative error uses the
/// denominator max(|analytic|, |numeric|, kGradCheckFloor); the floor keeps
/// round-off on structurally zero gradients (an attention key bias, for one)
/// from reading as a large relative error. `x` must be a leaf that requires
/// a gradient; its values are restored afterwards.
GradCheckResult finite_diff_check(const LossFn& f, Tensor<double>& x, double h = 1e-4);

/// Checks every tensor in `xs` and reports the largest error seen.
GradCheckResult finite_diff_check(const LossFn& f, std::vector<Tensor<double>>& xs, double h = 1e-4);

struct GradCheckCase {
  std::string name;
  /// Returns the max relative error of the case.
  std::function<double()> run;
};

struct GradCheckReport {
  struct Entry {
    std::string name;
    double max_rel_error;
    bool passed;
  };
  std::vector<Entry> entries;
  double threshold = 0.0;
  bool passed() const;
  std::string to_string() const;
};

GradCheckReport run_gradcheck(const std::vector<GradCheckCase>& cases, double threshold);

/// One case per differentiable primitive in ops.hpp. `seed` varies the
/// random inputs.
std::vector<GradCheckCase> primitive_gradcheck_cases(unsigned seed = 0, double h = 1e-4);

}  // namespace gistlab
