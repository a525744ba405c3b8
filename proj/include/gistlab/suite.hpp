#pragma once

// Model-level finite-difference cases: losses evaluated through a small
// 64-bit transformer (2 layers, D = 16) with respect to every trainable
// parameter.

#include <vector>

#include "gistlab/gradcheck.hpp"

namespace gistlab {

std::vector<GradCheckCase> model_gradcheck_cases(unsigned seed, double h = 1e-4);

/// Every primitive case followed by every model case.
GradCheckReport run_full_gradcheck(unsigned seed, double threshold = 1e-4, double h = 1e-4);

}  // namespace gistlab
