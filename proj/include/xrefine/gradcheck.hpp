#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Finite-difference verification of every hand-written backward pass. All
// checks run in double precision against central differences; the relative
// error of a compared partial derivative is |a - n| / max(1e-5, |a| + |n|).
//
// The network is piecewise smooth (ReLU, loss clamp), so a difference
// interval occasionally straddles a kink where no derivative exists. Each
// probe therefore runs central differences at two step sizes: on a smooth
// stretch the estimates agree to O(h^2) and the probe counts; across a kink
// they disagree and the probe is recorded as skipped instead of compared.
// A wrong analytic gradient cannot hide behind this filter, since on smooth
// intervals both estimates converge to the true derivative.

namespace xrefine {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  long probes = 0;   // compared partial derivatives across all rounds
  long skipped = 0;  // probes rejected because the interval straddled a kink
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-4;
  double max_rel_error = 0;  // worst entry
  bool passed = false;
};

/// Runs `rounds` independently seeded configurations of every check:
/// primitive ops (conv, relu, tanh, softmax, attention, score head,
/// soft-argmax), the full refinement model in both modes (parameter and
/// patch-pixel gradients), the epipolar residuals, the per-match loss and
/// the batched epipolar training loss.
GradCheckReport run_gradchecks(uint64_t seed, int rounds = 50, double tolerance = 1e-4);

}  // namespace xrefine
