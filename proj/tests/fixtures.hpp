#pragma once

#include <cmath>
#include <vector>

#include "xduct/alignment.hpp"
#include "xduct/ops.hpp"
#include "xduct/tensor.hpp"

namespace xduct::testing {

// Two output steps, two source positions.
// α = [[0.6, 0.4], [0.3, 0.7]]; p(y_1|a=1) = 0.9, p(y_1|a=2) = 0.2,
// p(y_2|a=1) = 0.5, p(y_2|a=2) = 0.8. Then p(y|x) = 0.62 * 0.71 = 0.4402.
inline constexpr double kToyAlpha[4] = {0.6, 0.4, 0.3, 0.7};
inline constexpr double kToyEmission[4] = {0.9, 0.2, 0.5, 0.8};
inline constexpr double kToyLikelihood = 0.4402;

inline std::vector<double> toy_log(const double* p) {
  return {std::log(p[0]), std::log(p[1]), std::log(p[2]), std::log(p[3])};
}

// Differentiable version: α from alignment scores, each emission from a
// two-way softmax over (target, other).
struct ToyModel {
  Tensor scores;  // [1 x 2 x 2]
  Tensor logits;  // [1 x 2 x 2 x 2]

  ToyModel() {
    scores = Tensor::from_data({1, 2, 2}, toy_log(kToyAlpha), true);
    std::vector<double> l;
    for (double p : kToyEmission) {
      l.push_back(std::log(p));
      l.push_back(std::log(1 - p));
    }
    logits = Tensor::from_data({1, 2, 2, 2}, l, true);
  }

  AlignmentLattice lattice() const {
    Tensor log_alpha = alignment_log_distribution(scores);
    Tensor emission = gather_last(log_softmax_rows(logits), std::vector<int>{0, 0, 0, 0});
    return make_lattice(log_alpha, emission);
  }

  std::vector<Tensor> leaves() const { return {scores, logits}; }
};

}  // namespace xduct::testing
