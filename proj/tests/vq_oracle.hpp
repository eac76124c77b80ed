#pragma once

#include <vector>

#include "fmc/types.hpp"

namespace fmc::oracle {

// Plain double loops, strict-less comparison so the first minimum wins.
inline std::vector<Index> brute_force_nearest(const Matrix &Z, const Matrix &W) {
  std::vector<Index> out;
  for (Index n = 0; n < Z.rows(); ++n) {
    Index best = -1;
    double best_d = 0.0;
    for (Index k = 0; k < W.rows(); ++k) {
      double d = 0.0;
      for (Index c = 0; c < Z.cols(); ++c) {
        const double e = Z(n, c) - W(k, c);
        d += e * e;
      }
      if (best < 0 || d < best_d) {
        best = k;
        best_d = d;
      }
    }
    out.push_back(best);
  }
  return out;
}

} // namespace fmc::oracle
