#pragma once

// Central finite-difference gradient checking used across the test suites.

#include <functional>
#include <string>
#include <vector>

#include "dap/common.hpp"
#include "dap/rng.hpp"

namespace daptest {

using dap::Mat;
using dap::MatD;

struct FdReport {
  double max_rel_error = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::string where;
};

inline double rel_error(double a, double b) {
  return std::abs(a - b) / std::max(1.0, std::abs(a) + std::abs(b));
}

// `eval` recomputes the scalar from the current parameter values. `grad`
// recomputes all analytic gradients from scratch. Entries are probed either
// exhaustively (small tensors) or on a deterministic sample.
class FdChecker {
 public:
  explicit FdChecker(double h = 1e-6, int sample_cap = 32) : h_(h), cap_(sample_cap) {}

  FdReport check(std::vector<MatD*> params, const std::vector<std::string>& names,
                 const std::function<double()>& eval,
                 const std::function<std::vector<MatD>()>& grad) const {
    FdReport report;
    const std::vector<MatD> analytic = grad();
    dap::Rng pick(12345);
    for (std::size_t p = 0; p < params.size(); ++p) {
      MatD& m = *params[p];
      const Eigen::Index total = m.size();
      std::vector<Eigen::Index> idx;
      if (total <= cap_ * 4) {
        for (Eigen::Index i = 0; i < total; ++i) idx.push_back(i);
      } else {
        for (int i = 0; i < cap_; ++i)
          idx.push_back(static_cast<Eigen::Index>(pick.uniform_int(
              static_cast<std::uint64_t>(total))));
      }
      for (Eigen::Index flat : idx) {
        const Eigen::Index r = flat / m.cols();
        const Eigen::Index c = flat % m.cols();
        const double orig = m(r, c);
        m(r, c) = orig + h_;
        const double up = eval();
        m(r, c) = orig - h_;
        const double dn = eval();
        m(r, c) = orig;
        const double numeric = (up - dn) / (2.0 * h_);
        const double a = analytic[p](r, c);
        const double e = rel_error(a, numeric);
        if (e > report.max_rel_error) {
          report.max_rel_error = e;
          report.analytic_at_worst = a;
          report.numeric_at_worst = numeric;
          report.where = names[p] + "(" + std::to_string(r) + "," + std::to_string(c) + ")";
        }
      }
    }
    return report;
  }

 private:
  double h_;
  int cap_;
};

inline MatD random_mat(dap::Rng& rng, Eigen::Index rows, Eigen::Index cols, double scale = 1.0) {
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal() * scale;
  return m;
}

}  // namespace daptest
