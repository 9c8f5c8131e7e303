#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "hstmixer/tensor.hpp"

namespace hstmixer {

struct GradcheckReport {
  struct Entry {
    std::string name;
    double max_rel_err = 0.0;
  };
  std::vector<Entry> entries;
  double max_rel_err = 0.0;

  bool passed(double tol) const { return max_rel_err < tol; }
};

// Central-difference check of a scalar-valued function against the tape
// gradients. Runs at 64-bit only; relative error per element is
// |analytic - numeric| / max(1, |numeric|).
inline GradcheckReport gradcheck(
    const std::function<Tensor<double>()>& f,
    const std::vector<std::pair<std::string, Tensor<double>>>& leaves,
    double eps = 1e-5) {
  std::vector<std::vector<double>> analytic;
  {
    for (auto& [name, leaf] : leaves) leaf.clear_grad();
    Tape<double> tape;
    Tensor<double> loss = f();
    if (loss.size() != 1)
      throw NumericError("gradcheck: function output has shape " +
                         shape_str(loss.shape()) + ", expected a scalar");
    tape.backward(loss);
    for (auto& [name, leaf] : leaves)
      analytic.push_back(leaf.has_grad() ? leaf.grad_vec()
                                         : std::vector<double>(leaf.size(), 0.0));
  }
  GradcheckReport report;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    const auto& name = leaves[li].first;
    Tensor<double> leaf = leaves[li].second;
    GradcheckReport::Entry entry{name, 0.0};
    for (Index i = 0; i < leaf.size(); ++i) {
      const double saved = leaf.data()[i];
      leaf.data()[i] = saved + eps;
      const double up = f().value();
      leaf.data()[i] = saved - eps;
      const double down = f().value();
      leaf.data()[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double rel = std::fabs(analytic[li][i] - numeric) /
                         std::max(1.0, std::fabs(numeric));
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
    }
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace hstmixer
