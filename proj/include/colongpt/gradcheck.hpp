#pragma once

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "colongpt/autograd.hpp"

namespace colongpt {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  /// Names of the tensors that were perturbed, in order.
  std::vector<std::string> checked;
  std::size_t entries = 0;
};

/// Builds the scalar loss on a fresh tape from bound parameters.
using LossBuilder = std::function<ag::Var(ag::ParamBinder&)>;

/// Compares reverse-mode gradients with central differences
/// (f(x+eps) - f(x-eps)) / (2 eps) for every entry of every tensor in
/// `trainable`. Error per entry is |a - n| / max(1e-12, |a| + |n|).
GradCheckReport grad_check(const LossBuilder& loss, const ag::ParamMap& params,
                           const std::set<std::string>& trainable, double eps);

}  // namespace colongpt
