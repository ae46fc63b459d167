#include "colongpt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "colongpt/error.hpp"

namespace colongpt {

GradCheckReport grad_check(const LossBuilder& loss, const ag::ParamMap& params,
                           const std::set<std::string>& trainable, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) throw UsageError("grad_check: eps must lie in [1e-6, 1e-3]");
  ag::ParamMap analytic;
  {
    ag::Tape tape;
    ag::ParamBinder bind(tape, params, &trainable);
    const ag::Var out = loss(bind);
    tape.backward(out);
    analytic = bind.gradients();
  }
  const std::set<std::string> none;
  auto evaluate = [&](const ag::ParamMap& p) {
    ag::Tape tape;
    ag::ParamBinder bind(tape, p, &none);
    return loss(bind).value()[0];
  };

  GradCheckReport report;
  ag::ParamMap probe = params;
  for (const std::string& name : trainable) {
    auto it = analytic.find(name);
    if (it == analytic.end()) continue;  // not reached by the loss
    const Tensor& g = it->second;
    if (!g.all_finite()) throw NumericError("grad_check: non-finite analytic gradient for '" + name + "'");
    report.checked.push_back(name);
    Tensor& x = probe.at(name);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double orig = x[i];
      x[i] = orig + eps;
      const double fp = evaluate(probe);
      x[i] = orig - eps;
      const double fm = evaluate(probe);
      x[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      if (!std::isfinite(numeric)) throw NumericError("grad_check: non-finite numeric gradient for '" + name + "'");
      const double err = std::abs(g[i] - numeric) / std::max(1e-12, std::abs(g[i]) + std::abs(numeric));
      ++report.entries;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = name;
        report.worst_index = i;
      }
    }
  }
  return report;
}

}  // namespace colongpt
