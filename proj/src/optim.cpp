#include "seg3d/optim.hpp"

#include <cmath>

namespace seg3d {

template <class T>
void Parameter<T>::validate() const {
  if (name.empty()) throw RunError("parameter without a name");
  if (!tensor.defined()) throw RunError("parameter '" + name + "' has no tensor");
  const size_t n = size_t(tensor.numel());
  if (!m.empty() && m.size() != n) throw RunError("parameter '" + name + "' first-moment size mismatch");
  if (!v.empty() && v.size() != n) throw RunError("parameter '" + name + "' second-moment size mismatch");
  if (steps < 0) throw RunError("parameter '" + name + "' has negative step counter");
}

template <class T>
void adam_step(std::vector<Parameter<T>>& params, const LrSchedule& sched, int64_t step,
               const AdamConfig& cfg) {
  const double lr = sched.lr(step);
  const int64_t t = step + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
  for (auto& p : params) {
    const int64_t n = p.tensor.numel();
    if (p.m.empty()) p.m.assign(n, T(0));
    if (p.v.empty()) p.v.assign(n, T(0));
    p.validate();
    T* w = p.tensor.data();
    const std::vector<T>& grad = p.tensor.grad();
    for (int64_t i = 0; i < n; ++i) {
      const double g = double(grad[i]);
      const double m = cfg.beta1 * double(p.m[i]) + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * double(p.v[i]) + (1.0 - cfg.beta2) * g * g;
      p.m[i] = T(m);
      p.v[i] = T(v);
      const double mhat = double(p.m[i]) / bc1;
      const double vhat = double(p.v[i]) / bc2;
      w[i] = T(double(w[i]) - lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
    p.steps = t;
  }
}

template struct Parameter<float>;
template struct Parameter<double>;
template void adam_step<float>(std::vector<Parameter<float>>&, const LrSchedule&, int64_t,
                               const AdamConfig&);
template void adam_step<double>(std::vector<Parameter<double>>&, const LrSchedule&, int64_t,
                                const AdamConfig&);

}  // namespace seg3d
