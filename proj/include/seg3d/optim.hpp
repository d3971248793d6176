#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "seg3d/tensor.hpp"

namespace seg3d {

// Step-decay schedule. lr(t) is built by repeated multiplication so that
// lr(t + decay_every) == decay_factor * lr(t) holds exactly in doubles.
struct LrSchedule {
  double initial = 5e-4;
  double decay_factor = 0.984;
  int64_t decay_every = 100;

  double lr(int64_t step) const {
    double v = initial;
    for (int64_t k = step / decay_every; k > 0; --k) v *= decay_factor;
    return v;
  }
};

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  std::vector<T> m, v;  // Adam first/second moment, parameter-shaped
  int64_t steps = 0;

  void validate() const;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One update over all parameters from their accumulated gradients.
// `step` is the 0-based index of the iteration being applied; bias
// correction uses t = step + 1.
template <class T>
void adam_step(std::vector<Parameter<T>>& params, const LrSchedule& sched, int64_t step,
               const AdamConfig& cfg = {});

extern template struct Parameter<float>;
extern template struct Parameter<double>;
extern template void adam_step<float>(std::vector<Parameter<float>>&, const LrSchedule&, int64_t,
                                      const AdamConfig&);
extern template void adam_step<double>(std::vector<Parameter<double>>&, const LrSchedule&, int64_t,
                                       const AdamConfig&);

}  // namespace seg3d
