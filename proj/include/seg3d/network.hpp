#pragma once

#include <string>
#include <vector>

#include "seg3d/ops.hpp"
#include "seg3d/optim.hpp"
#include "seg3d/plan.hpp"

namespace seg3d {

struct NetworkOptions {
  // Swap instance normalization for identity, leaving the layer graph and
  // parameter registry unchanged. Used to probe the geometric footprint of
  // the architecture, which per-channel statistics would otherwise blur.
  bool identity_norm = false;
};

// Encoder-decoder built from a task plan: stem conv, residual blocks per
// level, strided transition convs down, matching transposed convs up with
// skip concatenation, and one segmentation head per supervised scale.
template <class T>
class Network {
 public:
  Network(const TaskPlan& plan, uint64_t init_seed, NetworkOptions opts = {});

  // Input (1 or N, 1, X, Y, Z) with each spatial extent divisible by the
  // level count's stride product on that axis. Returns per-head logits,
  // head h at 1/2^min(h, depth) resolution, finest first.
  std::vector<Tensor<T>> forward(const Tensor<T>& x) const;

  // Stem plus downsampling path only; returns the coarsest-level features.
  Tensor<T> encode(const Tensor<T>& x) const;

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  Parameter<T>* find(const std::string& name);
  const TaskPlan& plan() const { return plan_; }
  const NetworkOptions& options() const { return opts_; }
  void set_requires_grad(bool b);
  void zero_grads();

 private:
  struct ConvRef {
    int w = -1, b = -1;
  };
  struct NormRef {
    int gain = -1, offset = -1;
  };
  struct BlockRef {
    ConvRef c1, c2, proj;
    NormRef n1, n2;
    bool has_proj = false;
  };

  Tensor<T> apply_norm(const NormRef& n, const Tensor<T>& t) const;
  Tensor<T> run_block(const BlockRef& b, const Tensor<T>& in) const;
  std::vector<Tensor<T>> encoder_levels(const Tensor<T>& x) const;

  TaskPlan plan_;
  NetworkOptions opts_;
  std::vector<Parameter<T>> params_;
  ConvRef stem_;
  NormRef stem_norm_;
  std::vector<BlockRef> enc_, dec_;
  std::vector<ConvRef> trans_, up_, heads_;
};

// Deep-supervision objective for a single sample: softmax + Dice-overlap
// loss per head against nearest-downsampled labels, averaged over heads.
template <class T>
Tensor<T> supervised_loss(const std::vector<Tensor<T>>& head_logits,
                          const std::vector<uint8_t>& labels, const Index3& patch_dims,
                          const TaskPlan& plan);

extern template class Network<float>;
extern template class Network<double>;
extern template Tensor<float> supervised_loss<float>(const std::vector<Tensor<float>>&,
                                                     const std::vector<uint8_t>&, const Index3&,
                                                     const TaskPlan&);
extern template Tensor<double> supervised_loss<double>(const std::vector<Tensor<double>>&,
                                                       const std::vector<uint8_t>&, const Index3&,
                                                       const TaskPlan&);

}  // namespace seg3d
