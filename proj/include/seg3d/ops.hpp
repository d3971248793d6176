#pragma once

#include <array>

#include "seg3d/tensor.hpp"

namespace seg3d {

// All spatial tensors are (N, C, X, Y, Z) with x fastest in memory.
using Stride3 = std::array<int64_t, 3>;

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 const Stride3& stride, const Stride3& padding);
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const Stride3& stride, const Stride3& padding);

// Transposed conv restricted to kernel == stride: every output voxel has
// exactly one contributing input voxel.
template <class T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& w, const Stride3& stride);

template <class T>
Tensor<T> instance_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& offset,
                        double eps = 1e-5);

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope = 0.01);

template <class T>
Tensor<T> softmax_channels(const Tensor<T>& x);

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> scale(const Tensor<T>& x, double s);

template <class T>
Tensor<T> sum_all(const Tensor<T>& x);

template <class T>
Tensor<T> mean_all(const Tensor<T>& x);

// Dice-overlap loss over classes with unit class weights:
//   1 - (2 * sum_c I_c + eps) / (sum_c U_c + eps)
// where I_c / U_c are the per-class intersection and mass sums over all
// voxels. Class partial sums are combined in ascending value order so the
// result is invariant under channel permutations.
template <class T>
Tensor<T> generalized_dice_loss(const Tensor<T>& probs, const Tensor<T>& reference, double eps = 1e-5);

#define SEG3D_EXTERN_OPS(T)                                                                        \
  extern template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                      const Stride3&, const Stride3&);                             \
  extern template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Stride3&,          \
                                      const Stride3&);                                             \
  extern template Tensor<T> conv_transpose3d<T>(const Tensor<T>&, const Tensor<T>&, const Stride3&); \
  extern template Tensor<T> instance_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                             double);                                              \
  extern template Tensor<T> leaky_relu<T>(const Tensor<T>&, double);                               \
  extern template Tensor<T> softmax_channels<T>(const Tensor<T>&);                                 \
  extern template Tensor<T> concat_channels<T>(const Tensor<T>&, const Tensor<T>&);                \
  extern template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                            \
  extern template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                            \
  extern template Tensor<T> scale<T>(const Tensor<T>&, double);                                    \
  extern template Tensor<T> sum_all<T>(const Tensor<T>&);                                          \
  extern template Tensor<T> mean_all<T>(const Tensor<T>&);                                         \
  extern template Tensor<T> generalized_dice_loss<T>(const Tensor<T>&, const Tensor<T>&, double);

SEG3D_EXTERN_OPS(float)
SEG3D_EXTERN_OPS(double)
#undef SEG3D_EXTERN_OPS

}  // namespace seg3d
