#include "seg3d/network.hpp"

#include <cmath>

namespace seg3d {

namespace {

template <class T>
int add_param(std::vector<Parameter<T>>& params, uint64_t init_seed, std::string name, Shape shape,
              int64_t he_fan_in /* 0: zeros, -1: ones */) {
  const int index = int(params.size());
  Parameter<T> p;
  p.name = std::move(name);
  if (he_fan_in > 0) {
    Tensor<T> t = Tensor<T>::zeros(shape, true);
    Rng r(seed_combine(init_seed, uint64_t(index)));
    const double stddev = std::sqrt(2.0 / double(he_fan_in));
    for (auto& v : t.value()) v = T(r.normal() * stddev);
    p.tensor = std::move(t);
  } else if (he_fan_in == -1) {
    Tensor<T> t = Tensor<T>::full(std::move(shape), T(1));
    t.set_requires_grad(true);
    p.tensor = std::move(t);
  } else {
    p.tensor = Tensor<T>::zeros(std::move(shape), true);
  }
  params.push_back(std::move(p));
  return index;
}

}  // namespace

template <class T>
Network<T>::Network(const TaskPlan& plan, uint64_t init_seed, NetworkOptions opts)
    : plan_(plan), opts_(opts) {
  plan_.validate();
  const int64_t L = plan_.levels;
  const auto& cw = plan_.channel_widths;
  const int64_t classes = plan_.class_count;

  const auto weight = [&](std::string name, Shape shape, int64_t fan_in) {
    return add_param(params_, init_seed, std::move(name), std::move(shape), fan_in);
  };
  const auto zeros = [&](std::string name, Shape shape) {
    return add_param(params_, init_seed, std::move(name), std::move(shape), 0);
  };
  const auto ones = [&](std::string name, Shape shape) {
    return add_param(params_, init_seed, std::move(name), std::move(shape), -1);
  };
  const auto norm_ref = [&](const std::string& base, int64_t c) {
    NormRef n;
    n.gain = ones(base + ".gain", {c});
    n.offset = zeros(base + ".offset", {c});
    return n;
  };
  const auto block_ref = [&](const std::string& base, int64_t cin, int64_t cout) {
    BlockRef b;
    b.c1.w = weight(base + ".conv1.weight", {cout, cin, 3, 3, 3}, cin * 27);
    b.n1 = norm_ref(base + ".norm1", cout);
    b.c2.w = weight(base + ".conv2.weight", {cout, cout, 3, 3, 3}, cout * 27);
    b.n2 = norm_ref(base + ".norm2", cout);
    if (cin != cout) {
      b.has_proj = true;
      b.proj.w = weight(base + ".proj.weight", {cout, cin, 1, 1, 1}, cin);
    }
    return b;
  };

  stem_.w = weight("stem.conv.weight", {cw[0], 1, 3, 3, 3}, 27);
  stem_norm_ = norm_ref("stem.norm", cw[0]);

  enc_.resize(L);
  trans_.resize(L - 1);
  for (int64_t l = 0; l < L; ++l) {
    enc_[l] = block_ref("enc" + std::to_string(l), cw[l], cw[l]);
    if (l + 1 < L) {
      const Transition& tr = plan_.transitions[l];
      trans_[l].w = weight("trans" + std::to_string(l) + ".weight",
                           {cw[l + 1], cw[l], tr[0].kernel, tr[1].kernel, tr[2].kernel},
                           cw[l] * tr[0].kernel * tr[1].kernel * tr[2].kernel);
      trans_[l].b = zeros("trans" + std::to_string(l) + ".bias", {cw[l + 1]});
    }
  }
  up_.resize(L - 1);
  dec_.resize(L - 1);
  for (int64_t l = L - 2; l >= 0; --l) {
    const Transition& tr = plan_.transitions[l];
    up_[l].w = weight("up" + std::to_string(l) + ".weight",
                      {cw[l + 1], cw[l], tr[0].stride, tr[1].stride, tr[2].stride},
                      cw[l + 1] * tr[0].stride * tr[1].stride * tr[2].stride);
    dec_[l] = block_ref("dec" + std::to_string(l), 2 * cw[l], cw[l]);
  }
  heads_.resize(plan_.head_count);
  for (int64_t h = 0; h < plan_.head_count; ++h) {
    heads_[h].w = weight("head" + std::to_string(h) + ".weight", {classes, cw[h], 1, 1, 1}, cw[h]);
    heads_[h].b = zeros("head" + std::to_string(h) + ".bias", {classes});
  }
}

template <class T>
Tensor<T> Network<T>::apply_norm(const NormRef& n, const Tensor<T>& t) const {
  if (opts_.identity_norm) return t;
  return instance_norm(t, params_[n.gain].tensor, params_[n.offset].tensor);
}

template <class T>
Tensor<T> Network<T>::run_block(const BlockRef& b, const Tensor<T>& in) const {
  const Stride3 one{1, 1, 1}, pad1{1, 1, 1}, pad0{0, 0, 0};
  Tensor<T> h = conv3d(in, params_[b.c1.w].tensor, one, pad1);
  h = leaky_relu(apply_norm(b.n1, h));
  h = conv3d(h, params_[b.c2.w].tensor, one, pad1);
  h = apply_norm(b.n2, h);
  Tensor<T> shortcut = b.has_proj ? conv3d(in, params_[b.proj.w].tensor, one, pad0) : in;
  return leaky_relu(add(h, shortcut));
}

template <class T>
std::vector<Tensor<T>> Network<T>::encoder_levels(const Tensor<T>& x) const {
  if (x.shape().size() != 5 || x.shape()[1] != 1)
    throw RunError("network input must be (N,1,X,Y,Z), got " + shape_str(x.shape()));
  for (int a = 0; a < 3; ++a) {
    const int64_t mult = int64_t(1) << plan_.depths[a];
    if (x.shape()[2 + a] % mult != 0)
      throw RunError("input extent on axis " + std::to_string(a) + " must be a multiple of " +
                     std::to_string(mult) + ", got " + std::to_string(x.shape()[2 + a]));
  }
  const Stride3 one{1, 1, 1}, pad1{1, 1, 1};
  const int64_t L = plan_.levels;
  Tensor<T> t = conv3d(x, params_[stem_.w].tensor, one, pad1);
  t = leaky_relu(apply_norm(stem_norm_, t));
  std::vector<Tensor<T>> skip(L);
  for (int64_t l = 0; l < L; ++l) {
    t = run_block(enc_[l], t);
    skip[l] = t;
    if (l + 1 < L) {
      const Transition& tr = plan_.transitions[l];
      const Stride3 stride{tr[0].stride, tr[1].stride, tr[2].stride};
      const Stride3 pad{(tr[0].kernel - 1) / 2, (tr[1].kernel - 1) / 2, (tr[2].kernel - 1) / 2};
      t = conv3d(t, params_[trans_[l].w].tensor, params_[trans_[l].b].tensor, stride, pad);
    }
  }
  return skip;
}

template <class T>
Tensor<T> Network<T>::encode(const Tensor<T>& x) const {
  return encoder_levels(x).back();
}

template <class T>
std::vector<Tensor<T>> Network<T>::forward(const Tensor<T>& x) const {
  const Stride3 one{1, 1, 1}, pad0{0, 0, 0};
  const int64_t L = plan_.levels;
  std::vector<Tensor<T>> skip = encoder_levels(x);
  std::vector<Tensor<T>> decoded(L);
  decoded[L - 1] = skip[L - 1];
  for (int64_t l = L - 2; l >= 0; --l) {
    const Transition& tr = plan_.transitions[l];
    const Stride3 stride{tr[0].stride, tr[1].stride, tr[2].stride};
    Tensor<T> u = conv_transpose3d(decoded[l + 1], params_[up_[l].w].tensor, stride);
    decoded[l] = run_block(dec_[l], concat_channels(u, skip[l]));
  }
  std::vector<Tensor<T>> logits(heads_.size());
  for (size_t h = 0; h < heads_.size(); ++h)
    logits[h] = conv3d(decoded[h], params_[heads_[h].w].tensor, params_[heads_[h].b].tensor, one, pad0);
  return logits;
}

template <class T>
Parameter<T>* Network<T>::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

template <class T>
void Network<T>::set_requires_grad(bool b) {
  for (auto& p : params_) p.tensor.set_requires_grad(b);
}

template <class T>
void Network<T>::zero_grads() {
  for (auto& p : params_) {
    p.tensor.grad();  // ensure allocated
    p.tensor.zero_grad();
  }
}

template <class T>
Tensor<T> supervised_loss(const std::vector<Tensor<T>>& head_logits,
                          const std::vector<uint8_t>& labels, const Index3& patch_dims,
                          const TaskPlan& plan) {
  if (head_logits.empty()) throw RunError("supervised_loss needs at least one head");
  const int64_t C = plan.class_count;
  Tensor<T> total;
  for (size_t h = 0; h < head_logits.size(); ++h) {
    const Tensor<T>& logit = head_logits[h];
    if (logit.shape()[0] != 1) throw RunError("supervised_loss expects single-sample heads");
    Index3 hd{};
    std::array<int64_t, 3> factor{};
    for (int a = 0; a < 3; ++a) {
      factor[a] = int64_t(1) << std::min<int64_t>(int64_t(h), plan.depths[a]);
      hd[a] = patch_dims[a] / factor[a];
      if (hd[a] * factor[a] != patch_dims[a])
        throw RunError("patch extent not divisible by head " + std::to_string(h) + " factor");
      if (logit.shape()[2 + a] != hd[a])
        throw RunError("head " + std::to_string(h) + " logits have shape " + shape_str(logit.shape()) +
                       ", expected extent " + std::to_string(hd[a]) + " on axis " + std::to_string(a));
    }
    Tensor<T> onehot = Tensor<T>::zeros({1, C, hd[0], hd[1], hd[2]});
    T* ov = onehot.data();
    const int64_t S = hd[0] * hd[1] * hd[2];
    for (int64_t z = 0; z < hd[2]; ++z) {
      // nearest-neighbour pick at the voxel-centre preimage
      const int64_t sz2 = std::clamp(round_half_up((double(z) + 0.5) * double(factor[2]) - 0.5),
                                     int64_t(0), patch_dims[2] - 1);
      for (int64_t y = 0; y < hd[1]; ++y) {
        const int64_t sy2 = std::clamp(round_half_up((double(y) + 0.5) * double(factor[1]) - 0.5),
                                       int64_t(0), patch_dims[1] - 1);
        for (int64_t x = 0; x < hd[0]; ++x) {
          const int64_t sx2 = std::clamp(round_half_up((double(x) + 0.5) * double(factor[0]) - 0.5),
                                         int64_t(0), patch_dims[0] - 1);
          const uint8_t lab = labels[(sz2 * patch_dims[1] + sy2) * patch_dims[0] + sx2];
          if (lab >= C)
            throw DataError("label value " + std::to_string(int(lab)) + " outside [0, " +
                            std::to_string(C) + ")");
          ov[int64_t(lab) * S + (z * hd[1] + y) * hd[0] + x] = T(1);
        }
      }
    }
    Tensor<T> loss = generalized_dice_loss(softmax_channels(logit), onehot);
    total = h == 0 ? loss : add(total, loss);
  }
  return scale(total, 1.0 / double(head_logits.size()));
}

template class Network<float>;
template class Network<double>;
template Tensor<float> supervised_loss<float>(const std::vector<Tensor<float>>&,
                                              const std::vector<uint8_t>&, const Index3&,
                                              const TaskPlan&);
template Tensor<double> supervised_loss<double>(const std::vector<Tensor<double>>&,
                                                const std::vector<uint8_t>&, const Index3&,
                                                const TaskPlan&);

}  // namespace seg3d
