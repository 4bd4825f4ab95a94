#pragma once

#include <algorithm>
#include <functional>

#include "vswu/model.hpp"

namespace vswu {

/// Class activation map from a feature A [C,h,w] and dTarget/dA: ReLU of
/// the gradient-weighted channel sum, min-max normalized to [0,1]. A map
/// with no positive entry stays all zero; a constant positive map becomes
/// all ones.
template <class T>
Tensor<float> gradcam_map(const Tensor<T>& a, std::span<const T> grad) {
  if (a.rank() != 3) throw DimensionError("gradcam: expected [C,h,w] feature, got " + shape_str(a.shape()));
  if (grad.size() != a.numel()) throw DimensionError("gradcam: gradient size does not match the feature");
  const std::size_t c = a.dim(0), hw = a.dim(1) * a.dim(2);
  const auto av = a.values();
  std::vector<double> map(hw, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    double w = 0;
    for (std::size_t i = 0; i < hw; ++i) w += static_cast<double>(grad[k * hw + i]);
    w /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) map[i] += w * static_cast<double>(av[k * hw + i]);
  }
  for (auto& v : map) v = std::max(v, 0.0);
  const auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  const double mn = *lo, mx = *hi;
  std::vector<float> out(hw, 0.0f);
  if (mx > 0) {
    for (std::size_t i = 0; i < hw; ++i) {
      out[i] = mx > mn ? static_cast<float>((map[i] - mn) / (mx - mn)) : 1.0f;
    }
  }
  return Tensor<float>({a.dim(1), a.dim(2)}, std::move(out));
}

/// Grad-CAM of an arbitrary scalar function of a feature.
template <class T>
Tensor<float> gradcam_of(const Tensor<T>& feature, const std::function<Tensor<T>(const Tensor<T>&)>& target) {
  Tensor<T> a(feature.shape(), feature.values());
  a.set_requires_grad(true);
  target(a).backward();
  return gradcam_map(a, a.grad());
}

/// Scalar explained by the heatmap: mean logit of `channel` over pixels
/// predicted positive (logit >= 0, i.e. probability >= 0.5), or over the
/// whole map when none is.
template <class T>
Tensor<T> gradcam_target(const Tensor<T>& logits, std::size_t channel) {
  auto lc = slice0(logits, channel);
  std::vector<T> mask(lc.numel());
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = lc[i] >= T(0) ? T(1) : T(0);
    n += mask[i] != T(0);
  }
  if (n == 0) return mean(lc);
  return scale(sum(mul(lc, Tensor<T>(lc.shape(), std::move(mask)))), T(1) / static_cast<T>(n));
}

/// Heatmap [H/16, W/16] over the center frame's backbone deep feature, the
/// last layer before temporal blending. Parameter gradients are cleared
/// afterwards.
template <class T>
Tensor<float> gradcam(VideoSwinUNet<T>& model, const Tensor<T>& frames, std::size_t channel) {
  if (channel > 1) throw std::invalid_argument("gradcam: target channel must be 0 (bolus) or 1 (pharynx), got " +
                                               std::to_string(channel));
  // Gradients must reach the feature even if every parameter is frozen.
  Tensor<T> input(frames.shape(), frames.values());
  input.set_requires_grad(true);
  ForwardTrace<T> trace;
  auto out = model.forward(input, &trace);
  auto a = trace.deep.at((frames.dim(0) - 1) / 2);
  a.retain_grad();
  gradcam_target(out.logits, channel).backward();
  auto map = gradcam_map(a, a.grad());
  model.params().zero_grad();
  return map;
}

}  // namespace vswu
