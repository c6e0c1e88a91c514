#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

#include "helm/errors.hpp"
#include "helm/numerics/tensor.hpp"
#include "helm/random.hpp"

namespace helm {

struct AugmentationPolicy {
  double hflip_p = 0, vflip_p = 0;
  double blur_p = 0, blur_sigma_min = 0.1, blur_sigma_max = 1.0;
  double jitter_p = 0, brightness = 0.4, contrast = 0.4, saturation = 0.4;
  double affine_p = 0, max_degrees = 15, max_translate = 0.1, scale_min = 0.9, scale_max = 1.1;
  double crop_p = 0, crop_scale_min = 0.5, crop_scale_max = 1.0, crop_ratio_min = 3.0 / 4.0,
         crop_ratio_max = 4.0 / 3.0;
  double erase_p = 0, erase_scale_min = 0.02, erase_scale_max = 0.2;

  static AugmentationPolicy none() { return {}; }

  static AugmentationPolicy weak() {
    AugmentationPolicy p;
    p.hflip_p = 0.5;
    p.vflip_p = 0.5;
    p.blur_p = 0.5;
    return p;
  }

  static AugmentationPolicy strong() {
    auto p = weak();
    p.jitter_p = 0.8;
    p.affine_p = 0.5;
    p.crop_p = 1.0;
    p.erase_p = 0.25;
    return p;
  }

  void validate() const {
    for (double q : {hflip_p, vflip_p, blur_p, jitter_p, affine_p, crop_p, erase_p})
      if (!(q >= 0 && q <= 1)) throw ValidationError("augmentation probability outside [0, 1]");
    if (!(crop_scale_min > 0 && crop_scale_min <= crop_scale_max && crop_scale_max <= 1))
      throw ValidationError("degenerate crop scale range");
    if (!(crop_ratio_min > 0 && crop_ratio_min <= crop_ratio_max)) throw ValidationError("degenerate crop ratio range");
    if (!(erase_scale_min > 0 && erase_scale_min <= erase_scale_max && erase_scale_max < 1))
      throw ValidationError("degenerate erase scale range");
    if (!(blur_sigma_min > 0 && blur_sigma_min <= blur_sigma_max)) throw ValidationError("degenerate blur sigma range");
    if (!(scale_min > 0 && scale_min <= scale_max)) throw ValidationError("degenerate affine scale range");
    if (brightness < 0 || contrast < 0 || saturation < 0 || max_translate < 0 || max_degrees < 0)
      throw ValidationError("negative augmentation magnitude");
  }
};

namespace detail {

template <typename T>
struct ImageView {
  std::size_t c, h, w;

  static ImageView of(const Tensor<T>& img) {
    if (img.dim() != 3) throw ValidationError("image must be [C, H, W], got " + to_string(img.shape()));
    return {img.size(0), img.size(1), img.size(2)};
  }
};

/// Bilinear sample with zero padding outside the image.
template <typename T>
T bilinear(const Tensor<T>& img, std::size_t ch, std::size_t h, std::size_t w, double y, double x) {
  const double fy = std::floor(y), fx = std::floor(x);
  const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
  const double dy = y - fy, dx = x - fx;
  auto px = [&](long yy, long xx) -> double {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0.0;
    return static_cast<double>(img[(ch * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)]);
  };
  return static_cast<T>((1 - dy) * ((1 - dx) * px(y0, x0) + dx * px(y0, x0 + 1)) +
                        dy * ((1 - dx) * px(y0 + 1, x0) + dx * px(y0 + 1, x0 + 1)));
}

template <typename T>
void flip(Tensor<T>& img, bool horizontal) {
  const auto v = ImageView<T>::of(img);
  Tensor<T> out(img.shape());
  for (std::size_t c = 0; c < v.c; ++c)
    for (std::size_t y = 0; y < v.h; ++y)
      for (std::size_t x = 0; x < v.w; ++x) {
        const std::size_t sy = horizontal ? y : v.h - 1 - y, sx = horizontal ? v.w - 1 - x : x;
        out[(c * v.h + y) * v.w + x] = img[(c * v.h + sy) * v.w + sx];
      }
  img = std::move(out);
}

template <typename T>
void gaussian_blur(Tensor<T>& img, double sigma) {
  const auto v = ImageView<T>::of(img);
  const long r = std::max(1L, static_cast<long>(std::ceil(2 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double norm = 0;
  for (long i = -r; i <= r; ++i) norm += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& e : k) e /= norm;
  auto clampi = [](long i, std::size_t n) { return static_cast<std::size_t>(std::clamp(i, 0L, static_cast<long>(n) - 1)); };
  Tensor<T> tmp(img.shape());
  for (std::size_t c = 0; c < v.c; ++c)
    for (std::size_t y = 0; y < v.h; ++y)
      for (std::size_t x = 0; x < v.w; ++x) {
        double s = 0;
        for (long i = -r; i <= r; ++i)
          s += k[static_cast<std::size_t>(i + r)] * img[(c * v.h + y) * v.w + clampi(static_cast<long>(x) + i, v.w)];
        tmp[(c * v.h + y) * v.w + x] = static_cast<T>(s);
      }
  for (std::size_t c = 0; c < v.c; ++c)
    for (std::size_t y = 0; y < v.h; ++y)
      for (std::size_t x = 0; x < v.w; ++x) {
        double s = 0;
        for (long i = -r; i <= r; ++i)
          s += k[static_cast<std::size_t>(i + r)] * tmp[(c * v.h + clampi(static_cast<long>(y) + i, v.h)) * v.w + x];
        img[(c * v.h + y) * v.w + x] = static_cast<T>(s);
      }
}

template <typename T>
void color_jitter(Tensor<T>& img, const AugmentationPolicy& p, Rng& rng) {
  const auto v = ImageView<T>::of(img);
  const std::size_t plane = v.h * v.w;
  const double b = rng.uniform(1 - p.brightness, 1 + p.brightness);
  const double ct = rng.uniform(std::max(0.0, 1 - p.contrast), 1 + p.contrast);
  const double sat = rng.uniform(std::max(0.0, 1 - p.saturation), 1 + p.saturation);
  for (auto& e : img.storage()) e = static_cast<T>(e * b);
  double mean = 0;
  for (auto e : img.storage()) mean += e;
  mean /= static_cast<double>(img.numel());
  for (auto& e : img.storage()) e = static_cast<T>(mean + ct * (e - mean));
  if (v.c == 3) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double gray = 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i];
      for (std::size_t c = 0; c < 3; ++c) img[c * plane + i] = static_cast<T>(gray + sat * (img[c * plane + i] - gray));
    }
  }
}

template <typename T>
void affine(Tensor<T>& img, const AugmentationPolicy& p, Rng& rng) {
  const auto v = ImageView<T>::of(img);
  const double angle = rng.uniform(-p.max_degrees, p.max_degrees) * std::numbers::pi / 180.0;
  const double tx = rng.uniform(-p.max_translate, p.max_translate) * static_cast<double>(v.w);
  const double ty = rng.uniform(-p.max_translate, p.max_translate) * static_cast<double>(v.h);
  const double s = rng.uniform(p.scale_min, p.scale_max);
  const double cy = (static_cast<double>(v.h) - 1) / 2, cx = (static_cast<double>(v.w) - 1) / 2;
  const double ca = std::cos(angle), sa = std::sin(angle);
  Tensor<T> out(img.shape());
  for (std::size_t y = 0; y < v.h; ++y)
    for (std::size_t x = 0; x < v.w; ++x) {
      // inverse map: destination -> source
      const double dx = static_cast<double>(x) - cx - tx, dy = static_cast<double>(y) - cy - ty;
      const double sx = (ca * dx + sa * dy) / s + cx, sy = (-sa * dx + ca * dy) / s + cy;
      for (std::size_t c = 0; c < v.c; ++c) out[(c * v.h + y) * v.w + x] = bilinear(img, c, v.h, v.w, sy, sx);
    }
  img = std::move(out);
}

template <typename T>
void random_resized_crop(Tensor<T>& img, const AugmentationPolicy& p, Rng& rng) {
  const auto v = ImageView<T>::of(img);
  const double area = static_cast<double>(v.h * v.w);
  double ch = static_cast<double>(v.h), cw = static_cast<double>(v.w), y0 = 0, x0 = 0;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(p.crop_scale_min, p.crop_scale_max);
    const double ratio = std::exp(rng.uniform(std::log(p.crop_ratio_min), std::log(p.crop_ratio_max)));
    const double w = std::round(std::sqrt(target * ratio)), h = std::round(std::sqrt(target / ratio));
    if (w >= 1 && h >= 1 && w <= static_cast<double>(v.w) && h <= static_cast<double>(v.h)) {
      ch = h;
      cw = w;
      y0 = static_cast<double>(rng.below(static_cast<std::uint64_t>(static_cast<double>(v.h) - h) + 1));
      x0 = static_cast<double>(rng.below(static_cast<std::uint64_t>(static_cast<double>(v.w) - w) + 1));
      break;
    }
  }
  Tensor<T> out(img.shape());
  for (std::size_t y = 0; y < v.h; ++y)
    for (std::size_t x = 0; x < v.w; ++x) {
      // pixel-centre alignment between the crop box and the output grid
      const double sy = y0 + (static_cast<double>(y) + 0.5) * ch / static_cast<double>(v.h) - 0.5;
      const double sx = x0 + (static_cast<double>(x) + 0.5) * cw / static_cast<double>(v.w) - 0.5;
      const double cyc = std::clamp(sy, 0.0, static_cast<double>(v.h) - 1);
      const double cxc = std::clamp(sx, 0.0, static_cast<double>(v.w) - 1);
      for (std::size_t c = 0; c < v.c; ++c) out[(c * v.h + y) * v.w + x] = bilinear(img, c, v.h, v.w, cyc, cxc);
    }
  img = std::move(out);
}

template <typename T>
void random_erase(Tensor<T>& img, const AugmentationPolicy& p, Rng& rng) {
  const auto v = ImageView<T>::of(img);
  const double area = static_cast<double>(v.h * v.w);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(p.erase_scale_min, p.erase_scale_max);
    const double ratio = std::exp(rng.uniform(std::log(0.3), std::log(3.3)));
    const auto h = static_cast<std::size_t>(std::round(std::sqrt(target * ratio)));
    const auto w = static_cast<std::size_t>(std::round(std::sqrt(target / ratio)));
    if (h < 1 || w < 1 || h >= v.h || w >= v.w) continue;
    const std::size_t y0 = rng.below(v.h - h + 1), x0 = rng.below(v.w - w + 1);
    for (std::size_t c = 0; c < v.c; ++c)
      for (std::size_t y = y0; y < y0 + h; ++y)
        for (std::size_t x = x0; x < x0 + w; ++x) img[(c * v.h + y) * v.w + x] = static_cast<T>(rng.uniform());
    return;
  }
}

}  // namespace detail

/// Apply `policy` to one [C, H, W] image in [0, 1]. Output depends only on
/// (image, policy, seed) and keeps the input shape and value range.
template <typename T>
Tensor<T> augment(const Tensor<T>& image, const AugmentationPolicy& policy, std::uint64_t seed) {
  policy.validate();
  detail::ImageView<T>::of(image);
  Rng rng(seed);
  Tensor<T> img = image;
  if (rng.bernoulli(policy.crop_p)) detail::random_resized_crop(img, policy, rng);
  if (rng.bernoulli(policy.hflip_p)) detail::flip(img, true);
  if (rng.bernoulli(policy.vflip_p)) detail::flip(img, false);
  if (rng.bernoulli(policy.affine_p)) detail::affine(img, policy, rng);
  if (rng.bernoulli(policy.jitter_p)) detail::color_jitter(img, policy, rng);
  if (rng.bernoulli(policy.blur_p)) detail::gaussian_blur(img, rng.uniform(policy.blur_sigma_min, policy.blur_sigma_max));
  if (rng.bernoulli(policy.erase_p)) detail::random_erase(img, policy, rng);
  for (auto& e : img.storage()) e = std::clamp(e, T(0), T(1));
  return img;
}

}  // namespace helm
