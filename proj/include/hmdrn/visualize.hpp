#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "hmdrn/data.hpp"
#include "hmdrn/model.hpp"

namespace hmdrn {

namespace detail {

// Piecewise-linear blue -> cyan -> yellow -> red map over [0,1].
inline void colormap(float t, float rgb[3]) {
  t = std::clamp(t, 0.0f, 1.0f);
  if (t < 1.0f / 3) {
    const float u = t * 3;
    rgb[0] = 0;
    rgb[1] = u;
    rgb[2] = 1;
  } else if (t < 2.0f / 3) {
    const float u = (t - 1.0f / 3) * 3;
    rgb[0] = u;
    rgb[1] = 1;
    rgb[2] = 1 - u;
  } else {
    const float u = (t - 2.0f / 3) * 3;
    rgb[0] = 1;
    rgb[1] = 1 - u;
    rgb[2] = 0;
  }
}

}  // namespace detail

// Per-cell channel L2 energy of a [C,h,w] map, min-max normalized to [0,1].
// A constant-energy map normalizes to a uniform 0.5 grid.
template <typename T>
std::vector<float> activation_energy(const Tensor<T>& map) {
  if (map.rank() != 3) throw ShapeError("activation_energy: expected [C,h,w]");
  const std::size_t c = map.dim(0), cells = map.dim(1) * map.dim(2);
  std::vector<float> energy(cells, 0.0f);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < cells; ++p) {
      const float v = float(map.data()[ch * cells + p]);
      energy[p] += v * v;
    }
  for (auto& e : energy) e = std::sqrt(e);
  const auto [lo_it, hi_it] = std::minmax_element(energy.begin(), energy.end());
  const float lo = *lo_it, hi = *hi_it;
  if (hi - lo < 1e-12f) {
    std::fill(energy.begin(), energy.end(), 0.5f);
  } else {
    for (auto& e : energy) e = (e - lo) / (hi - lo);
  }
  return energy;
}

// Bilinearly upsampled, color-mapped energy grid alpha-blended over the input.
inline Image render_heatmap(const Image& base, const std::vector<float>& energy,
                            std::size_t grid_h, std::size_t grid_w,
                            float alpha = 0.5f) {
  FloatImage grid;
  grid.width = grid_w;
  grid.height = grid_h;
  grid.rgb.resize(grid_w * grid_h * 3);
  for (std::size_t i = 0; i < grid_h * grid_w; ++i)
    for (std::size_t c = 0; c < 3; ++c) grid.rgb[i * 3 + c] = energy[i];
  FloatImage up = bilinear_resize(grid, base.width, base.height);

  Image out;
  out.width = base.width;
  out.height = base.height;
  out.rgb.resize(base.rgb.size());
  for (std::size_t i = 0; i < base.width * base.height; ++i) {
    float rgb[3];
    detail::colormap(up.rgb[i * 3], rgb);
    for (std::size_t c = 0; c < 3; ++c) {
      const float blended = alpha * rgb[c] +
                            (1 - alpha) * float(base.rgb[i * 3 + c]) / 255.0f;
      out.rgb[i * 3 + c] = std::uint8_t(std::lround(
          std::clamp(blended, 0.0f, 1.0f) * 255.0f));
    }
  }
  return out;
}

// 0/1 grid rendered at cell_px pixels per cell (white kept, black dropped).
template <typename T>
Image render_mask_grid(const std::vector<T>& mask, std::size_t grid_h,
                       std::size_t grid_w, std::size_t cell_px = 8) {
  if (mask.size() != grid_h * grid_w)
    throw ShapeError("render_mask_grid: mask size does not match grid");
  Image img;
  img.width = grid_w * cell_px;
  img.height = grid_h * cell_px;
  img.rgb.assign(img.width * img.height * 3, 0);
  for (std::size_t gy = 0; gy < grid_h; ++gy)
    for (std::size_t gx = 0; gx < grid_w; ++gx) {
      const std::uint8_t v = mask[gy * grid_w + gx] != T(0) ? 255 : 0;
      for (std::size_t y = gy * cell_px; y < (gy + 1) * cell_px; ++y)
        for (std::size_t x = gx * cell_px; x < (gx + 1) * cell_px; ++x)
          for (std::size_t c = 0; c < 3; ++c) img.at(x, y, c) = v;
    }
  return img;
}

template <typename T>
struct VisualizeResult {
  Image heat_high, heat_mid;
  // (file tag, grid image) per level/layer/head, empty without MTFEM
  std::vector<std::pair<std::string, Image>> masks;
};

// Eval-mode feature heatmaps for one image plus the MTFEM binary masks that a
// query image would receive.
template <typename T>
VisualizeResult<T> visualize_image(Model<T>& model, const Image& raw,
                                   const ChannelStats& stats,
                                   std::size_t image_size) {
  auto tensor = preprocess_eval<T>(raw, image_size, stats);
  Tensor<T> batch(Shape{1, 3, image_size, image_size});
  std::copy(tensor.values().begin(), tensor.values().end(), batch.data());
  auto fl = model.backbone_forward(batch, false, nullptr);

  // the blend target is the preprocessed crop the network actually saw
  FloatImage shown;
  shown.width = shown.height = image_size;
  shown.rgb.resize(image_size * image_size * 3);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < image_size * image_size; ++p)
      shown.rgb[p * 3 + c] = std::clamp(
          float(tensor.data()[c * image_size * image_size + p] *
                    T(stats.stddev[c]) +
                T(stats.mean[c])),
          0.0f, 1.0f);
  const Image base = shown.quantize();

  VisualizeResult<T> out;
  auto high = select_batch(fl.f_high, 0);
  auto mid = select_batch(fl.f_mid, 0);
  out.heat_high = render_heatmap(base, activation_energy(high), high.dim(1),
                                 high.dim(2));
  out.heat_mid =
      render_heatmap(base, activation_energy(mid), mid.dim(1), mid.dim(2));

  auto collect_masks = [&](const Mtfem<T>& mtfem, const Tensor<T>& map,
                           const char* level) {
    MaskTrace<T> trace;
    (void)mtfem.forward(flatten_to_sequence(map), true, &trace);
    for (std::size_t l = 0; l < trace.masks.size(); ++l)
      for (std::size_t h = 0; h < trace.masks[l].size(); ++h) {
        const std::string tag = std::string("mask_") + level + "_layer" +
                                std::to_string(l) + "_head" +
                                std::to_string(h);
        out.masks.emplace_back(
            tag, render_mask_grid(trace.masks[l][h], map.dim(1), map.dim(2)));
      }
  };
  if (model.mtfem1) collect_masks(*model.mtfem1, high, "l1");
  if (model.mtfem2) collect_masks(*model.mtfem2, mid, "l2");
  return out;
}

}  // namespace hmdrn
