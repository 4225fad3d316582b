#pragma once

// INV grid composite: one column per layer (shallow to deep), cluster maps
// top to bottom by weight, each cell an overlay plus weight and labels.

#include <cstdio>
#include <functional>
#include <string>

#include "inv/explanations.hpp"
#include "inv/font.hpp"
#include "inv/mask.hpp"

namespace inv {

struct InvRenderOptions {
  std::size_t cell = 112;
  std::size_t max_label_chars = 24;
  std::size_t padding = 6;
};

using MapResolver = std::function<Map2D(const std::string& ref)>;

inline std::string percent_caption(double w) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", 100.0 * w);
  return buf;
}

inline std::string label_caption(const ScoredLabel& l, std::size_t max_chars) {
  char buf[32];
  std::snprintf(buf, sizeof buf, " %.2f", l.score);
  return fit_caption(l.label, max_chars) + buf;
}

inline RgbImage render_inv(const INVExplanation& inv, const RgbImage& image, const MapResolver& resolve, const InvRenderOptions& opt = {}) {
  std::size_t rows = 0;
  for (const auto& l : inv.layers) rows = std::max(rows, l.entries.size());
  if (inv.layers.empty() || rows == 0) throw ValidationError("cannot render an empty explanation");
  constexpr std::size_t line = kGlyphHeight + 2;
  const std::size_t col_w = std::max(opt.cell, (opt.max_label_chars + 6) * kGlyphAdvance) + 2 * opt.padding;
  const std::size_t row_h = opt.cell + (1 + kInvLabelsPerMap) * line + 2 * opt.padding;
  const std::size_t header = line + 2 * opt.padding;
  RgbImage out(header + rows * row_h, inv.layers.size() * col_w, {1, 1, 1});
  const Rgb ink{0, 0, 0};
  for (std::size_t c = 0; c < inv.layers.size(); ++c) {
    const auto& layer = inv.layers[c];
    const std::size_t x0 = c * col_w + opt.padding;
    draw_text(out, opt.padding, x0, fit_caption(layer.layer, col_w / kGlyphAdvance - 2), ink);
    for (std::size_t r = 0; r < layer.entries.size(); ++r) {
      const auto& e = layer.entries[r];
      const std::size_t y0 = header + r * row_h;
      const auto cell = resize_nearest(render_overlay(image, resolve(e.map_ref)), opt.cell, opt.cell);
      const std::size_t cx = x0 + (col_w - 2 * opt.padding - opt.cell) / 2;
      for (std::size_t y = 0; y < opt.cell; ++y) {
        for (std::size_t x = 0; x < opt.cell; ++x) out.set(y0 + y, cx + x, cell.pixel(y, x));
      }
      std::size_t ty = y0 + opt.cell + 2;
      draw_text(out, ty, x0, percent_caption(e.weight), ink);
      for (std::size_t k = 0; k < std::min(kInvLabelsPerMap, e.labels.size()); ++k) {
        ty += line;
        draw_text(out, ty, x0, label_caption(e.labels[k], opt.max_label_chars), ink);
      }
    }
  }
  return out;
}

inline MapResolver store_resolver(const std::filesystem::path& root) {
  return [root](const std::string& ref) { return load_map(root, ref).map; };
}

}  // namespace inv
