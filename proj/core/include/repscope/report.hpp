#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "repscope/cka.hpp"

namespace repscope {

// Locale-independent decimal with exactly 9 significant digits
// ("0.500000000", "1.23456789e-07"); non-finite values print as nan, inf
// and -inf.
std::string format_number(double value);

// Quotes a CSV field when it contains a comma, quote or newline.
std::string csv_field(std::string_view text);

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  void add_row(std::vector<std::string> cells);
  std::string str() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

// First column is the row label, then one column per heatmap column.
std::string heatmap_csv(const HeatmapResult& heatmap);

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

// Fixed viridis-like ramp; t is clamped to [0, 1].
Rgb viridis(double t);
// Non-finite cells alternate these two colours in diagonal stripes.
inline constexpr Rgb kHatchColor{255, 0, 255};
inline constexpr Rgb kHatchBackground{32, 32, 32};

struct RenderStyle {
  // true: colour scale fixed to [0, 1] (CKA); false: finite data min/max.
  bool unit_scale = true;
  bool cell_labels = false;  // print scores inside SVG cells
  std::size_t cell_pixels = 16;
  std::string title;
};

struct ColorScale {
  double lo = 0.0, hi = 1.0;
};
ColorScale color_scale(const HeatmapResult& h, const RenderStyle& style);

// Binary PPM (P6): one cell_pixels x cell_pixels square per score, no
// margins. Comment lines carry the title, the colour-scale bounds and the
// row/column labels.
std::string render_ppm(const HeatmapResult& h, const RenderStyle& style);
// SVG with axis labels, optional cell labels and a legend with bounds.
std::string render_svg(const HeatmapResult& h, const RenderStyle& style);

// Writes <stem>.ppm and <stem>.svg.
void render_heatmap(const HeatmapResult& h, const RenderStyle& style, const std::filesystem::path& stem);

// Wraps a 2-D tensor (e.g. a receptive field or localization map) as a
// heatmap with index labels.
HeatmapResult grid_heatmap(const Tensor& grid, std::string row_prefix = "y", std::string col_prefix = "x");

}  // namespace repscope
