#include "repscope/report.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>

#include "repscope/error.hpp"
#include "repscope/npy.hpp"

namespace repscope {

namespace {

constexpr int kDigits = 9;

std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&':
        out += "&amp;";
        break;
      case '<':
        out += "&lt;";
        break;
      case '>':
        out += "&gt;";
        break;
      case '"':
        out += "&quot;";
        break;
      default:
        out += c;
    }
  }
  return out;
}

std::string hex(const Rgb& c) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s = "#";
  for (std::uint8_t v : {c.r, c.g, c.b}) {
    s += digits[v >> 4];
    s += digits[v & 15];
  }
  return s;
}

bool hatch_pixel(std::size_t x, std::size_t y) { return ((x + y) / 3) % 2 == 0; }

Rgb cell_color(double v, const ColorScale& s) {
  const double t = s.hi > s.lo ? (v - s.lo) / (s.hi - s.lo) : 0.5;
  return viridis(t);
}

}  // namespace

std::string format_number(double value) {
  if (std::isnan(value)) return "nan";
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), value, std::chars_format::general, kDigits);
  std::string s(buf.data(), res.ptr);
  // Pad the mantissa with zeros so every value shows exactly 9 digits.
  const auto e = s.find('e');
  std::string mantissa = s.substr(0, e);
  const std::string exponent = e == std::string::npos ? "" : s.substr(e);
  int sig = 0;
  bool leading = true;
  for (char c : mantissa) {
    if (c < '0' || c > '9') continue;
    if (leading && c == '0') continue;
    leading = false;
    ++sig;
  }
  if (value == 0.0) sig = 1;
  if (sig < kDigits) {
    if (mantissa.find('.') == std::string::npos) mantissa += '.';
    mantissa.append(static_cast<std::size_t>(kDigits - sig), '0');
  }
  return mantissa + exponent;
}

std::string csv_field(std::string_view text) {
  if (text.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(text);
  std::string out = "\"";
  for (char c : text) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {
  if (header_.empty()) throw InvalidArgument("CsvTable: empty header");
}

void CsvTable::add_row(std::vector<std::string> cells) {
  if (cells.size() != header_.size()) {
    throw InvalidArgument("CsvTable: row has " + std::to_string(cells.size()) + " cells, header has " +
                          std::to_string(header_.size()));
  }
  rows_.push_back(std::move(cells));
}

std::string CsvTable::str() const {
  std::string out;
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out += ',';
      out += csv_field(cells[i]);
    }
    out += '\n';
  };
  line(header_);
  for (const auto& r : rows_) line(r);
  return out;
}

void CsvTable::write(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  write_file_bytes(path, str());
}

std::string heatmap_csv(const HeatmapResult& h) {
  std::vector<std::string> header{"layer"};
  header.insert(header.end(), h.cols.begin(), h.cols.end());
  CsvTable t(header);
  for (std::size_t i = 0; i < h.rows.size(); ++i) {
    std::vector<std::string> row{h.rows[i]};
    for (std::size_t j = 0; j < h.cols.size(); ++j) row.push_back(format_number(h.scores(i, j)));
    t.add_row(std::move(row));
  }
  return t.str();
}

Rgb viridis(double t) {
  static constexpr std::array<Rgb, 9> anchors{{{68, 1, 84},
                                                {71, 44, 122},
                                                {59, 81, 139},
                                                {44, 113, 142},
                                                {33, 144, 141},
                                                {39, 173, 129},
                                                {92, 200, 99},
                                                {170, 220, 50},
                                                {253, 231, 37}}};
  if (!(t > 0.0)) return anchors.front();
  if (t >= 1.0) return anchors.back();
  const double pos = t * static_cast<double>(anchors.size() - 1);
  const auto i = static_cast<std::size_t>(pos);
  const double f = pos - static_cast<double>(i);
  auto mix = [f](std::uint8_t a, std::uint8_t b) {
    return static_cast<std::uint8_t>(std::lround(a + f * (static_cast<double>(b) - a)));
  };
  const Rgb& a = anchors[i];
  const Rgb& b = anchors[i + 1];
  return {mix(a.r, b.r), mix(a.g, b.g), mix(a.b, b.b)};
}

ColorScale color_scale(const HeatmapResult& h, const RenderStyle& style) {
  if (style.unit_scale) return {0.0, 1.0};
  ColorScale s{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (double v : h.scores.data()) {
    if (!std::isfinite(v)) continue;
    s.lo = std::min(s.lo, v);
    s.hi = std::max(s.hi, v);
  }
  if (s.lo > s.hi) return {0.0, 1.0};
  return s;
}

std::string render_ppm(const HeatmapResult& h, const RenderStyle& style) {
  if (h.scores.rank() != 2) throw InvalidArgument("render_ppm: scores must be 2-D");
  const std::size_t rows = h.scores.dim(0), cols = h.scores.dim(1), cp = std::max<std::size_t>(1, style.cell_pixels);
  const ColorScale s = color_scale(h, style);
  std::string out = "P6\n";
  if (!style.title.empty()) out += "# title " + style.title + "\n";
  out += "# scale " + format_number(s.lo) + " " + format_number(s.hi) + "\n";
  for (const auto& r : h.rows) out += "# row " + r + "\n";
  for (const auto& c : h.cols) out += "# col " + c + "\n";
  out += std::to_string(cols * cp) + " " + std::to_string(rows * cp) + "\n255\n";
  for (std::size_t y = 0; y < rows * cp; ++y) {
    for (std::size_t x = 0; x < cols * cp; ++x) {
      const double v = h.scores(y / cp, x / cp);
      const Rgb c = std::isfinite(v)
                        ? cell_color(style.unit_scale ? clamp_unit(v) : v, s)
                        : (hatch_pixel(x, y) ? kHatchColor : kHatchBackground);
      out += static_cast<char>(c.r);
      out += static_cast<char>(c.g);
      out += static_cast<char>(c.b);
    }
  }
  return out;
}

std::string render_svg(const HeatmapResult& h, const RenderStyle& style) {
  if (h.scores.rank() != 2) throw InvalidArgument("render_svg: scores must be 2-D");
  const std::size_t rows = h.scores.dim(0), cols = h.scores.dim(1);
  const std::size_t cell = std::max<std::size_t>(style.cell_pixels, 12);
  std::size_t label_w = 0;
  for (const auto& r : h.rows) label_w = std::max(label_w, r.size());
  std::size_t label_h = 0;
  for (const auto& c : h.cols) label_h = std::max(label_h, c.size());
  const std::size_t left = 10 + label_w * 7, top = 30, bottom = 20 + label_h * 7;
  const std::size_t legend_w = 80;
  const std::size_t width = left + cols * cell + legend_w, height = top + rows * cell + bottom;
  const ColorScale s = color_scale(h, style);
  std::string o;
  o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
       std::to_string(height) + "\" font-family=\"monospace\" font-size=\"11\">\n";
  o += "<defs><pattern id=\"hatch\" width=\"6\" height=\"6\" patternUnits=\"userSpaceOnUse\" "
       "patternTransform=\"rotate(45)\"><rect width=\"6\" height=\"6\" fill=\"" +
       hex(kHatchBackground) + "\"/><rect width=\"3\" height=\"6\" fill=\"" + hex(kHatchColor) +
       "\"/></pattern></defs>\n";
  o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!style.title.empty()) {
    o += "<text x=\"" + std::to_string(left) + "\" y=\"18\">" + xml_escape(style.title) + "</text>\n";
  }
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      const double v = h.scores(i, j);
      const std::string fill =
          std::isfinite(v) ? hex(cell_color(style.unit_scale ? clamp_unit(v) : v, s)) : "url(#hatch)";
      const std::size_t x = left + j * cell, y = top + i * cell;
      o += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" width=\"" + std::to_string(cell) +
           "\" height=\"" + std::to_string(cell) + "\" fill=\"" + fill + "\"><title>" + xml_escape(h.rows[i]) +
           " / " + xml_escape(h.cols[j]) + ": " + format_number(v) + "</title></rect>\n";
      if (style.cell_labels) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%.2f", v);
        o += "<text x=\"" + std::to_string(x + 1) + "\" y=\"" + std::to_string(y + cell / 2 + 4) +
             "\" font-size=\"8\" fill=\"white\">" + std::string(buf) + "</text>\n";
      }
    }
    o += "<text x=\"" + std::to_string(left - 4) + "\" y=\"" + std::to_string(top + i * cell + cell / 2 + 4) +
         "\" text-anchor=\"end\">" + xml_escape(h.rows[i]) + "</text>\n";
  }
  for (std::size_t j = 0; j < cols; ++j) {
    const std::size_t x = left + j * cell + cell / 2, y = top + rows * cell + 6;
    o += "<text x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) + "\" transform=\"rotate(90 " +
         std::to_string(x) + " " + std::to_string(y) + ")\">" + xml_escape(h.cols[j]) + "</text>\n";
  }
  const std::size_t lx = left + cols * cell + 20, lh = std::max<std::size_t>(rows * cell, 40);
  constexpr std::size_t steps = 32;
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = 1.0 - static_cast<double>(k) / static_cast<double>(steps - 1);
    o += "<rect x=\"" + std::to_string(lx) + "\" y=\"" + std::to_string(top + k * lh / steps) +
         "\" width=\"12\" height=\"" + std::to_string(lh / steps + 1) + "\" fill=\"" + hex(viridis(t)) + "\"/>\n";
  }
  o += "<text x=\"" + std::to_string(lx + 16) + "\" y=\"" + std::to_string(top + 8) + "\">" + format_number(s.hi) +
       "</text>\n";
  o += "<text x=\"" + std::to_string(lx + 16) + "\" y=\"" + std::to_string(top + lh) + "\">" + format_number(s.lo) +
       "</text>\n";
  o += "</svg>\n";
  return o;
}

void render_heatmap(const HeatmapResult& h, const RenderStyle& style, const std::filesystem::path& stem) {
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::filesystem::path ppm = stem, svg = stem;
  ppm += ".ppm";
  svg += ".svg";
  write_file_bytes(ppm, render_ppm(h, style));
  write_file_bytes(svg, render_svg(h, style));
}

HeatmapResult grid_heatmap(const Tensor& grid, std::string row_prefix, std::string col_prefix) {
  if (grid.rank() != 2) throw InvalidArgument("grid_heatmap: expected a 2-D tensor");
  HeatmapResult h;
  for (std::size_t i = 0; i < grid.dim(0); ++i) h.rows.push_back(row_prefix + std::to_string(i));
  for (std::size_t j = 0; j < grid.dim(1); ++j) h.cols.push_back(col_prefix + std::to_string(j));
  h.scores = grid;
  return h;
}

}  // namespace repscope
