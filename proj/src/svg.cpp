#include "robustlat/svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "robustlat/error.hpp"

namespace robustlat {

namespace {

constexpr double kWidth = 480, kHeight = 360, kMargin = 40;

struct Frame {
  double x0, x1, y0, y1;
  double sx(double x) const { return kMargin + (x1 > x0 ? (x - x0) / (x1 - x0) : 0.5) * (kWidth - 2 * kMargin); }
  double sy(double y) const {
    return kHeight - kMargin - (y1 > y0 ? (y - y0) / (y1 - y0) : 0.5) * (kHeight - 2 * kMargin);
  }
};

Frame frame_of(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("svg: x/y length mismatch");
  if (xs.empty()) return {0, 1, 0, 1};
  const auto [xmin, xmax] = std::minmax_element(xs.begin(), xs.end());
  const auto [ymin, ymax] = std::minmax_element(ys.begin(), ys.end());
  return {*xmin, *xmax, *ymin, *ymax};
}

std::ofstream open_svg(const std::filesystem::path& path, const std::string& title, const Frame& f) {
  std::ofstream os(path);
  if (!os) throw InputError("cannot open " + path.string() + " for writing");
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kWidth / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title << "</text>\n"
     << "<line x1=\"" << kMargin << "\" y1=\"" << kHeight - kMargin << "\" x2=\"" << kWidth - kMargin << "\" y2=\""
     << kHeight - kMargin << "\" stroke=\"black\"/>\n"
     << "<line x1=\"" << kMargin << "\" y1=\"" << kMargin << "\" x2=\"" << kMargin << "\" y2=\"" << kHeight - kMargin
     << "\" stroke=\"black\"/>\n"
     << "<text x=\"" << kMargin << "\" y=\"" << kHeight - 10 << "\" font-size=\"10\">" << f.x0 << "</text>\n"
     << "<text x=\"" << kWidth - kMargin << "\" y=\"" << kHeight - 10 << "\" font-size=\"10\" text-anchor=\"end\">"
     << f.x1 << "</text>\n"
     << "<text x=\"4\" y=\"" << kHeight - kMargin << "\" font-size=\"10\">" << f.y0 << "</text>\n"
     << "<text x=\"4\" y=\"" << kMargin << "\" font-size=\"10\">" << f.y1 << "</text>\n";
  return os;
}

}  // namespace

void write_line_svg(const std::filesystem::path& path, const std::string& title, std::span<const double> xs,
                    std::span<const double> ys) {
  const Frame f = frame_of(xs, ys);
  std::ofstream os = open_svg(path, title, f);
  os << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < xs.size(); ++i) os << f.sx(xs[i]) << ',' << f.sy(ys[i]) << ' ';
  os << "\"/>\n";
  for (std::size_t i = 0; i < xs.size(); ++i)
    os << "<circle cx=\"" << f.sx(xs[i]) << "\" cy=\"" << f.sy(ys[i]) << "\" r=\"3\" fill=\"steelblue\"/>\n";
  os << "</svg>\n";
}

void write_scatter_svg(const std::filesystem::path& path, const std::string& title, std::span<const double> xs,
                       std::span<const double> ys, std::span<const double> weights) {
  if (weights.size() != xs.size()) throw std::invalid_argument("svg: weight length mismatch");
  const Frame f = frame_of(xs, ys);
  std::ofstream os = open_svg(path, title, f);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double r = 1.5 + std::log1p(std::max(0.0, weights[i]));
    os << "<circle cx=\"" << f.sx(xs[i]) << "\" cy=\"" << f.sy(ys[i]) << "\" r=\"" << r
       << "\" fill=\"darkorange\" fill-opacity=\"0.6\"/>\n";
  }
  os << "</svg>\n";
}

}  // namespace robustlat
