#pragma once

#include <filesystem>
#include <span>
#include <string>

namespace robustlat {

void write_line_svg(const std::filesystem::path& path, const std::string& title, std::span<const double> xs,
                    std::span<const double> ys);

// Point radius grows with log(1 + weight).
void write_scatter_svg(const std::filesystem::path& path, const std::string& title, std::span<const double> xs,
                       std::span<const double> ys, std::span<const double> weights);

}  // namespace robustlat
