#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace bsatnp::tools {

// 8-bit RGB canvas, row 0 at the top.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image(int w, int h, std::uint8_t fill = 255);
  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
  void line(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g, std::uint8_t b);
  void dot(int x, int y, int radius, std::uint8_t r, std::uint8_t g, std::uint8_t b);
};

// Maps t in [0, 1] onto a perceptual blue-green-yellow ramp.
void colormap(double t, std::uint8_t& r, std::uint8_t& g, std::uint8_t& b);

void write_png(const std::string& path, const Image& img);

}  // namespace bsatnp::tools
