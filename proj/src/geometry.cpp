#include "promptseg/geometry.hpp"

#include "promptseg/errors.hpp"

#include <cmath>
#include <numbers>

namespace promptseg {

GeometryPreset GeometryPreset::paper() { return {"paper", 1024, 256, 64, 256}; }

GeometryPreset GeometryPreset::desk() { return {"desk", 256, 128, 16, 64}; }

GeometryPreset GeometryPreset::by_name(const std::string& name) {
  if (name == "paper") return paper();
  if (name == "desk") return desk();
  throw ConfigError("unknown geometry preset '" + name + "' (expected \"paper\" or \"desk\")");
}

void GeometryPreset::validate() const {
  if (input_size != kPatchSize * embed_grid)
    throw ConfigError("geometry: input_size must equal 16 x embed_grid");
  if (mask_prompt_size != 4 * embed_grid) throw ConfigError("geometry: mask_prompt_size must equal 4 x embed_grid");
  if (embed_channels <= 0 || embed_channels % 8 != 0) throw ConfigError("geometry: embed_channels must be a positive multiple of 8");
}

ImageTensor ImageTensor::zeros(int height, int width) {
  ImageTensor t;
  t.height = height;
  t.width = width;
  t.data = Matrix::Zero(3, static_cast<Index>(height) * width);
  return t;
}

std::size_t BinaryMask::count() const {
  std::size_t n = 0;
  for (auto v : pixels) n += v != 0;
  return n;
}

void ManualPrompts::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0 && std::isfinite(v); };
  for (const auto& p : points) {
    if (!in_unit(p.x) || !in_unit(p.y)) throw InputError("point prompt outside [0,1]");
  }
  for (const auto& b : boxes) {
    if (!in_unit(b.x1) || !in_unit(b.y1) || !in_unit(b.x2) || !in_unit(b.y2))
      throw InputError("box prompt outside [0,1]");
    if (!(b.x1 < b.x2) || !(b.y1 < b.y2)) throw InputError("box prompt requires x1<x2 and y1<y2");
  }
}

std::optional<Box> mask_bounding_box(const BinaryMask& mask) {
  int x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      x0 = std::min(x0, x);
      y0 = std::min(y0, y);
      x1 = std::max(x1, x);
      y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) return std::nullopt;
  return Box{static_cast<double>(x0) / mask.width, static_cast<double>(y0) / mask.height,
             static_cast<double>(x1 + 1) / mask.width, static_cast<double>(y1 + 1) / mask.height};
}

namespace {

// Angular frequency of band i out of `bands`, spanning π·1 .. π·grid.
double band_frequency(int i, int bands, int grid) {
  const double t = bands > 1 ? static_cast<double>(i) / (bands - 1) : 0.0;
  return std::numbers::pi * std::pow(static_cast<double>(grid), t);
}

}  // namespace

Matrix grid_positional_encoding(int channels, int grid) {
  const int bands = channels / 4;
  Matrix pe(channels, static_cast<Index>(grid) * grid);
  for (int r = 0; r < grid; ++r) {
    for (int c = 0; c < grid; ++c) {
      const double u = (c + 0.5) / grid;
      const double v = (r + 0.5) / grid;
      const Index col = static_cast<Index>(r) * grid + c;
      for (int i = 0; i < bands; ++i) {
        const double w = band_frequency(i, bands, grid);
        pe(i, col) = std::sin(w * u);
        pe(bands + i, col) = std::cos(w * u);
        pe(2 * bands + i, col) = std::sin(w * v);
        pe(3 * bands + i, col) = std::cos(w * v);
      }
    }
  }
  return pe;
}

ag::Var coordinate_encoding(const ag::Var& coords, int channels, int grid) {
  const Matrix& xy = coords.value();
  if (xy.cols() != 2) throw InputError("coordinate_encoding expects n x 2 coordinates");
  const int bands = channels / 4;
  std::vector<double> freq(bands);
  for (int i = 0; i < bands; ++i) freq[i] = band_frequency(i, bands, grid);

  Matrix out(xy.rows(), channels);
  for (Index n = 0; n < xy.rows(); ++n) {
    for (int i = 0; i < bands; ++i) {
      out(n, i) = std::sin(freq[i] * xy(n, 0));
      out(n, bands + i) = std::cos(freq[i] * xy(n, 0));
      out(n, 2 * bands + i) = std::sin(freq[i] * xy(n, 1));
      out(n, 3 * bands + i) = std::cos(freq[i] * xy(n, 1));
    }
  }
  return ag::make_result(std::move(out), {coords}, [freq, bands](ag::Node& self) {
    const Matrix& v = self.value;
    Matrix& g = self.inputs[0]->grad_buffer();
    for (Index n = 0; n < v.rows(); ++n) {
      double gx = 0, gy = 0;
      for (int i = 0; i < bands; ++i) {
        // d sin(wu)/du = w cos(wu); d cos(wu)/du = -w sin(wu)
        gx += freq[i] * (self.grad(n, i) * v(n, bands + i) - self.grad(n, bands + i) * v(n, i));
        gy += freq[i] * (self.grad(n, 2 * bands + i) * v(n, 3 * bands + i) -
                         self.grad(n, 3 * bands + i) * v(n, 2 * bands + i));
      }
      g(n, 0) += gx;
      g(n, 1) += gy;
    }
  });
}

}  // namespace promptseg
