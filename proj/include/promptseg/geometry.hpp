#pragma once

#include "promptseg/autograd.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace promptseg {

/// Consistent set of input, embedding, and mask-prompt sizes.
struct GeometryPreset {
  static constexpr int kPatchSize = 16;

  std::string name;
  int input_size = 0;        // square model input after resize_pad
  int embed_channels = 0;    // C, also the token width
  int embed_grid = 0;        // H' = W'
  int mask_prompt_size = 0;  // 4·H'

  int token_dim() const { return embed_channels; }
  int grid_cells() const { return embed_grid * embed_grid; }

  static GeometryPreset paper();
  static GeometryPreset desk();
  /// "paper" or "desk"; anything else is a ConfigError.
  static GeometryPreset by_name(const std::string& name);
  /// Checks the patch-size and mask-prompt relations.
  void validate() const;

  bool operator==(const GeometryPreset&) const = default;
};

/// Three-channel image in [0,1]; rows are channels, columns are pixels in
/// row-major order.
struct ImageTensor {
  int height = 0;
  int width = 0;
  Matrix data;  // 3 × (height·width)

  static ImageTensor zeros(int height, int width);
  double at(int channel, int y, int x) const { return data(channel, static_cast<Index>(y) * width + x); }
  double& at(int channel, int y, int x) { return data(channel, static_cast<Index>(y) * width + x); }
};

/// Encoder output, C × (H'·W').
struct ImageEmbedding {
  int grid = 0;
  Matrix data;

  int channels() const { return static_cast<int>(data.rows()); }
};

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;  // 0 or 1, row-major

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  bool operator==(const BinaryMask&) const = default;
};

/// Axis-aligned box in normalized [0,1] coordinates unless stated otherwise.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  bool operator==(const Box&) const = default;
};

enum class PointLabel { background = 0, foreground = 1 };

struct PointPrompt {
  double x = 0;
  double y = 0;
  PointLabel label = PointLabel::foreground;
};

/// User-supplied prompts in normalized model-space coordinates.
struct ManualPrompts {
  std::vector<PointPrompt> points;
  std::vector<Box> boxes;
  std::optional<BinaryMask> brush_mask;  // mask_prompt_size²

  bool empty() const { return points.empty() && boxes.empty() && !brush_mask; }
  std::size_t sparse_token_count() const { return points.size() + 2 * boxes.size(); }
  /// Throws InputError on out-of-range coordinates or inverted boxes.
  void validate() const;
};

struct SegmentationResult {
  Matrix mask_logits;  // input_size × input_size
  BinaryMask mask;
  double objectness_logit = 0;
  bool object_present = false;
  int prompt_tokens = 0;   // sparse prompt tokens fed to the decoder
  int decoder_tokens = 0;  // prompt tokens plus decoder output tokens
};

/// Tight bounding box of the foreground in normalized coordinates, using
/// pixel edges (a single pixel at column c spans [c, c+1) / width).
std::optional<Box> mask_bounding_box(const BinaryMask& mask);

/// Fixed 2-D sinusoidal encoding of cell centers, C × (grid·grid).
Matrix grid_positional_encoding(int channels, int grid);

/// Sinusoidal encoding of normalized (x, y) rows in an n×2 input; n×C out,
/// differentiable with respect to the coordinates. Uses the same frequencies
/// as `grid_positional_encoding`, so a cell center maps to its grid column.
ag::Var coordinate_encoding(const ag::Var& coords, int channels, int grid);

}  // namespace promptseg
