#pragma once

#include "promptseg/geometry.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace promptseg {

/// Maps between original image pixels and padded model-space pixels.
/// Content occupies the top-left corner; the remainder is zero padding.
struct PadRecord {
  int original_height = 0;
  int original_width = 0;
  int content_height = 0;
  int content_width = 0;
  int size = 0;  // square model input side
  double scale_x = 1.0;
  double scale_y = 1.0;

  double to_model_x(double x) const { return x * scale_x; }
  double to_model_y(double y) const { return y * scale_y; }
  double to_original_x(double x) const { return x / scale_x; }
  double to_original_y(double y) const { return y / scale_y; }
  /// Original-pixel box to normalized model-space box.
  Box to_model_normalized(const Box& pixel_box) const;
  /// Normalized model-space box to original pixels.
  Box to_original_pixels(const Box& normalized) const;
};

struct Sample {
  std::string id;
  ImageTensor image;
  std::vector<BinaryMask> masks;  // one per class
  std::vector<bool> present;      // present[k] == masks[k] has foreground
  PadRecord record;               // identity until resize_pad runs

  int num_classes() const { return static_cast<int>(masks.size()); }
  /// Re-derives `present` from the masks.
  void refresh_present();
};

using Dataset = std::vector<Sample>;

/// Scales the longer side to `size`, pads bottom/right with zeros. Image
/// bilinear, masks nearest. Throws InputError on an empty image.
Sample resize_pad(const Sample& sample, int size);

enum class Interpolation { nearest, bilinear };

struct AugmentationPolicy {
  double p_flip_h = 0.5;
  double p_flip_v = 0.5;
  double p_translate = 0.5;
  double p_rotate = 0.5;
  double p_crop = 0.5;
  double translate_frac = 0.2;
  double rotate_min_deg = -90.0;
  double rotate_max_deg = 90.0;
  double crop_scale_min = 0.8;
  double crop_scale_max = 1.0;
  Interpolation image_interpolation = Interpolation::bilinear;

  static AugmentationPolicy none();
  void validate() const;
};

/// 2-D affine map x' = A·x + t on continuous pixel coordinates.
struct Affine {
  double a = 1, b = 0, c = 0;  // x' = a x + b y + c
  double d = 0, e = 1, f = 0;  // y' = d x + e y + f

  Affine then(const Affine& next) const;  // next ∘ this
  Affine inverse() const;
  bool is_identity() const;
};

/// Composite geometric transform drawn from the policy with one seeded stream.
Affine draw_augmentation(const AugmentationPolicy& policy, int width, int height, std::uint64_t seed);
/// Applies an affine map (forward direction) to image and masks.
Sample apply_affine(const Sample& sample, const Affine& forward, Interpolation image_interpolation);
/// Draws and applies one augmentation; identical seeds give identical output.
Sample augment(const Sample& sample, const AugmentationPolicy& policy, std::uint64_t seed);

struct SynthOptions {
  int height = 240;
  int width = 320;
  int num_classes = 1;
};

/// Ultrasound-like images: dark speckled background, one bright curved band
/// per present class with an acoustic shadow below it. round(count·fraction)
/// images contain no object. Deterministic in the seed.
Dataset synth_generate(std::uint64_t seed, int count, double empty_fraction = 0.2, const SynthOptions& options = {});

/// Reads `images/*.png` and `masks/*.png` (pixel value v encodes class v, 0 is
/// background) into samples with `num_classes` masks each. Collects every
/// problem before throwing a single LoadError.
Dataset load_dataset(const std::filesystem::path& root, int num_classes);
/// Same, restricted to the stems listed one per line in `split_file`.
Dataset load_dataset(const std::filesystem::path& root, int num_classes, const std::filesystem::path& split_file);
void save_dataset(const Dataset& dataset, const std::filesystem::path& root);

/// Splitmix64 finalizer, used to derive per-item seeds from (seed, index).
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

/// Bilinear resample of an image to new dimensions.
ImageTensor resize_image(const ImageTensor& image, int height, int width);
BinaryMask resize_mask_nearest(const BinaryMask& mask, int height, int width);

}  // namespace promptseg
