#include "promptseg/data.hpp"

#include "promptseg/errors.hpp"
#include "promptseg/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace promptseg {

namespace fs = std::filesystem;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Box PadRecord::to_model_normalized(const Box& b) const {
  const double s = static_cast<double>(size);
  return Box{to_model_x(b.x1) / s, to_model_y(b.y1) / s, to_model_x(b.x2) / s, to_model_y(b.y2) / s};
}

Box PadRecord::to_original_pixels(const Box& b) const {
  const double s = static_cast<double>(size);
  return Box{to_original_x(b.x1 * s), to_original_y(b.y1 * s), to_original_x(b.x2 * s), to_original_y(b.y2 * s)};
}

void Sample::refresh_present() {
  present.assign(masks.size(), false);
  for (std::size_t k = 0; k < masks.size(); ++k) present[k] = !masks[k].empty();
}

// ------------------------------------------------------------------ resampling

namespace {

// Bilinear lookup at continuous pixel coordinates (centers at +0.5); samples
// outside the image read as zero.
double sample_bilinear(const ImageTensor& img, int channel, double x, double y) {
  const double fx = x - 0.5;
  const double fy = y - 0.5;
  const int x0 = static_cast<int>(std::floor(fx));
  const int y0 = static_cast<int>(std::floor(fy));
  const double ax = fx - x0;
  const double ay = fy - y0;
  auto px = [&](int yy, int xx) -> double {
    if (xx < 0 || yy < 0 || xx >= img.width || yy >= img.height) return 0.0;
    return img.at(channel, yy, xx);
  };
  return (1 - ay) * ((1 - ax) * px(y0, x0) + ax * px(y0, x0 + 1)) + ay * ((1 - ax) * px(y0 + 1, x0) + ax * px(y0 + 1, x0 + 1));
}

int nearest_index(double coord, int extent) {
  const int i = static_cast<int>(std::floor(coord));
  return (i < 0 || i >= extent) ? -1 : i;
}

}  // namespace

ImageTensor resize_image(const ImageTensor& image, int height, int width) {
  const Matrix ry = [&] {
    Matrix m = Matrix::Zero(height, image.height);
    const double s = static_cast<double>(image.height) / height;
    for (int i = 0; i < height; ++i) {
      const double src = std::clamp((i + 0.5) * s - 0.5, 0.0, static_cast<double>(image.height - 1));
      const int lo = static_cast<int>(std::floor(src));
      const int hi = std::min(lo + 1, image.height - 1);
      m(i, lo) += 1.0 - (src - lo);
      m(i, hi) += src - lo;
    }
    return m;
  }();
  const Matrix rx = [&] {
    Matrix m = Matrix::Zero(width, image.width);
    const double s = static_cast<double>(image.width) / width;
    for (int i = 0; i < width; ++i) {
      const double src = std::clamp((i + 0.5) * s - 0.5, 0.0, static_cast<double>(image.width - 1));
      const int lo = static_cast<int>(std::floor(src));
      const int hi = std::min(lo + 1, image.width - 1);
      m(i, lo) += 1.0 - (src - lo);
      m(i, hi) += src - lo;
    }
    return m;
  }();
  ImageTensor out = ImageTensor::zeros(height, width);
  for (int c = 0; c < 3; ++c) {
    Matrix plane = Eigen::Map<const Matrix>(image.data.row(c).data(), image.height, image.width);
    Matrix r = ry * plane * rx.transpose();
    out.data.row(c) = Eigen::Map<const Eigen::RowVectorXd>(r.data(), r.size());
  }
  return out;
}

BinaryMask resize_mask_nearest(const BinaryMask& mask, int height, int width) {
  BinaryMask out(height, width);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / width));
      out.at(y, x) = mask.at(sy, sx);
    }
  }
  return out;
}

Sample resize_pad(const Sample& sample, int size) {
  const int h = sample.image.height;
  const int w = sample.image.width;
  if (h <= 0 || w <= 0) throw InputError("resize_pad: empty image in sample '" + sample.id + "'");
  if (size <= 0) throw ConfigError("resize_pad: target size must be positive");
  const double scale = static_cast<double>(size) / std::max(h, w);
  const int ch = std::clamp(static_cast<int>(std::lround(h * scale)), 1, size);
  const int cw = std::clamp(static_cast<int>(std::lround(w * scale)), 1, size);

  Sample out;
  out.id = sample.id;
  out.record = PadRecord{h, w, ch, cw, size, static_cast<double>(cw) / w, static_cast<double>(ch) / h};
  const ImageTensor content = (ch == h && cw == w) ? sample.image : resize_image(sample.image, ch, cw);
  out.image = ImageTensor::zeros(size, size);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) out.image.at(c, y, x) = content.at(c, y, x);
  for (const auto& m : sample.masks) {
    if (m.height != h || m.width != w) throw InputError("resize_pad: mask size differs from image in '" + sample.id + "'");
    const BinaryMask r = resize_mask_nearest(m, ch, cw);
    BinaryMask padded(size, size);
    for (int y = 0; y < ch; ++y)
      for (int x = 0; x < cw; ++x) padded.at(y, x) = r.at(y, x);
    out.masks.push_back(std::move(padded));
  }
  out.refresh_present();
  return out;
}

// ------------------------------------------------------------------ augmentation

AugmentationPolicy AugmentationPolicy::none() {
  AugmentationPolicy p;
  p.p_flip_h = p.p_flip_v = p.p_translate = p.p_rotate = p.p_crop = 0.0;
  return p;
}

void AugmentationPolicy::validate() const {
  for (double p : {p_flip_h, p_flip_v, p_translate, p_rotate, p_crop})
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augmentation probabilities must lie in [0,1]");
  if (translate_frac < 0.0 || translate_frac > 1.0) throw ConfigError("augmentation translate_frac must lie in [0,1]");
  if (rotate_min_deg > rotate_max_deg) throw ConfigError("augmentation rotate range is inverted");
  if (!(crop_scale_min > 0.0) || crop_scale_min > crop_scale_max || crop_scale_max > 1.0)
    throw ConfigError("augmentation crop scale must satisfy 0 < min <= max <= 1");
}

Affine Affine::then(const Affine& n) const {
  Affine r;
  r.a = n.a * a + n.b * d;
  r.b = n.a * b + n.b * e;
  r.c = n.a * c + n.b * f + n.c;
  r.d = n.d * a + n.e * d;
  r.e = n.d * b + n.e * e;
  r.f = n.d * c + n.e * f + n.f;
  return r;
}

Affine Affine::inverse() const {
  const double det = a * e - b * d;
  Affine r;
  r.a = e / det;
  r.b = -b / det;
  r.d = -d / det;
  r.e = a / det;
  r.c = -(r.a * c + r.b * f);
  r.f = -(r.d * c + r.e * f);
  return r;
}

bool Affine::is_identity() const { return a == 1 && b == 0 && c == 0 && d == 0 && e == 1 && f == 0; }

Affine draw_augmentation(const AugmentationPolicy& policy, int width, int height, std::uint64_t seed) {
  policy.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double w = width;
  const double h = height;
  const double cx = w / 2;
  const double cy = h / 2;
  Affine t;
  // Every draw consumes the same number of variates so the stream layout is
  // independent of which transforms fire.
  const double r_fh = u01(rng), r_fv = u01(rng), r_tr = u01(rng), r_rot = u01(rng), r_crop = u01(rng);
  const double tx = (2 * u01(rng) - 1) * policy.translate_frac * w;
  const double ty = (2 * u01(rng) - 1) * policy.translate_frac * h;
  const double deg = policy.rotate_min_deg + u01(rng) * (policy.rotate_max_deg - policy.rotate_min_deg);
  const double scale = policy.crop_scale_min + u01(rng) * (policy.crop_scale_max - policy.crop_scale_min);
  const double crop_u = u01(rng), crop_v = u01(rng);

  if (r_fh < policy.p_flip_h) t = t.then(Affine{-1, 0, w, 0, 1, 0});
  if (r_fv < policy.p_flip_v) t = t.then(Affine{1, 0, 0, 0, -1, h});
  if (r_tr < policy.p_translate) t = t.then(Affine{1, 0, tx, 0, 1, ty});
  if (r_rot < policy.p_rotate) {
    const double th = deg * std::numbers::pi / 180.0;
    const double co = std::cos(th), si = std::sin(th);
    t = t.then(Affine{co, -si, cx - co * cx + si * cy, si, co, cy - si * cx - co * cy});
  }
  if (r_crop < policy.p_crop) {
    // Crop a scale·w × scale·h window at a random offset and stretch it back.
    const double ox = crop_u * (1 - scale) * w;
    const double oy = crop_v * (1 - scale) * h;
    t = t.then(Affine{1 / scale, 0, -ox / scale, 0, 1 / scale, -oy / scale});
  }
  return t;
}

Sample apply_affine(const Sample& sample, const Affine& forward, Interpolation image_interpolation) {
  if (forward.is_identity()) return sample;
  const Affine inv = forward.inverse();
  const int h = sample.image.height;
  const int w = sample.image.width;
  Sample out = sample;
  out.image = ImageTensor::zeros(h, w);
  for (auto& m : out.masks) std::fill(m.pixels.begin(), m.pixels.end(), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double ox = x + 0.5;
      const double oy = y + 0.5;
      const double sx = inv.a * ox + inv.b * oy + inv.c;
      const double sy = inv.d * ox + inv.e * oy + inv.f;
      const int nx = nearest_index(sx, w);
      const int ny = nearest_index(sy, h);
      for (int c = 0; c < 3; ++c) {
        if (image_interpolation == Interpolation::bilinear)
          out.image.at(c, y, x) = sample_bilinear(sample.image, c, sx, sy);
        else if (nx >= 0 && ny >= 0)
          out.image.at(c, y, x) = sample.image.at(c, ny, nx);
      }
      if (nx >= 0 && ny >= 0)
        for (std::size_t k = 0; k < out.masks.size(); ++k) out.masks[k].at(y, x) = sample.masks[k].at(ny, nx);
    }
  }
  out.refresh_present();
  return out;
}

Sample augment(const Sample& sample, const AugmentationPolicy& policy, std::uint64_t seed) {
  const Affine t = draw_augmentation(policy, sample.image.width, sample.image.height, seed);
  return apply_affine(sample, t, policy.image_interpolation);
}

// ------------------------------------------------------------------ synthetic data

namespace {

struct Band {
  double x_start, x_end;  // horizontal extent in pixels
  double y_vertex;        // arc apex row
  double x_vertex;
  double curvature;       // y = y_vertex + curvature·(x − x_vertex)²
  double thickness;
  double brightness;
};

double band_center(const Band& b, double x) { return b.y_vertex + b.curvature * (x - b.x_vertex) * (x - b.x_vertex); }

// Places one arc for class k inside its own horizontal stripe of the image.
Band draw_band(std::mt19937_64& rng, int width, int height, int k, int num_classes) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double w = width;
  const double h = height;
  const double stripe_top = h * (0.15 + 0.7 * k / num_classes);
  const double stripe_h = h * 0.7 / num_classes;
  Band b;
  const double length = w * (0.4 + 0.35 * u01(rng));
  b.x_start = (w - length) * u01(rng);
  b.x_end = b.x_start + length;
  b.x_vertex = b.x_start + length * (0.3 + 0.4 * u01(rng));
  b.thickness = h * (0.03 + 0.05 * u01(rng));
  const double max_reach = std::max(std::abs(b.x_start - b.x_vertex), std::abs(b.x_end - b.x_vertex));
  // Sag at the ends bounded by the stripe height minus the band thickness.
  const double max_sag = std::max(0.0, 0.6 * stripe_h - b.thickness);
  const double sag = (u01(rng) * 2 - 1) * max_sag;
  b.curvature = sag / (max_reach * max_reach);
  const double lo = stripe_top + b.thickness / 2 + std::max(0.0, -sag);
  const double hi = stripe_top + stripe_h - b.thickness / 2 - std::max(0.0, sag);
  b.y_vertex = lo + (std::max(hi, lo) - lo) * u01(rng);
  b.brightness = 0.75 + 0.2 * u01(rng);
  return b;
}

}  // namespace

Dataset synth_generate(std::uint64_t seed, int count, double empty_fraction, const SynthOptions& options) {
  if (count < 1) throw ConfigError("synth_generate: count must be >= 1");
  if (!(empty_fraction >= 0.0 && empty_fraction <= 1.0)) throw ConfigError("synth_generate: empty_fraction must lie in [0,1]");
  if (options.num_classes < 1) throw ConfigError("synth_generate: num_classes must be >= 1");
  if (options.height < 16 || options.width < 16) throw ConfigError("synth_generate: image must be at least 16x16");

  const int n_empty = static_cast<int>(std::lround(count * empty_fraction));
  // Empty slots are a seeded choice of indices so they are spread through the set.
  std::vector<int> order(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 pick(mix_seed(seed, 0xe3b0c442ULL));
  std::shuffle(order.begin(), order.end(), pick);
  std::vector<bool> is_empty(static_cast<std::size_t>(count), false);
  for (int i = 0; i < n_empty; ++i) is_empty[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;

  const int h = options.height;
  const int w = options.width;
  Dataset out;
  out.reserve(static_cast<std::size_t>(count));
  for (int idx = 0; idx < count; ++idx) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(idx)));
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    std::gamma_distribution<double> speckle(4.0, 0.25);  // mean 1

    Sample s;
    char name[32];
    std::snprintf(name, sizeof name, "synth_%05d", idx);
    s.id = name;
    s.image = ImageTensor::zeros(h, w);
    s.masks.assign(static_cast<std::size_t>(options.num_classes), BinaryMask(h, w));

    Matrix echo(h, w);
    const double base = 0.08 + 0.06 * u01(rng);
    const double depth_gain = 0.05 * u01(rng);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) echo(y, x) = base + depth_gain * (1.0 - static_cast<double>(y) / h);

    // Thin, dim distractor lines appear in every image so that brightness
    // alone does not reveal the target.
    const int n_lines = static_cast<int>(u01(rng) * 3);
    for (int l = 0; l < n_lines; ++l) {
      const double y0 = h * (0.1 + 0.8 * u01(rng));
      const double slope = (u01(rng) * 2 - 1) * 0.3;
      const double half = h * (0.004 + 0.004 * u01(rng));
      const double level = 0.25 + 0.1 * u01(rng);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (std::abs(y + 0.5 - (y0 + slope * (x - w / 2.0))) < half) echo(y, x) = std::max(echo(y, x), level);
    }

    if (!is_empty[static_cast<std::size_t>(idx)]) {
      for (int k = 0; k < options.num_classes; ++k) {
        const Band b = draw_band(rng, w, h, k, options.num_classes);
        BinaryMask& m = s.masks[static_cast<std::size_t>(k)];
        for (int x = 0; x < w; ++x) {
          const double px = x + 0.5;
          if (px < b.x_start || px > b.x_end) continue;
          const double yc = band_center(b, px);
          for (int y = 0; y < h; ++y) {
            const double py = y + 0.5;
            const double dist = py - yc;
            if (std::abs(dist) <= b.thickness / 2) {
              m.at(y, x) = 1;
              echo(y, x) = b.brightness;
            } else if (dist > b.thickness / 2) {
              // Acoustic shadow: attenuation grows with depth below the band.
              const double depth = (dist - b.thickness / 2) / h;
              echo(y, x) *= 0.35 + 0.3 * std::exp(-8.0 * depth);
            }
          }
        }
      }
    }

    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const double v = std::clamp(echo(y, x) * speckle(rng), 0.0, 1.0);
        for (int c = 0; c < 3; ++c) s.image.at(c, y, x) = v;
      }
    s.refresh_present();
    s.record = PadRecord{h, w, h, w, std::max(h, w), 1.0, 1.0};
    out.push_back(std::move(s));
  }
  return out;
}

// ------------------------------------------------------------------ directory I/O

namespace {

ImageTensor raster_to_image(const io::Raster& r) {
  ImageTensor img = ImageTensor::zeros(r.height, r.width);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src = r.channels == 1 ? 0 : c;
        img.at(c, y, x) = r.pixels[(static_cast<std::size_t>(y) * r.width + x) * r.channels + src] / 255.0;
      }
  return img;
}

std::map<std::string, fs::path> list_pngs(const fs::path& dir) {
  std::map<std::string, fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out[e.path().stem().string()] = e.path();
  return out;
}

Dataset load_impl(const fs::path& root, int num_classes, const std::set<std::string>* only) {
  if (num_classes < 1) throw ConfigError("load_dataset: num_classes must be >= 1");
  std::vector<std::string> problems;
  if (!fs::is_directory(root / "images")) problems.push_back("missing directory " + (root / "images").string());
  if (!fs::is_directory(root / "masks")) problems.push_back("missing directory " + (root / "masks").string());
  if (!problems.empty()) {
    std::string msg = "dataset at " + root.string() + ": " + problems[0];
    for (std::size_t i = 1; i < problems.size(); ++i) msg += "; " + problems[i];
    throw LoadError(msg);
  }
  const auto images = list_pngs(root / "images");
  const auto masks = list_pngs(root / "masks");

  std::vector<std::string> no_mask, no_image;
  for (const auto& [stem, _] : images)
    if ((only == nullptr || only->count(stem)) && !masks.count(stem)) no_mask.push_back(stem);
  for (const auto& [stem, _] : masks)
    if ((only == nullptr || only->count(stem)) && !images.count(stem)) no_image.push_back(stem);
  auto listing = [](const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
    return s;
  };
  if (!no_mask.empty()) problems.push_back("images without mask: " + listing(no_mask));
  if (!no_image.empty()) problems.push_back("masks without image: " + listing(no_image));
  if (only != nullptr) {
    std::vector<std::string> missing;
    for (const auto& stem : *only)
      if (!images.count(stem) && !masks.count(stem)) missing.push_back(stem);
    if (!missing.empty()) problems.push_back("split lists unknown stems: " + listing(missing));
  }

  Dataset out;
  for (const auto& [stem, image_path] : images) {
    if (only != nullptr && !only->count(stem)) continue;
    auto mit = masks.find(stem);
    if (mit == masks.end()) continue;
    try {
      const io::Raster img = io::read_png(image_path);
      const io::Raster msk = io::read_png(mit->second);
      if (msk.channels != 1) {
        problems.push_back(stem + ": mask must be single-channel");
        continue;
      }
      if (msk.width != img.width || msk.height != img.height) {
        problems.push_back(stem + ": mask " + std::to_string(msk.width) + "x" + std::to_string(msk.height) +
                           " differs from image " + std::to_string(img.width) + "x" + std::to_string(img.height));
        continue;
      }
      const int max_value = *std::max_element(msk.pixels.begin(), msk.pixels.end());
      if (max_value > num_classes) {
        problems.push_back(stem + ": mask value " + std::to_string(max_value) + " exceeds max class " +
                           std::to_string(num_classes));
        continue;
      }
      Sample s;
      s.id = stem;
      s.image = raster_to_image(img);
      s.masks.assign(static_cast<std::size_t>(num_classes), BinaryMask(img.height, img.width));
      for (std::size_t i = 0; i < msk.pixels.size(); ++i)
        if (msk.pixels[i] > 0) s.masks[msk.pixels[i] - 1u].pixels[i] = 1;
      s.refresh_present();
      s.record = PadRecord{img.height, img.width, img.height, img.width, std::max(img.height, img.width), 1.0, 1.0};
      out.push_back(std::move(s));
    } catch (const Error& e) {
      problems.push_back(stem + ": " + e.what());
    }
  }
  if (!problems.empty()) {
    std::string msg = "dataset at " + root.string() + ": " + problems[0];
    for (std::size_t i = 1; i < problems.size(); ++i) msg += "; " + problems[i];
    throw LoadError(msg);
  }
  return out;
}

}  // namespace

Dataset load_dataset(const fs::path& root, int num_classes) { return load_impl(root, num_classes, nullptr); }

Dataset load_dataset(const fs::path& root, int num_classes, const fs::path& split_file) {
  std::ifstream in(split_file);
  if (!in) throw LoadError("cannot read split file " + split_file.string());
  std::set<std::string> stems;
  std::string line;
  while (std::getline(in, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    const auto e = line.find_last_not_of(" \t\r");
    stems.insert(line.substr(b, e - b + 1));
  }
  return load_impl(root, num_classes, &stems);
}

void save_dataset(const Dataset& dataset, const fs::path& root) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  for (const auto& s : dataset) {
    const int h = s.image.height;
    const int w = s.image.width;
    const bool gray = s.image.data.row(0) == s.image.data.row(1) && s.image.data.row(0) == s.image.data.row(2);
    io::Raster img{w, h, gray ? 1 : 3, {}};
    img.pixels.resize(static_cast<std::size_t>(w) * h * img.channels);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < img.channels; ++c)
          img.pixels[(static_cast<std::size_t>(y) * w + x) * img.channels + c] =
              static_cast<std::uint8_t>(std::lround(std::clamp(s.image.at(c, y, x), 0.0, 1.0) * 255.0));
    io::Raster msk{w, h, 1, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h, 0)};
    for (std::size_t k = 0; k < s.masks.size(); ++k)
      for (std::size_t i = 0; i < msk.pixels.size(); ++i)
        if (s.masks[k].pixels[i]) msk.pixels[i] = static_cast<std::uint8_t>(k + 1);
    io::write_png(root / "images" / (s.id + ".png"), img);
    io::write_png(root / "masks" / (s.id + ".png"), msk);
  }
}

}  // namespace promptseg
