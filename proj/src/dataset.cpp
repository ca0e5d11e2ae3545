#include "robustlat/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>

#include <png.h>

#include "robustlat/error.hpp"
#include "robustlat/hashing.hpp"
#include "robustlat/rng.hpp"

namespace robustlat {

namespace {

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double x = h * 6.0;
  const int sector = static_cast<int>(x) % 6;
  const double f = x - std::floor(x);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

double uniform(Philox& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform01(); }

int parity(double v) { return static_cast<int>(std::floor(v)) & 1; }

Image render(const SyntheticSpec& spec, int label, int index) {
  Philox rng(spec.seed, {static_cast<std::uint64_t>(label), static_cast<std::uint64_t>(index)});
  const double side = spec.side;
  const int family = label % kShapeFamilies;
  const double class_hue = 0.13 + label * 0.6180339887498949;

  const double cx = uniform(rng, 0.3, 0.7) * side;
  const double cy = uniform(rng, 0.3, 0.7) * side;
  const double size = uniform(rng, spec.scale_min, spec.scale_max) * side;
  const double aspect = uniform(rng, 0.6, 1.0);
  const double hue = class_hue + spec.hue_jitter * uniform(rng, -1.0, 1.0);
  const Rgb fg = hsv_to_rgb(hue, 0.8, uniform(rng, 0.75, 0.95));
  const Rgb bg = hsv_to_rgb(hue + 0.5, 0.3, uniform(rng, 0.15, 0.35));
  const double period = std::max(2.0, side / 8.0) + static_cast<double>(rng.uniform_below(3));
  const double phase = uniform(rng, 0.0, 2.0 * period);
  const double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const double thickness = uniform(rng, 0.08, 0.15) * side;

  Image im(ImageShape{spec.side, spec.side, spec.channels});
  for (int y = 0; y < spec.side; ++y) {
    for (int x = 0; x < spec.side; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      const double dx = px - cx, dy = py - cy;
      double m = 0.0;
      switch (family) {
        case 0: m = std::hypot(dx, dy) <= size ? 1.0 : 0.0; break;
        case 1: m = (std::abs(dx) <= size && std::abs(dy) <= size * aspect) ? 1.0 : 0.0; break;
        case 2: m = parity((py + phase) / period); break;
        case 3: m = parity((px + phase) / period); break;
        case 4:
          m = std::clamp(0.5 + (dx * std::cos(angle) + dy * std::sin(angle)) / (2.0 * size), 0.0, 1.0);
          break;
        case 5: m = parity((px + phase) / period) ^ parity((py + phase) / period); break;
        case 6: m = std::abs(std::hypot(dx, dy) - size) <= 0.5 * thickness ? 1.0 : 0.0; break;
        default: m = parity((px + py + phase) / period); break;
      }
      const double rgb[3] = {bg.r + m * (fg.r - bg.r), bg.g + m * (fg.g - bg.g), bg.b + m * (fg.b - bg.b)};
      if (spec.channels == 3) {
        for (int c = 0; c < 3; ++c)
          im.at(y, x, c) = static_cast<float>(std::clamp(rgb[c] + spec.noise * uniform(rng, -1.0, 1.0), 0.0, 1.0));
      } else {
        const double lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
        im.at(y, x, 0) = static_cast<float>(std::clamp(lum + spec.noise * uniform(rng, -1.0, 1.0), 0.0, 1.0));
      }
    }
  }
  return im;
}

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

void SyntheticSpec::validate() const {
  if (side < 1) throw std::invalid_argument("dataset side must be positive");
  if (channels != 1 && channels != 3) throw std::invalid_argument("dataset channels must be 1 or 3");
  if (num_classes < 2) throw std::invalid_argument("dataset needs at least 2 classes");
  if (per_class < 1) throw std::invalid_argument("dataset per_class must be positive");
  if (!(scale_min > 0.0 && scale_min <= scale_max)) throw std::invalid_argument("dataset scale range is invalid");
  if (!(noise >= 0.0) || !(hue_jitter >= 0.0)) throw std::invalid_argument("dataset noise/jitter must be >= 0");
}

LabeledImages generate(const SyntheticSpec& spec) {
  spec.validate();
  LabeledImages out;
  out.images.reserve(spec.total());
  for (int c = 0; c < spec.num_classes; ++c) {
    for (int i = 0; i < spec.per_class; ++i) {
      out.images.push_back(render(spec, c, i));
      out.labels.push_back(c);
    }
  }
  return out;
}

Image quantize_8bit(const Image& image) {
  Image out = image;
  for (float& v : out.pixels) v = static_cast<float>(to_byte(v)) / 255.0f;
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.shape.channels != 1 && image.shape.channels != 3)
    throw std::invalid_argument("PNG export supports 1 or 3 channels");
  std::vector<std::uint8_t> bytes(image.pixels.size());
  std::transform(image.pixels.begin(), image.pixels.end(), bytes.begin(), to_byte);
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.shape.width);
  png.height = static_cast<png_uint_32>(image.shape.height);
  png.format = image.shape.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr))
    throw InputError("cannot write PNG " + path.string() + ": " + png.message);
}

Image read_png(const std::filesystem::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str()))
    throw InputError("cannot read PNG " + path.string() + ": " + png.message);
  const bool color = (png.format & PNG_FORMAT_FLAG_COLOR) != 0;
  png.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr))
    throw InputError("cannot decode PNG " + path.string() + ": " + png.message);
  Image im(ImageShape{static_cast<int>(png.height), static_cast<int>(png.width), color ? 3 : 1});
  for (std::size_t i = 0; i < bytes.size(); ++i) im.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  return im;
}

Json save_images(const std::filesystem::path& dir, const LabeledImages& set, const SyntheticSpec& spec) {
  if (set.images.size() != set.labels.size()) throw std::invalid_argument("image/label count mismatch");
  std::filesystem::create_directories(dir);
  Json files = Json::array();
  std::vector<int> per_label_index;
  for (std::size_t i = 0; i < set.images.size(); ++i) {
    const int label = set.labels[i];
    if (label < 0) throw std::invalid_argument("negative label");
    if (per_label_index.size() <= static_cast<std::size_t>(label)) per_label_index.resize(label + 1, 0);
    const std::string name =
        "class_" + std::to_string(label) + "_idx_" + std::to_string(per_label_index[label]++) + ".png";
    write_png(dir / name, set.images[i]);
    files.push_back({{"file", name}, {"label", label}, {"hash", git_blob_hash_file(dir / name)}});
  }
  Json manifest{{"version", kDatasetManifestVersion}, {"spec", spec}, {"files", files}};
  std::ofstream os(dir / "manifest.json");
  if (!os) throw InputError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
  return manifest;
}

LabeledImages load_images(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw InputError("missing dataset manifest: " + manifest_path.string());
  Json manifest;
  try {
    manifest = Json::parse(read_file(manifest_path));
  } catch (const Json::exception& e) {
    throw InputError("corrupt dataset manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!manifest.contains("files") || !manifest["files"].is_array())
    throw InputError("dataset manifest " + manifest_path.string() + " has no file list");

  LabeledImages out;
  for (const Json& entry : manifest["files"]) {
    if (!entry.contains("file") || !entry.contains("label"))
      throw InputError("dataset manifest entry without file/label in " + manifest_path.string());
    const auto path = dir / entry["file"].get<std::string>();
    if (!std::filesystem::exists(path)) throw InputError("dataset file listed in manifest is missing: " + path.string());
    if (entry.contains("hash")) {
      const std::string actual = git_blob_hash_file(path);
      if (actual != entry["hash"].get<std::string>())
        throw InputError("hash mismatch for " + path.string() + ": manifest " + entry["hash"].get<std::string>() +
                         ", file " + actual);
    }
    out.images.push_back(read_png(path));
    out.labels.push_back(entry["label"].get<int>());
    if (out.images.back().shape != out.images.front().shape)
      throw InputError("dataset image " + path.string() + " has a different shape");
  }
  return out;
}

void to_json(Json& j, const SyntheticSpec& s) {
  j = Json{{"side", s.side},           {"channels", s.channels},   {"num_classes", s.num_classes},
           {"per_class", s.per_class}, {"seed", s.seed},           {"scale_min", s.scale_min},
           {"scale_max", s.scale_max}, {"hue_jitter", s.hue_jitter}, {"noise", s.noise}};
}

void from_json(const Json& j, SyntheticSpec& s) {
  const std::string ctx = "dataset";
  require_known_keys(j, {"side", "channels", "num_classes", "per_class", "seed", "scale_min", "scale_max",
                         "hue_jitter", "noise"},
                     ctx);
  s.side = get_or<int>(j, "side", s.side, ctx);
  s.channels = get_or<int>(j, "channels", s.channels, ctx);
  s.num_classes = get_or<int>(j, "num_classes", s.num_classes, ctx);
  s.per_class = get_or<int>(j, "per_class", s.per_class, ctx);
  s.seed = get_or<std::uint64_t>(j, "seed", s.seed, ctx);
  s.scale_min = get_or<double>(j, "scale_min", s.scale_min, ctx);
  s.scale_max = get_or<double>(j, "scale_max", s.scale_max, ctx);
  s.hue_jitter = get_or<double>(j, "hue_jitter", s.hue_jitter, ctx);
  s.noise = get_or<double>(j, "noise", s.noise, ctx);
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
}

}  // namespace robustlat
