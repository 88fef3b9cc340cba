#include "distillscope/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numbers>
#include <set>

#include "distillscope/borders.hpp"
#include "distillscope/image_io.hpp"
#include "distillscope/rng.hpp"

namespace distillscope {
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

std::uint32_t be32(const std::string& s, std::size_t off) {
  auto b = [&](std::size_t i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(s[off + i])); };
  return (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
}

}  // namespace

std::vector<Sample> load_idx(const fs::path& images_path, const fs::path& labels_path) {
  const std::string img = read_file(images_path);
  const std::string lab = read_file(labels_path);
  if (img.size() < 4) throw IdxTruncatedError("IDX image file truncated: " + images_path.string());
  if (be32(img, 0) != 0x00000803) throw IdxMagicError("bad IDX image magic in " + images_path.string());
  if (img.size() < 16) throw IdxTruncatedError("IDX image header truncated: " + images_path.string());
  if (lab.size() < 4) throw IdxTruncatedError("IDX label file truncated: " + labels_path.string());
  if (be32(lab, 0) != 0x00000801) throw IdxMagicError("bad IDX label magic in " + labels_path.string());
  if (lab.size() < 8) throw IdxTruncatedError("IDX label header truncated: " + labels_path.string());

  const std::size_t n = be32(img, 4), rows = be32(img, 8), cols = be32(img, 12);
  const std::size_t n_labels = be32(lab, 4);
  if (rows == 0 || cols == 0) throw DataError("IDX images have zero extent: " + images_path.string());
  if (img.size() < 16 + n * rows * cols)
    throw IdxTruncatedError("IDX image data truncated: expected " + std::to_string(n * rows * cols) + " bytes in " +
                            images_path.string());
  if (lab.size() < 8 + n_labels) throw IdxTruncatedError("IDX label data truncated: " + labels_path.string());
  if (n != n_labels)
    throw IdxCountMismatchError(std::to_string(n) + " images but " + std::to_string(n_labels) + " labels");

  const std::string stem = images_path.filename().string();
  std::vector<Sample> out;
  out.reserve(n);
  const std::size_t per = rows * cols;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    char idbuf[32];
    std::snprintf(idbuf, sizeof idbuf, "/%05zu", i);
    s.id = stem + idbuf;
    std::vector<float> px(per);
    for (std::size_t p = 0; p < per; ++p)
      px[p] = static_cast<float>(static_cast<unsigned char>(img[16 + i * per + p])) / 255.0f;
    s.image = Tensor<float>(Shape{1, rows, cols}, std::move(px));
    s.label = static_cast<unsigned char>(lab[8 + i]);
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

std::vector<fs::path> sorted_images(const fs::path& dir) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
  std::vector<fs::path> dirs;
  if (!fs::is_directory(dir)) return dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

Tensor<float> mask_from_image(const Tensor<float>& img) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  Tensor<float> m(Shape{h, w});
  for (std::size_t i = 0; i < h * w; ++i) m[i] = img[i] > 0.5f ? 1.0f : 0.0f;
  return m;
}

}  // namespace

FolderDataset load_folder(const fs::path& root, bool with_masks) {
  if (!fs::is_directory(root)) throw DataError("dataset root not found: " + root.string());
  FolderDataset ds;
  for (const auto& cat : sorted_subdirs(root / "train"))
    for (const auto& f : sorted_images(cat)) {
      Sample s;
      s.id = fs::relative(f, root).generic_string();
      s.image = read_image(f);
      s.label = 0;
      s.anomalous = false;
      ds.train.push_back(std::move(s));
    }

  std::set<std::string> paired_masks;
  for (const auto& cat : sorted_subdirs(root / "test")) {
    const std::string category = cat.filename().string();
    const bool good = category == "good";
    std::map<std::string, fs::path> masks;
    if (with_masks && !good)
      for (const auto& m : sorted_images(root / "ground_truth" / category)) masks[m.stem().string()] = m;
    for (const auto& f : sorted_images(cat)) {
      Sample s;
      s.id = fs::relative(f, root).generic_string();
      s.image = read_image(f);
      s.label = good ? 0 : 1;
      s.anomalous = !good;
      const std::string stem = f.stem().string();
      if (with_masks) {
        const std::size_t h = s.image.dim(1), w = s.image.dim(2);
        auto it = masks.find(stem + "_mask");
        if (it == masks.end()) it = masks.find(stem);
        if (it != masks.end()) {
          Tensor<float> m = mask_from_image(read_image(it->second));
          if (m.dim(0) != h || m.dim(1) != w)
            throw MaskPairingError("mask size " + shape_string(m.shape()) + " differs from image size for stem '" +
                                   category + "/" + stem + "'");
          s.mask = std::move(m);
          paired_masks.insert(it->second.string());
        } else if (good) {
          s.mask = Tensor<float>(Shape{h, w}, 0.0f);
        }
      }
      ds.test.push_back(std::move(s));
    }
    for (const auto& [stem, path] : masks)
      if (!paired_masks.contains(path.string()))
        throw MaskPairingError("mask without image: " + fs::relative(path, root).generic_string());
  }
  return ds;
}

Split make_one_class_split(std::span<const Sample> train, std::span<const Sample> test, const SplitSpec& spec) {
  if (spec.mode != SplitMode::OneClass) throw ParameterError("make_one_class_split requires ONE_CLASS mode");
  if (!spec.normal_class) throw ParameterError("ONE_CLASS split needs normal_class");
  const int normal = *spec.normal_class;
  Split out;
  for (const auto& s : train)
    if (s.label == normal) out.train.push_back(s);
  if (out.train.empty())
    throw DataError("normal class " + std::to_string(normal) + " does not occur in the training data");
  out.test.reserve(test.size());
  for (const auto& s : test) {
    Sample t = s;
    t.anomalous = s.label != normal;
    out.test.push_back(std::move(t));
  }
  return out;
}

Tensor<float> resize_bilinear(const Tensor<float>& image, std::size_t height, std::size_t width) {
  if (image.rank() != 3) throw DimensionError("resize expects [C,H,W], got " + shape_string(image.shape()));
  if (height == 0 || width == 0) throw ParameterError("resize target must be at least 1x1");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  Tensor<float> out(Shape{C, height, width});
  const double sy = static_cast<double>(H) / height, sx = static_cast<double>(W) / width;
  for (std::size_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy), y1 = std::min(y0 + 1, H - 1);
    const double wy = fy - y0;
    for (std::size_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx), x1 = std::min(x0 + 1, W - 1);
      const double wx = fx - x0;
      for (std::size_t c = 0; c < C; ++c) {
        const float* p = image.raw() + c * H * W;
        const double top = p[y0 * W + x0] * (1 - wx) + p[y0 * W + x1] * wx;
        const double bot = p[y1 * W + x0] * (1 - wx) + p[y1 * W + x1] * wx;
        out[(c * height + y) * width + x] = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

Tensor<float> resize_nearest(const Tensor<float>& map, std::size_t height, std::size_t width) {
  if (map.rank() != 2) throw DimensionError("mask resize expects [H,W], got " + shape_string(map.shape()));
  const std::size_t H = map.dim(0), W = map.dim(1);
  Tensor<float> out(Shape{height, width});
  for (std::size_t y = 0; y < height; ++y) {
    const std::size_t sy = std::min(H - 1, static_cast<std::size_t>((y + 0.5) * H / height));
    for (std::size_t x = 0; x < width; ++x) {
      const std::size_t sx = std::min(W - 1, static_cast<std::size_t>((x + 0.5) * W / width));
      out[y * width + x] = map[sy * W + sx];
    }
  }
  return out;
}

Sample preprocess(const Sample& sample, const SplitSpec& spec) {
  Sample out = sample;
  if (spec.resize_to) {
    const auto [h, w] = *spec.resize_to;
    if (h == 0 || w == 0) throw ParameterError("resize_to must be at least 1x1");
    if (out.image.dim(1) != h || out.image.dim(2) != w) {
      out.image = resize_bilinear(out.image, h, w);
      if (out.mask) out.mask = resize_nearest(*out.mask, h, w);
    }
  }
  if (spec.normalization) {
    const auto& n = *spec.normalization;
    const std::size_t C = out.image.dim(0), plane = out.image.dim(1) * out.image.dim(2);
    auto pick = [C](const std::vector<float>& v, std::size_t c, const char* what) {
      if (v.size() == 1) return v[0];
      if (v.size() != C)
        throw ParameterError(std::string("normalization ") + what + " needs 1 or " + std::to_string(C) + " values");
      return v[c];
    };
    for (std::size_t c = 0; c < C; ++c) {
      const float mean = pick(n.mean, c, "mean"), sd = pick(n.std, c, "std");
      if (!(sd > 0.0f)) throw ParameterError("normalization std must be positive");
      for (std::size_t i = 0; i < plane; ++i) out.image[c * plane + i] = (out.image[c * plane + i] - mean) / sd;
    }
  }
  return out;
}

AugmentParams draw_augment_params(std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xa09e667f3bcc908bULL));
  AugmentParams p;
  p.angle_deg = rng.uniform(-kMaxRotationDeg, kMaxRotationDeg);
  p.scale = rng.uniform(kMinScale, kMaxScale);
  return p;
}

Sample apply_augmentation(const Sample& sample, const AugmentParams& params) {
  const Tensor<float>& img = sample.image;
  if (img.rank() != 3) throw DimensionError("augment expects [C,H,W], got " + shape_string(img.shape()));
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const double theta = params.angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
  const long h = static_cast<long>(H), w = static_cast<long>(W);

  Sample out = sample;
  Tensor<float> mask_out;
  if (sample.mask) mask_out = Tensor<float>(sample.mask->shape());
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      // inverse map: output pixel -> source location
      const double dx = x - cx, dy = y - cy;
      const double sx = (cs * dx + sn * dy) / params.scale + cx;
      const double sy = (-sn * dx + cs * dy) / params.scale + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double ax = sx - fx, ay = sy - fy;
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      const long rx0 = reflect_index(x0, w), rx1 = reflect_index(x0 + 1, w);
      const long ry0 = reflect_index(y0, h), ry1 = reflect_index(y0 + 1, h);
      for (std::size_t c = 0; c < C; ++c) {
        const float* p = img.raw() + c * H * W;
        const double v = (p[ry0 * w + rx0] * (1 - ax) + p[ry0 * w + rx1] * ax) * (1 - ay) +
                         (p[ry1 * w + rx0] * (1 - ax) + p[ry1 * w + rx1] * ax) * ay;
        out.image[(c * H + y) * W + x] = static_cast<float>(v);
      }
      if (sample.mask) {
        const long nx = reflect_index(std::lround(sx), w), ny = reflect_index(std::lround(sy), h);
        mask_out[y * W + x] = (*sample.mask)[ny * w + nx];
      }
    }
  if (sample.mask) out.mask = std::move(mask_out);
  return out;
}

Sample augment(const Sample& sample, std::uint64_t seed) {
  return apply_augmentation(sample, draw_augment_params(seed));
}

Tensor<float> batch_images(std::span<const Sample> samples) {
  std::vector<const Tensor<float>*> items;
  items.reserve(samples.size());
  for (const auto& s : samples) items.push_back(&s.image);
  return stack_batch<float>(items);
}

Tensor<float> batch_images(std::span<const Sample> samples, std::span<const std::size_t> indices) {
  std::vector<const Tensor<float>*> items;
  items.reserve(indices.size());
  for (auto i : indices) items.push_back(&samples[i].image);
  return stack_batch<float>(items);
}

std::vector<Sample> make_square_defects(std::span<const Sample> normals, std::size_t count, std::size_t size,
                                        float value, std::uint64_t seed) {
  if (normals.empty()) throw DataError("no normal samples to paste defects on");
  Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Sample& base = normals[i % normals.size()];
    const std::size_t C = base.image.dim(0), H = base.image.dim(1), W = base.image.dim(2);
    if (size == 0 || size > H || size > W) throw ParameterError("defect size does not fit the image");
    const std::size_t y0 = rng.below(H - size + 1), x0 = rng.below(W - size + 1);
    Sample s = base;
    s.id = base.id + "+square" + std::to_string(i);
    s.anomalous = true;
    Tensor<float> mask(Shape{H, W}, 0.0f);
    for (std::size_t y = y0; y < y0 + size; ++y)
      for (std::size_t x = x0; x < x0 + size; ++x) {
        mask[y * W + x] = 1.0f;
        for (std::size_t c = 0; c < C; ++c) s.image[(c * H + y) * W + x] = value;
      }
    s.mask = std::move(mask);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace distillscope
