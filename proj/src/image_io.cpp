#include "distillscope/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iterator>
#include <sstream>

#include "distillscope/errors.hpp"

namespace distillscope {
namespace {

std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageReadError("cannot open image " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

// Netpbm header token, skipping whitespace and '#' comments.
std::string next_token(const std::string& s, std::size_t& pos) {
  while (pos < s.size()) {
    if (std::isspace(static_cast<unsigned char>(s[pos]))) {
      ++pos;
    } else if (s[pos] == '#') {
      while (pos < s.size() && s[pos] != '\n') ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  while (pos < s.size() && !std::isspace(static_cast<unsigned char>(s[pos])) && s[pos] != '#') ++pos;
  return s.substr(start, pos - start);
}

Tensor<float> read_pnm(const std::filesystem::path& path) {
  const std::string s = read_all(path);
  std::size_t pos = 0;
  const std::string magic = next_token(s, pos);
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6")
    throw ImageReadError("unsupported netpbm variant in " + path.string());
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(next_token(s, pos));
    h = std::stoul(next_token(s, pos));
    maxval = std::stoul(next_token(s, pos));
  } catch (const std::exception&) {
    throw ImageReadError("malformed netpbm header in " + path.string());
  }
  if (w == 0 || h == 0 || maxval == 0 || maxval > 65535) throw ImageReadError("bad netpbm header in " + path.string());
  const std::size_t channels = (magic == "P3" || magic == "P6") ? 3 : 1;
  Tensor<float> img(Shape{channels, h, w});
  const std::size_t count = channels * h * w;
  std::vector<std::size_t> raw(count);
  if (magic == "P2" || magic == "P3") {
    for (auto& v : raw) {
      const std::string tok = next_token(s, pos);
      if (tok.empty()) throw ImageReadError("truncated pixel data in " + path.string());
      v = std::stoul(tok);
    }
  } else {
    ++pos;  // single whitespace after maxval
    const std::size_t bytes = maxval > 255 ? 2 : 1;
    if (s.size() < pos + count * bytes) throw ImageReadError("truncated pixel data in " + path.string());
    for (std::size_t i = 0; i < count; ++i) {
      const auto* p = reinterpret_cast<const unsigned char*>(s.data() + pos + i * bytes);
      raw[i] = bytes == 2 ? (static_cast<std::size_t>(p[0]) << 8) | p[1] : p[0];
    }
  }
  // interleaved -> planar
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        img[(c * h + y) * w + x] =
            static_cast<float>(std::min(raw[(y * w + x) * channels + c], maxval)) / static_cast<float>(maxval);
  return img;
}

Tensor<float> read_png(const std::filesystem::path& path) {
  const std::string bytes = read_all(path);
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw ImageReadError("cannot decode PNG " + path.string() + ": " + image.message);
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t channels = color ? 3 : 1;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ImageReadError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  const std::size_t h = image.height, w = image.width;
  Tensor<float> img(Shape{channels, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c)
        img[(c * h + y) * w + x] = static_cast<float>(buf[(y * w + x) * channels + c]) / 255.0f;
  return img;
}

}  // namespace

bool is_image_file(const std::filesystem::path& path) {
  const std::string e = lower_ext(path);
  return e == ".png" || e == ".pgm" || e == ".ppm" || e == ".pnm";
}

Tensor<float> read_image(const std::filesystem::path& path) {
  const std::string e = lower_ext(path);
  if (e == ".png") return read_png(path);
  if (e == ".pgm" || e == ".ppm" || e == ".pnm") return read_pnm(path);
  throw ImageReadError("unsupported image format: " + path.string());
}

std::vector<std::uint8_t> to_gray8(const Tensor<float>& map) {
  if (map.rank() != 2) throw DimensionError("heatmap must be [H,W], got " + shape_string(map.shape()));
  const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
  const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
  std::vector<std::uint8_t> out(map.numel(), 0);
  if (range > 0.0)
    for (std::size_t i = 0; i < map.numel(); ++i)
      out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (map[i] - *lo) / range));
  return out;
}

void write_pgm(const std::filesystem::path& path, const Tensor<float>& map) {
  const auto pixels = to_gray8(map);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  f.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
}

void write_pnm(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    throw DimensionError("write_pnm needs [1|3,H,W], got " + shape_string(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << (c == 1 ? "P5\n" : "P6\n") << w << ' ' << h << "\n255\n";
  std::vector<std::uint8_t> bytes(c * h * w);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t k = 0; k < c; ++k) {
        const float v = std::clamp(image[(k * h + y) * w + x], 0.0f, 1.0f);
        bytes[(y * w + x) * c + k] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace distillscope
