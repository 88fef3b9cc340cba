#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>

#include "distillscope/data.hpp"
#include "distillscope/errors.hpp"
#include "distillscope/image_io.hpp"
#include "test_support.hpp"

using namespace distillscope;
namespace fs = std::filesystem;

namespace {

std::string be32(std::uint32_t v) {
  return {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8), static_cast<char>(v)};
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  fs::create_directories(p.parent_path());
  std::ofstream(p, std::ios::binary) << bytes;
}

// Two 2x3 images and their labels.
std::string idx_images() {
  std::string b = be32(0x00000803) + be32(2) + be32(2) + be32(3);
  for (unsigned char v : {0, 51, 102, 153, 204, 255, 255, 0, 255, 0, 255, 0}) b.push_back(static_cast<char>(v));
  return b;
}
std::string idx_labels() { return be32(0x00000801) + be32(2) + std::string{7, 3}; }

void write_gray(const fs::path& p, std::size_t h, std::size_t w, float value) {
  fs::create_directories(p.parent_path());
  write_pnm(p, Tensor<float>(Shape{1, h, w}, value));
}

Sample labeled(int label, float value) {
  Sample s;
  s.id = "l" + std::to_string(label) + "_" + std::to_string(value);
  s.image = Tensor<float>(Shape{1, 4, 4}, value);
  s.label = label;
  return s;
}

}  // namespace

TEST_CASE("load_idx reads a hand-built fixture") {
  const auto dir = testing::scratch_dir("idx");
  write_bytes(dir / "img", idx_images());
  write_bytes(dir / "lab", idx_labels());
  const auto s = load_idx(dir / "img", dir / "lab");
  REQUIRE(s.size() == 2);
  CHECK(s[0].image.shape() == Shape{1, 2, 3});
  CHECK(s[0].label == 7);
  CHECK(s[1].label == 3);
  CHECK(s[0].image[0] == 0.0f);
  CHECK(s[0].image[1] == doctest::Approx(0.2f));
  CHECK(s[0].image[5] == 1.0f);
  CHECK(s[1].image[0] == 1.0f);
  CHECK(s[1].image[1] == 0.0f);
  CHECK(s[0].id != s[1].id);
}

TEST_CASE("load_idx errors are distinct") {
  const auto dir = testing::scratch_dir("idx_err");
  write_bytes(dir / "lab", idx_labels());
  std::string bad = idx_images();
  bad[3] = 0x01;
  write_bytes(dir / "magic", bad);
  CHECK_THROWS_AS(load_idx(dir / "magic", dir / "lab"), IdxMagicError);
  write_bytes(dir / "short", idx_images().substr(0, 20));
  CHECK_THROWS_AS(load_idx(dir / "short", dir / "lab"), IdxTruncatedError);
  write_bytes(dir / "img", idx_images());
  write_bytes(dir / "lab3", be32(0x00000801) + be32(3) + std::string{1, 2, 3});
  CHECK_THROWS_AS(load_idx(dir / "img", dir / "lab3"), IdxCountMismatchError);
  CHECK_THROWS_AS(load_idx(dir / "missing", dir / "lab"), DataError);
}

TEST_CASE("load_folder: good and defect images with masks") {
  const auto root = testing::scratch_dir("folder");
  write_gray(root / "train/good/a.pgm", 4, 5, 0.5f);
  write_gray(root / "train/good/b.pgm", 4, 5, 0.25f);
  write_gray(root / "test/good/c.pgm", 4, 5, 0.5f);
  write_gray(root / "test/crack/d.pgm", 4, 5, 0.75f);
  write_gray(root / "ground_truth/crack/d_mask.pgm", 4, 5, 1.0f);
  const auto ds = load_folder(root, true);
  REQUIRE(ds.train.size() == 2);
  CHECK(ds.train[0].id == "train/good/a.pgm");
  CHECK(ds.train[0].image.shape() == Shape{1, 4, 5});
  CHECK(ds.train[1].image[0] == doctest::Approx(0.25f).epsilon(0.01));
  REQUIRE(ds.test.size() == 2);
  std::size_t anomalous = 0;
  for (const auto& s : ds.test) {
    if (*s.anomalous) {
      ++anomalous;
      REQUIRE(s.mask.has_value());
      CHECK(s.mask->shape() == Shape{4, 5});
      CHECK((*s.mask)[0] == 1.0f);
    }
  }
  CHECK(anomalous == 1);
}

TEST_CASE("load_folder: empty test directory and pairing errors") {
  const auto root = testing::scratch_dir("folder_empty");
  write_gray(root / "train/good/a.pgm", 4, 4, 0.5f);
  fs::create_directories(root / "test");
  CHECK(load_folder(root, true).test.empty());

  write_gray(root / "test/hole/x.pgm", 4, 4, 0.5f);
  write_gray(root / "ground_truth/hole/x_mask.pgm", 3, 4, 1.0f);
  try {
    load_folder(root, true);
    FAIL("expected a pairing error");
  } catch (const MaskPairingError& e) {
    CHECK(std::string(e.what()).find("hole/x") != std::string::npos);
  }
  write_gray(root / "ground_truth/hole/x_mask.pgm", 4, 4, 1.0f);
  write_gray(root / "ground_truth/hole/orphan_mask.pgm", 4, 4, 1.0f);
  CHECK_THROWS_AS(load_folder(root, true), MaskPairingError);
  CHECK_THROWS_AS(load_folder(root / "nope", true), DataError);
}

TEST_CASE("one-class split") {
  const std::vector<Sample> train{labeled(0, 0.1f), labeled(1, 0.2f), labeled(0, 0.3f), labeled(2, 0.4f)};
  const std::vector<Sample> test{labeled(0, 0.5f), labeled(2, 0.6f), labeled(1, 0.7f)};
  for (int normal : {0, 1, 2}) {
    SplitSpec spec;
    spec.normal_class = normal;
    const Split split = make_one_class_split(train, test, spec);
    for (const auto& s : split.train) CHECK(s.label == normal);
    CHECK(split.test.size() == test.size());
    for (const auto& s : split.test) CHECK(*s.anomalous == (s.label != normal));
  }
  SplitSpec missing;
  missing.normal_class = 9;
  CHECK_THROWS_AS(make_one_class_split(train, test, missing), DataError);
  CHECK_THROWS_AS(make_one_class_split(train, test, SplitSpec{}), ParameterError);
}

TEST_CASE("preprocess: identity, mean/std and nearest masks") {
  Sample s = labeled(0, 0.4f);
  s.image = testing::random_tensor<float>(Shape{1, 4, 4}, 3, 0.0, 1.0);
  CHECK(preprocess(s, SplitSpec{}).image == s.image);

  Sample flat = labeled(0, 0.4f);
  SplitSpec norm;
  norm.normalization = Normalization{{0.4f}, {1.0f}};
  const Sample centred = preprocess(flat, norm);
  for (float v : centred.image.data()) CHECK(v == 0.0f);

  Sample masked = labeled(0, 0.4f);
  masked.mask = Tensor<float>(Shape{4, 4}, std::vector<float>{1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  SplitSpec resize;
  resize.resize_to = std::pair<std::size_t, std::size_t>{8, 8};
  const Sample big = preprocess(masked, resize);
  CHECK(big.image.shape() == Shape{1, 8, 8});
  REQUIRE(big.mask.has_value());
  for (float v : big.mask->data()) CHECK((v == 0.0f || v == 1.0f));
  CHECK((*big.mask)[0] == 1.0f);
  CHECK((*big.mask)[3 * 8 + 3] == 1.0f);
  CHECK((*big.mask)[4 * 8 + 4] == 0.0f);
}

TEST_CASE("bilinear 2x2 to 4x4 on a ramp") {
  const Tensor<float> ramp(Shape{1, 2, 2}, std::vector<float>{0, 1, 2, 3});
  const auto out = resize_bilinear(ramp, 4, 4);
  // half-pixel centres sample at -0.25, 0.25, 0.75, 1.25, clamped to the edge
  const double a[4] = {0.0, 0.25, 0.75, 1.0};
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) CHECK(out[y * 4 + x] == doctest::Approx(2 * a[y] + a[x]).epsilon(1e-6));
}

TEST_CASE("augmentation: identity parameters, determinism, ranges") {
  Sample s = labeled(0, 0.0f);
  s.image = testing::random_tensor<float>(Shape{1, 12, 12}, 4, 0.0, 1.0);
  const Sample same = apply_augmentation(s, AugmentParams{0.0, 1.0});
  for (std::size_t i = 0; i < s.image.numel(); ++i) CHECK(same.image[i] == doctest::Approx(s.image[i]).epsilon(1e-6));
  CHECK(augment(s, 9).image == augment(s, 9).image);
  CHECK_FALSE(augment(s, 9).image == augment(s, 10).image);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto p = draw_augment_params(seed);
    CHECK(std::abs(p.angle_deg) <= kMaxRotationDeg);
    CHECK(p.scale >= kMinScale);
    CHECK(p.scale <= kMaxScale);
  }
}

TEST_CASE("augmentation: rotating forth and back recovers a symmetric pattern") {
  Sample s = labeled(0, 0.0f);
  s.image = Tensor<float>(Shape{1, 28, 28});
  for (std::size_t y = 0; y < 28; ++y)
    for (std::size_t x = 0; x < 28; ++x) {
      const double dy = double(y) - 13.5, dx = double(x) - 13.5;
      // plus-shaped, invariant under quarter turns
      s.image[y * 28 + x] = static_cast<float>(std::exp(-dx * dx / 8.0) * std::exp(-dy * dy / 60.0) +
                                               std::exp(-dy * dy / 8.0) * std::exp(-dx * dx / 60.0));
    }
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const double angle = draw_augment_params(seed).angle_deg;
    const Sample back = apply_augmentation(apply_augmentation(s, {angle, 1.0}), {-angle, 1.0});
    double err = 0.0;
    for (std::size_t i = 0; i < s.image.numel(); ++i) err += std::abs(back.image[i] - s.image[i]);
    CHECK(err / s.image.numel() < 1e-2);
  }
}

TEST_CASE("batch_images stacks samples") {
  const std::vector<Sample> s{labeled(0, 0.1f), labeled(1, 0.2f)};
  const auto b = batch_images(s);
  CHECK(b.shape() == Shape{2, 1, 4, 4});
  CHECK(b[16] == 0.2f);
  const std::vector<std::size_t> idx{1};
  CHECK(batch_images(s, idx).shape() == Shape{1, 1, 4, 4});
}

TEST_CASE("square defects paste a seeded square with a matching mask") {
  const std::vector<Sample> normals{labeled(8, 0.0f), labeled(8, 0.1f)};
  std::vector<Sample> big;
  for (const auto& n : normals) {
    Sample b = n;
    b.image = Tensor<float>(Shape{1, 12, 12}, 0.1f);
    big.push_back(b);
  }
  const auto d = make_square_defects(big, 5, 4, 1.0f, 3);
  REQUIRE(d.size() == 5);
  for (const auto& s : d) {
    REQUIRE(s.mask.has_value());
    CHECK(*s.anomalous);
    std::size_t on = 0;
    for (std::size_t i = 0; i < 144; ++i) {
      if ((*s.mask)[i] > 0.5f) {
        ++on;
        CHECK(s.image[i] == 1.0f);
      } else {
        CHECK(s.image[i] == 0.1f);
      }
    }
    CHECK(on == 16);
  }
  const auto again = make_square_defects(big, 5, 4, 1.0f, 3);
  for (std::size_t i = 0; i < d.size(); ++i) CHECK(again[i].image == d[i].image);
}

TEST_CASE("image io round trip and heatmap scaling") {
  const auto dir = testing::scratch_dir("imgio");
  const Tensor<float> img(Shape{1, 2, 3}, std::vector<float>{0, 0.2f, 0.4f, 0.6f, 0.8f, 1});
  write_pnm(dir / "a.pgm", img);
  const auto back = read_image(dir / "a.pgm");
  for (std::size_t i = 0; i < 6; ++i) CHECK(back[i] == doctest::Approx(img[i]).epsilon(0.01));
  const auto g = to_gray8(Tensor<float>(Shape{1, 3}, std::vector<float>{2, 4, 3}));
  CHECK(g == std::vector<std::uint8_t>{0, 255, 128});
  CHECK_THROWS_AS(read_image(dir / "missing.pgm"), ImageReadError);
}
