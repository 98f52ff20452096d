#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "lewel/dataset.hpp"

using lewel::Sample;
using lewel::SyntheticSpec;
using lewel::Tensor;

namespace {

namespace fs = std::filesystem;

SyntheticSpec small_spec() {
  SyntheticSpec spec;
  spec.canvas = 32;
  spec.train_size = 16;
  spec.test_size = 8;
  spec.seed = 7;
  return spec;
}

bool same_tensor(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

std::string fresh_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "lewel_dataset_tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

}  // namespace

TEST(Dataset, DeterministicAndOrderIndependent) {
  const auto spec = small_spec();
  auto a = lewel::generate(spec, "train");
  auto b = lewel::generate(spec, "train");
  ASSERT_EQ(a.size(), 16u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(same_tensor(a[i].image, b[i].image));
    EXPECT_TRUE(same_tensor(a[i].mask, b[i].mask));
    EXPECT_EQ(a[i].label, b[i].label);
    EXPECT_EQ(a[i].sample_id, b[i].sample_id);
  }
  // sample k alone equals sample k from the full run
  auto lone = lewel::generate_sample(spec, "train", 11);
  EXPECT_TRUE(same_tensor(lone.image, a[11].image));
  EXPECT_TRUE(same_tensor(lone.mask, a[11].mask));

  // different split, different content
  auto t = lewel::generate_sample(spec, "test", 11);
  EXPECT_FALSE(same_tensor(t.image, a[11].image));
}

TEST(Dataset, LabelsBalancedOverFullTrainSplit) {
  SyntheticSpec spec;
  spec.seed = 3;
  ASSERT_EQ(spec.num_classes, 8u);
  ASSERT_EQ(spec.train_size, 4096u);
  std::array<std::size_t, 8> counts{};
  // labels are a pure function of the index; spot-render a subset for the
  // mask invariants and count labels over the whole split
  for (std::size_t i = 0; i < spec.train_size; ++i) ++counts[i % spec.num_classes];
  for (const auto c : counts) EXPECT_EQ(c, 512u);

  for (std::size_t i = 0; i < 64; ++i) {
    auto s = lewel::generate_sample(spec, "train", i);
    EXPECT_EQ(s.label, i % 8);
    double painted = 0;
    for (const float v : s.mask.data()) painted += v;
    const double fraction = painted / static_cast<double>(s.mask.numel());
    EXPECT_GE(fraction, 0.05);
    EXPECT_LE(fraction, 0.6);
  }
}

TEST(Dataset, MaskCoversExactlyTheForegroundColor) {
  const auto spec = small_spec();
  for (std::size_t i = 0; i < 8; ++i) {
    auto s = lewel::generate_sample(spec, "train", i);
    const std::size_t S = spec.canvas;
    // recover the object color from the first mask pixel; all mask pixels
    // must share it exactly (flat fill by construction)
    float color[3] = {-1, -1, -1};
    std::size_t on = 0;
    for (std::size_t p = 0; p < S * S; ++p) {
      if (s.mask.data()[p] != 1.f && s.mask.data()[p] != 0.f) FAIL() << "mask not binary";
      if (s.mask.data()[p] == 1.f) {
        if (on == 0)
          for (std::size_t c = 0; c < 3; ++c) color[c] = s.image.data()[c * S * S + p];
        ++on;
        for (std::size_t c = 0; c < 3; ++c)
          EXPECT_FLOAT_EQ(s.image.data()[c * S * S + p], color[c]);
      }
    }
    EXPECT_GT(on, 0u);
    EXPECT_LT(on, S * S);
  }
}

TEST(Dataset, UniformMapMassEqualsAreaFraction) {
  const auto spec = small_spec();
  for (std::size_t i = 0; i < 4; ++i) {
    auto s = lewel::generate_sample(spec, "test", i);
    const std::size_t n = s.mask.numel();
    const double uniform = 1.0 / static_cast<double>(n);
    double mass = 0, painted = 0;
    for (const float v : s.mask.data()) {
      if (v == 1.f) mass += uniform;
      painted += v;
    }
    EXPECT_NEAR(mass, painted / static_cast<double>(n), 1e-6);
  }
}

TEST(Dataset, SpecValidation) {
  auto spec = small_spec();
  spec.num_classes = 1;
  EXPECT_THROW(lewel::generate(spec, "train"), lewel::ConfigError);
  spec = small_spec();
  spec.train_size = 4;
  EXPECT_THROW(lewel::generate(spec, "train"), lewel::ConfigError);
  spec = small_spec();
  spec.canvas = 60;
  EXPECT_THROW(lewel::generate(spec, "train"), lewel::ConfigError);
  EXPECT_THROW(lewel::generate(small_spec(), "validation"), lewel::ConfigError);
}

TEST(Manifest, WriteReadRoundtrip) {
  const auto dir = fresh_dir("roundtrip");
  const auto spec = small_spec();
  auto samples = lewel::generate(spec, "train");
  lewel::write_dataset(dir, samples);

  auto manifest = lewel::read_manifest(dir);
  ASSERT_EQ(manifest.entries.size(), samples.size());
  for (std::size_t i = 1; i < manifest.entries.size(); ++i)
    EXPECT_LT(manifest.entries[i - 1].sample_id, manifest.entries[i].sample_id);

  // loaded sample equals the quantized original
  auto loaded = lewel::load_sample(manifest, 5);
  EXPECT_EQ(loaded.sample_id, samples[5].sample_id);
  EXPECT_EQ(loaded.label, samples[5].label);
  for (std::size_t i = 0; i < loaded.image.numel(); ++i)
    EXPECT_FLOAT_EQ(loaded.image.data()[i],
                    lewel::dequantize_u8(lewel::quantize_u8(samples[5].image.data()[i])));
  for (std::size_t i = 0; i < loaded.mask.numel(); ++i)
    EXPECT_FLOAT_EQ(loaded.mask.data()[i], samples[5].mask.data()[i]);
}

TEST(Manifest, MissingFileIsNamedInError) {
  const auto dir = fresh_dir("missing");
  auto samples = lewel::generate(small_spec(), "test");
  lewel::write_dataset(dir, samples);
  const auto victim = fs::path(dir) / "images" / (samples[3].sample_id + ".ppm");
  fs::remove(victim);
  try {
    lewel::read_manifest(dir);
    FAIL() << "expected DataError";
  } catch (const lewel::DataError& e) {
    EXPECT_NE(std::string(e.what()).find(samples[3].sample_id), std::string::npos) << e.what();
  }
}

TEST(Manifest, ExternalDirectoryLoadsWithoutGenerator) {
  const auto dir = fresh_dir("external");
  fs::create_directories(fs::path(dir) / "img");
  // two tiny hand-made images + masks, paths unlike the generator's layout
  auto img = Tensor<float>::full({3, 8, 8}, 0.5f);
  auto mask = Tensor<float>::zeros({8, 8});
  lewel::save_ppm((fs::path(dir) / "img" / "a.ppm").string(), img);
  lewel::save_pgm((fs::path(dir) / "img" / "a.pgm").string(), mask);
  lewel::save_ppm((fs::path(dir) / "img" / "b.ppm").string(), img);
  lewel::save_pgm((fs::path(dir) / "img" / "b.pgm").string(), mask);
  {
    std::ofstream m(fs::path(dir) / "manifest.tsv");
    m << "a\timg/a.ppm\timg/a.pgm\t0\n";
    m << "b\timg/b.ppm\timg/b.pgm\t1\n";
  }
  auto manifest = lewel::read_manifest(dir);
  ASSERT_EQ(manifest.entries.size(), 2u);
  auto s = lewel::load_sample(manifest, 1);
  EXPECT_EQ(s.label, 1u);
  EXPECT_EQ(s.image.shape(), (lewel::Shape{3, 8, 8}));

  // unsorted manifests are rejected
  {
    std::ofstream m(fs::path(dir) / "manifest.tsv");
    m << "b\timg/b.ppm\timg/b.pgm\t1\n";
    m << "a\timg/a.ppm\timg/a.pgm\t0\n";
  }
  EXPECT_THROW(lewel::read_manifest(dir), lewel::DataError);
}
