#include <gtest/gtest.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "check_util.hpp"
#include "lewel/checkpoint.hpp"
#include "lewel/nn.hpp"
#include "lewel/objectives.hpp"
#include "lewel/tensor.hpp"

namespace {

using lewel::Checkpoint;
using lewel::load_checkpoint;
using lewel::save_checkpoint;
using lewel::Tensor;

std::string temp_path(const std::string& leaf) {
  return (std::filesystem::temp_directory_path() / leaf).string();
}

Checkpoint sample_checkpoint() {
  Checkpoint ck;
  ck.step = 12345;
  ck.config_text = "variant = \"lewel_b\"\nepochs = 100\n";
  ck.set_note("queue.capacity", "4096");
  ck.set_note("queue.dim", "64");

  lewel::Rng rng(7);
  ck.add("online.w", check::random_tensor({4, 3}, rng));
  ck.add("online.b", check::random_tensor({3}, rng));
  ck.add("scalar", Tensor<double>::scalar(0.25));
  std::vector<float> f32_vals = {1.5f, -2.25f, 0.0f, 3.0f, -0.125f, 9.5f};
  ck.add("stats", Tensor<float>::from_data({2, 3}, std::move(f32_vals)));
  return ck;
}

// Rewrite the trailing checksum after the test tampers with earlier bytes, so
// the loader reaches the field under test instead of stopping at the CRC.
void refresh_crc(std::vector<std::uint8_t>& bytes) {
  const std::uint32_t crc = lewel::detail::crc32(bytes.data(), bytes.size() - 4);
  std::memcpy(bytes.data() + bytes.size() - 4, &crc, 4);
}

TEST(Checkpoint, RoundtripIsBitExact) {
  const Checkpoint ck = sample_checkpoint();
  const std::string path = temp_path("ck_roundtrip.lwlc");
  save_checkpoint(path, ck);
  const Checkpoint back = load_checkpoint(path);

  EXPECT_EQ(back.version, ck.version);
  EXPECT_EQ(back.step, ck.step);
  EXPECT_EQ(back.config_text, ck.config_text);
  EXPECT_EQ(back.notes, ck.notes);
  ASSERT_EQ(back.tensors.size(), ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
    EXPECT_EQ(back.tensors[i].dtype, ck.tensors[i].dtype);
    EXPECT_EQ(back.tensors[i].shape, ck.tensors[i].shape);
    ASSERT_EQ(back.tensors[i].payload.size(), ck.tensors[i].payload.size());
    EXPECT_EQ(std::memcmp(back.tensors[i].payload.data(), ck.tensors[i].payload.data(),
                          ck.tensors[i].payload.size()),
              0)
        << ck.tensors[i].name;
  }

  // Re-encoding the loaded artifact reproduces the file byte for byte.
  const std::string path2 = temp_path("ck_roundtrip2.lwlc");
  save_checkpoint(path2, back);
  const auto a = lewel::detail::read_file_bytes(path);
  const auto b = lewel::detail::read_file_bytes(path2);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size()), 0);
}

TEST(Checkpoint, TypedAccessorsRecoverValues) {
  const Checkpoint ck = sample_checkpoint();
  EXPECT_TRUE(ck.has("online.w"));
  EXPECT_FALSE(ck.has("online.missing"));

  const auto w = ck.tensor<double>("online.w");
  EXPECT_EQ(w.shape(), (lewel::Shape{4, 3}));
  const auto stats = ck.tensor<float>("stats");
  EXPECT_FLOAT_EQ(stats.data()[1], -2.25f);
  EXPECT_DOUBLE_EQ(ck.tensor<double>("scalar").item(), 0.25);

  ASSERT_NE(ck.note("queue.capacity"), nullptr);
  EXPECT_EQ(*ck.note("queue.capacity"), "4096");
  EXPECT_EQ(ck.note("nope"), nullptr);

  EXPECT_THROW((void)ck.tensor<double>("nope"), lewel::DataError);
  EXPECT_THROW((void)ck.tensor<double>("stats"), lewel::DataError);  // stored as f32
  Checkpoint dup = sample_checkpoint();
  EXPECT_THROW(dup.add("online.w", Tensor<double>::scalar(1.0)), lewel::DataError);
}

TEST(Checkpoint, TruncatedFileRejected) {
  const std::string path = temp_path("ck_truncated.lwlc");
  save_checkpoint(path, sample_checkpoint());
  auto bytes = lewel::detail::read_file_bytes(path);
  bytes.resize(bytes.size() - 5);
  lewel::detail::write_file_bytes(path, bytes);
  EXPECT_THROW((void)load_checkpoint(path), lewel::DataError);

  lewel::detail::write_file_bytes(path, {'L', 'W'});
  EXPECT_THROW((void)load_checkpoint(path), lewel::DataError);
}

TEST(Checkpoint, CorruptByteRejected) {
  const std::string path = temp_path("ck_corrupt.lwlc");
  save_checkpoint(path, sample_checkpoint());
  auto bytes = lewel::detail::read_file_bytes(path);
  bytes[bytes.size() / 2] ^= 0x40;
  lewel::detail::write_file_bytes(path, bytes);
  EXPECT_THROW((void)load_checkpoint(path), lewel::DataError);
}

TEST(Checkpoint, BadMagicRejected) {
  const std::string path = temp_path("ck_magic.lwlc");
  save_checkpoint(path, sample_checkpoint());
  auto bytes = lewel::detail::read_file_bytes(path);
  bytes[0] = 'X';
  refresh_crc(bytes);  // isolate the magic check from the checksum check
  lewel::detail::write_file_bytes(path, bytes);
  EXPECT_THROW((void)load_checkpoint(path), lewel::DataError);
}

TEST(Checkpoint, VersionMismatchRejected) {
  const std::string path = temp_path("ck_version.lwlc");
  save_checkpoint(path, sample_checkpoint());
  auto bytes = lewel::detail::read_file_bytes(path);
  const std::uint32_t bogus = 99;
  std::memcpy(bytes.data() + 4, &bogus, 4);
  refresh_crc(bytes);
  lewel::detail::write_file_bytes(path, bytes);
  EXPECT_THROW((void)load_checkpoint(path), lewel::DataError);
}

TEST(Checkpoint, GroupRestoreWritesThroughToLiveModel) {
  lewel::Rng rng(11);
  lewel::Linear<double> layer(3, 2, rng);
  lewel::NamedTensors<double> params;
  layer.collect("probe", params);

  const auto x = check::random_tensor({5, 3}, rng);
  const auto before = layer.forward(x).detach();

  Checkpoint ck;
  lewel::add_group(ck, "online.", params);
  const std::string path = temp_path("ck_group.lwlc");
  save_checkpoint(path, ck);

  // Scramble the live weights, then restore from disk.
  for (auto& [name, t] : params.items)
    for (auto& v : t.mutable_data()) v = -7.0;
  const Checkpoint back = load_checkpoint(path);
  lewel::restore_group(back, "online.", params);

  const auto after = layer.forward(x);
  ASSERT_EQ(after.shape(), before.shape());
  const auto a = after.data();
  const auto b = before.data();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]) << i;
}

TEST(Checkpoint, GroupRestoreValidatesShapes) {
  lewel::Rng rng(13);
  lewel::Linear<double> narrow(2, 2, rng);
  lewel::Linear<double> wide(3, 2, rng);
  lewel::NamedTensors<double> narrow_params, wide_params;
  narrow.collect("probe", narrow_params);
  wide.collect("probe", wide_params);

  Checkpoint ck;
  lewel::add_group(ck, "m.", narrow_params);
  EXPECT_THROW(lewel::restore_group(ck, "m.", wide_params), lewel::DataError);
  EXPECT_THROW(lewel::restore_group(ck, "other.", narrow_params), lewel::DataError);
}

TEST(Checkpoint, QueueSnapshotSurvivesRoundtrip) {
  lewel::NegativeQueue<double> queue(8, 4);
  lewel::Rng rng(17);
  queue.push(check::unit_rows({3, 4}, rng));
  queue.push(check::unit_rows({2, 4}, rng));

  Checkpoint ck;
  const std::vector<double> fifo = queue.snapshot();
  ck.add("queue", Tensor<double>::from_data({queue.fill(), queue.dim()}, std::vector<double>(fifo)));
  ck.set_note("queue.capacity", std::to_string(queue.capacity()));
  const std::string path = temp_path("ck_queue.lwlc");
  save_checkpoint(path, ck);

  const Checkpoint back = load_checkpoint(path);
  const auto stored = back.tensor<double>("queue");
  lewel::NegativeQueue<double> revived(2, 2);  // geometry overwritten by restore
  revived.restore(std::stoul(*back.note("queue.capacity")), stored.shape()[1],
                  std::vector<double>(stored.data().begin(), stored.data().end()));

  EXPECT_EQ(revived.capacity(), queue.capacity());
  EXPECT_EQ(revived.fill(), queue.fill());
  const auto want_t = queue.contents();
  const auto got_t = revived.contents();
  const auto want = want_t.data();
  const auto got = got_t.data();
  ASSERT_EQ(want.size(), got.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(got[i], want[i]);
}

}  // namespace
