#include <gtest/gtest.h>

#include <random>

#include "tfm/binary_io.hpp"
#include "tfm/errors.hpp"
#include "tfm/mask_store.hpp"

using namespace tfm;
using S = MaskState;

namespace {

Mask bits(const std::string& s) {
  Mask m;
  for (char c : s) m.push_back(c == '1' ? 1 : 0);
  return m;
}

OwnershipLedger three_task_ledger() {
  OwnershipLedger l(1);
  const std::size_t a1[] = {8}, a2[] = {5}, a3[] = {5};
  l.register_task(a1);
  l.register_task(a2);
  l.register_task(a3);
  return l;
}

OwnershipLedger random_ledger(std::mt19937_64& rng, std::size_t layers, TaskId tasks) {
  OwnershipLedger l(layers);
  for (TaskId t = 0; t < tasks; ++t) {
    std::vector<std::size_t> add(layers);
    for (auto& a : add) a = rng() % 5;
    l.register_task(add);
  }
  return l;
}

}  // namespace

TEST(DeriveM, FirstTaskOwnsAll) {
  OwnershipLedger l(1);
  const std::size_t a[] = {8};
  l.register_task(a);
  EXPECT_EQ(derive_m(l, 0, 1), bits("11111111"));
}

TEST(DeriveM, GrownFeaturesBelongToNewTask) {
  const auto l = three_task_ledger();
  EXPECT_EQ(derive_m(l, 0, 2), bits("0000000011111"));
  EXPECT_EQ(pad(derive_m(l, 0, 1), 13), bits("1111111100000"));
  EXPECT_EQ(derive_m(l, 0, 1).size(), 8u);
}

TEST(DeriveM, UnknownTaskThrows) {
  const auto l = three_task_ledger();
  EXPECT_THROW(derive_m(l, 0, 4), LookupError);
  EXPECT_THROW(derive_n(l, 0, 0), LookupError);
  EXPECT_THROW(derive_m(l, 1, 1), LookupError);
}

TEST(DeriveN, UnownedFeatureStaysInvisible) {
  const auto l = OwnershipLedger::from_owners({{1, 2, kUnowned}}, {{3, 3}});
  EXPECT_EQ(derive_m(l, 0, 1), bits("100"));
  EXPECT_EQ(derive_m(l, 0, 2), bits("010"));
  EXPECT_EQ(derive_n(l, 0, 2), bits("110"));
}

TEST(DeriveN, PaddedToLaterWidth) {
  const auto l = three_task_ledger();
  EXPECT_EQ(pad(derive_n(l, 0, 2), 18), bits("111111111111100000"));
  EXPECT_EQ(derive_n(l, 0, 3), bits("111111111111111111"));
}

TEST(DeriveN, PropertiesOnRandomLedgers) {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 50; ++trial) {
    const TaskId tasks = 1 + rng() % 5;
    const auto l = random_ledger(rng, 3, tasks);
    for (std::size_t layer = 0; layer < 3; ++layer) {
      const std::size_t w = l.width(layer);
      std::vector<Mask> ms;
      for (TaskId t = 1; t <= tasks; ++t) {
        Mask acc = zeros(l.width_at(layer, t));
        for (TaskId s = 1; s <= t; ++s) {
          const Mask m = pad(derive_m(l, layer, s), l.width_at(layer, t));
          for (std::size_t j = 0; j < acc.size(); ++j) acc[j] |= m[j];
        }
        EXPECT_EQ(derive_n(l, layer, t), acc);
        if (t > 1) {
          const Mask prev = pad(derive_n(l, layer, t - 1), w), cur = pad(derive_n(l, layer, t), w);
          for (std::size_t j = 0; j < w; ++j) EXPECT_LE(prev[j], cur[j]);
        }
        ms.push_back(pad(derive_m(l, layer, t), w));
      }
      EXPECT_NO_THROW(check_disjoint(ms));
    }
  }
}

TEST(Disjointness, OverlapRejected) {
  const std::vector<Mask> ms{bits("1100"), bits("0110")};
  EXPECT_THROW(check_disjoint(ms), InvalidMaskError);
}

TEST(Ledger, CountsNonDecreasing) {
  EXPECT_THROW(OwnershipLedger::from_owners({{1, 1}}, {{2, 1}}), ConfigError);
}

TEST(ToTernary, StateTable) {
  EXPECT_EQ(to_ternary(bits("1"), bits("1"))[0], S::kNormal);
  EXPECT_EQ(to_ternary(bits("0"), bits("1"))[0], S::kForwardOnly);
  EXPECT_EQ(to_ternary(bits("0"), bits("0"))[0], S::kMasked);
  EXPECT_THROW(to_ternary(bits("1"), bits("0")), InvalidMaskError);
}

TEST(ToTernary, MaskRoundTrip) {
  const auto mask = to_ternary(3, 2, bits("0011100"), bits("1111100"));
  EXPECT_EQ(mask.m(), bits("0011100"));
  EXPECT_EQ(mask.n(), bits("1111100"));
  EXPECT_EQ(mask.layer_id(), 3u);
  EXPECT_EQ(mask.task_id(), 2u);
}

TEST(Pack, FourStatesInOneByte) {
  const std::vector<S> st{S::kNormal, S::kForwardOnly, S::kMasked, S::kNormal};
  const auto b = pack(st);
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0], 0b10'00'01'10);
  EXPECT_EQ(unpack(b, 4), st);
}

TEST(Pack, SizeIsCeilOfTwoBitsPerFeature) {
  EXPECT_EQ(pack(std::vector<S>(9, S::kNormal)).size(), 3u);
  EXPECT_EQ(packed_size(0), 0u);
  EXPECT_EQ(packed_size(4), 1u);
  EXPECT_EQ(packed_size(5), 2u);
}

TEST(Pack, RandomRoundTrip) {
  std::mt19937_64 rng(99);
  std::vector<S> st(1000);
  for (auto& s : st) s = static_cast<S>(rng() % 3);
  const auto b = pack(st);
  EXPECT_EQ(b.size(), 250u);
  EXPECT_EQ(unpack(b, st.size()), st);
}

TEST(Pack, StateThreeIsCorruption) {
  const std::vector<std::uint8_t> b{0b00'11'00'10};
  EXPECT_THROW(unpack(b, 4), CorruptionError);
  EXPECT_THROW(unpack(std::vector<std::uint8_t>{0x00}, 9), CorruptionError);
}

TEST(LayerTaskMaskFile, HeaderAndPayloadLayout) {
  const auto mask = to_ternary(1, 2, bits("01"), bits("11"));
  ByteWriter w;
  mask.write(w);
  const std::vector<std::uint8_t> expected{1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 0b10'01};
  EXPECT_EQ(w.bytes(), expected);
  ByteReader r(w.bytes());
  EXPECT_EQ(LayerTaskMask::read(r), mask);
}

TEST(LayerTaskMaskFile, CorruptPayloadRejected) {
  std::vector<std::uint8_t> bytes{0, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 0b11'10};
  ByteReader r(bytes);
  EXPECT_THROW(LayerTaskMask::read(r), FormatError);
  std::vector<std::uint8_t> truncated{0, 0, 0, 0, 1, 0, 0, 0, 9, 0, 0, 0, 0};
  ByteReader r2(truncated);
  EXPECT_THROW(LayerTaskMask::read(r2), FormatError);
}

TEST(MaskStore, MaterializedMasksAreImmutable) {
  OwnershipLedger l(2);
  MaskStore store;
  const std::size_t a1[] = {4, 3}, a2[] = {2, 0}, a3[] = {1, 5};
  l.register_task(a1);
  store.materialize(l, 1);
  const auto first = store.get(0, 1);
  l.register_task(a2);
  store.materialize(l, 2);
  l.register_task(a3);
  store.materialize(l, 3);
  EXPECT_EQ(store.get(0, 1), first);
  EXPECT_EQ(store.get(0, 1).n(), derive_n(l, 0, 1));
  EXPECT_EQ(store.get(1, 3).m(), derive_m(l, 1, 3));
  EXPECT_EQ(store.payload_bytes(), packed_size(4) + packed_size(3) + packed_size(6) + packed_size(3) +
                                       packed_size(7) + packed_size(8));
  EXPECT_THROW(store.get(0, 4), LookupError);
}

TEST(MaskStore, SerializationRoundTrip) {
  std::mt19937_64 rng(5);
  const auto l = random_ledger(rng, 4, 4);
  MaskStore store;
  for (TaskId t = 1; t <= 4; ++t) store.materialize(l, t);
  ByteWriter w;
  store.write(w);
  ByteReader r(w.bytes());
  EXPECT_EQ(MaskStore::read(r), store);
  EXPECT_TRUE(r.at_end());
}
