#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "rest/idx.hpp"
#include "rest/keyvalue.hpp"
#include "rest/random.hpp"

using namespace rest;

namespace {

std::string tmp(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("rest_io_" + name)).string();
}

std::vector<unsigned char> be(std::uint32_t v) {
  return {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
}

std::vector<unsigned char> image_bytes(std::uint32_t count, std::uint32_t rows, std::uint32_t cols) {
  std::vector<unsigned char> b;
  for (std::uint32_t v : {0x803u, count, rows, cols}) {
    const auto w = be(v);
    b.insert(b.end(), w.begin(), w.end());
  }
  for (std::uint32_t i = 0; i < count * rows * cols; ++i) b.push_back(static_cast<unsigned char>(i * 37 % 256));
  return b;
}

}  // namespace

TEST(Idx, ParsesHandBuiltImages) {
  const auto imgs = io::parse_idx_images(image_bytes(2, 3, 4));
  ASSERT_EQ(imgs.size(), 2u);
  EXPECT_EQ(imgs[0].height, 3);
  EXPECT_EQ(imgs[0].width, 4);
  EXPECT_EQ(imgs[0].channels, 1);
  EXPECT_DOUBLE_EQ(imgs[0].at(0, 0, 1), 37 / 255.0);
  EXPECT_DOUBLE_EQ(imgs[1].at(0, 2, 3), (23 * 37 % 256) / 255.0);
}

TEST(Idx, RejectsBadMagicAndTruncation) {
  auto b = image_bytes(2, 3, 4);
  b[3] = 0x01;
  EXPECT_THROW(io::parse_idx_images(b), io::IdxError);
  auto t = image_bytes(2, 3, 4);
  t.pop_back();
  EXPECT_THROW(io::parse_idx_images(t), io::IdxError);
  EXPECT_THROW(io::parse_idx_images({0, 0, 8}), io::IdxError);
  EXPECT_THROW(io::parse_idx_images(image_bytes(1, 0, 4)), io::IdxError);
  std::vector<unsigned char> labels = be(0x801);
  const auto c = be(5);
  labels.insert(labels.end(), c.begin(), c.end());
  labels.push_back(1);
  EXPECT_THROW(io::parse_idx_labels(labels), io::IdxError);
}

TEST(Idx, RoundTripAndCountMismatch) {
  LabeledSet set;
  for (int i = 0; i < 5; ++i) {
    ImageTensor img(6, 7, 1);
    for (std::size_t p = 0; p < img.size(); ++p) img.data[p] = ((p + i) % 256) / 255.0;
    set.push_back(img, i);
  }
  io::write_idx(set, tmp("img"), tmp("lbl"));
  const LabeledSet back = io::ingest_idx(tmp("img"), tmp("lbl"));
  EXPECT_EQ(back.labels, set.labels);
  EXPECT_EQ(back.images, set.images);

  io::write_idx(set.head(3), tmp("img3"), tmp("lbl3"));
  EXPECT_THROW(io::ingest_idx(tmp("img"), tmp("lbl3")), io::IdxError);
  EXPECT_THROW(io::ingest_idx(tmp("nope"), tmp("lbl")), io::IdxError);
  for (const char* f : {"img", "lbl", "img3", "lbl3"}) std::filesystem::remove(tmp(f));
}

TEST(KeyValue, SectionsCommentsAndTrimming) {
  std::istringstream in(
      "# comment\n"
      "seed = 5\n"
      "\n"
      "[rest]\n"
      "  reward=eq2  \n"
      "; other comment\n"
      "threshold = 0.9\n");
  const auto kv = io::parse_key_values(in);
  EXPECT_EQ(kv.at("seed"), "5");
  EXPECT_EQ(kv.at("rest.reward"), "eq2");
  EXPECT_EQ(kv.at("rest.threshold"), "0.9");
  EXPECT_EQ(kv.size(), 3u);
}

TEST(KeyValue, MalformedLinesReportLocation) {
  std::istringstream a("ok=1\nbroken line\n");
  try {
    io::parse_key_values(a, "cfg");
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("cfg:2"), std::string::npos);
  }
  std::istringstream b("[unterminated\n");
  EXPECT_THROW(io::parse_key_values(b), std::invalid_argument);
  std::istringstream c("=3\n");
  EXPECT_THROW(io::parse_key_values(c), std::invalid_argument);
}

TEST(KeyValue, WriteThenRead) {
  io::KeyValues kv{{"a", "1"}, {"b.c", "x y"}};
  io::write_key_values(tmp("kv"), kv);
  EXPECT_EQ(io::read_key_values(tmp("kv")), kv);
  std::filesystem::remove(tmp("kv"));
}

TEST(Seeds, DerivedSeedsDiffer) {
  EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
  EXPECT_NE(derive_seed(1, 0), derive_seed(2, 0));
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
}
