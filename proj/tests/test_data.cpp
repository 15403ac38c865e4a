#include "doctest.h"

#include "advrank/data.hpp"
#include "advrank/model.hpp"

#include <zlib.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

using namespace advrank;
namespace fs = std::filesystem;

namespace {

using Bytes = std::vector<unsigned char>;

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "advrank_test_data";
  fs::create_directories(dir);
  return dir / name;
}

void be32(Bytes& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

void dump(const fs::path& p, const Bytes& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

void dump_gz(const fs::path& p, const Bytes& b) {
  gzFile f = gzopen(p.c_str(), "wb");
  REQUIRE(f != nullptr);
  gzwrite(f, b.data(), static_cast<unsigned>(b.size()));
  gzclose(f);
}

// Two 2x3 images and their labels, written by hand.
Bytes image_file() {
  Bytes b;
  be32(b, 0x00000803);
  be32(b, 2);
  be32(b, 2);
  be32(b, 3);
  for (unsigned char v : {0, 51, 102, 153, 204, 255, 255, 0, 255, 0, 255, 0}) b.push_back(v);
  return b;
}

Bytes label_file(std::uint32_t count = 2) {
  Bytes b;
  be32(b, 0x00000801);
  be32(b, count);
  b.push_back(7);
  b.push_back(3);
  return b;
}

}  // namespace

TEST_CASE("hand-built IDX pair") {
  const auto img = scratch("img.idx"), lab = scratch("lab.idx");
  dump(img, image_file());
  dump(lab, label_file());
  const Dataset d = load_idx(img, lab, "fixture", Split::test);
  CHECK(d.size() == 2);
  CHECK(d.rows == 2);
  CHECK(d.cols == 3);
  CHECK(d.images.shape() == Shape{2, 6});
  CHECK(d.labels == std::vector<int>{7, 3});
  CHECK(d.split == Split::test);
  const std::vector<float> first{0.0f, 0.2f, 0.4f, 0.6f, 0.8f, 1.0f};
  for (std::size_t i = 0; i < 6; ++i) CHECK(d.images.at(i) == doctest::Approx(first[i]).epsilon(1e-7));
  CHECK(d.images.at(6) == 1.0f);
  CHECK(d.images.at(7) == 0.0f);
}

TEST_CASE("gzip input is detected") {
  const auto img = scratch("img.idx.gz"), lab = scratch("lab.idx.gz");
  dump_gz(img, image_file());
  dump_gz(lab, label_file());
  const Dataset d = load_idx(img, lab);
  CHECK(d.labels == std::vector<int>{7, 3});
  CHECK(d.images.at(1) == doctest::Approx(0.2f));
}

TEST_CASE("corrupted IDX files") {
  const auto img = scratch("c_img.idx"), lab = scratch("c_lab.idx");
  const auto good_img = image_file();
  const auto good_lab = label_file();

  SUBCASE("label magic fed to the image loader") {
    dump(img, good_lab);
    dump(lab, good_lab);
    CHECK_THROWS_WITH_AS((void)load_idx(img, lab), doctest::Contains("bad magic"), IdxError);
  }
  SUBCASE("image magic fed to the label loader") {
    dump(img, good_img);
    dump(lab, good_img);
    CHECK_THROWS_WITH_AS((void)load_idx(img, lab), doctest::Contains("bad magic"), IdxError);
  }
  SUBCASE("truncated image payload") {
    dump(img, Bytes(good_img.begin(), good_img.end() - 3));
    dump(lab, good_lab);
    CHECK_THROWS_WITH_AS((void)load_idx(img, lab), doctest::Contains("truncated"), IdxError);
  }
  SUBCASE("truncated header") {
    dump(img, Bytes(good_img.begin(), good_img.begin() + 6));
    dump(lab, good_lab);
    CHECK_THROWS_WITH_AS((void)load_idx(img, lab), doctest::Contains("truncated"), IdxError);
  }
  SUBCASE("truncated labels") {
    dump(img, good_img);
    dump(lab, Bytes(good_lab.begin(), good_lab.end() - 1));
    CHECK_THROWS_WITH_AS((void)load_idx(img, lab), doctest::Contains("truncated"), IdxError);
  }
  SUBCASE("count mismatch") {
    dump(img, good_img);
    auto three = label_file(3);
    three.push_back(1);
    dump(lab, three);
    CHECK_THROWS_WITH_AS((void)load_idx(img, lab), doctest::Contains("count mismatch"), IdxError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS((void)load_idx(scratch("nope.idx"), lab), IdxError);
  }
}

TEST_CASE("write and reload") {
  SyntheticSpec s;
  s.n_classes = 3;
  s.points_per_class = 4;
  s.dim = 6;
  Dataset d = make_synthetic(s);
  d.rows = 2;
  d.cols = 3;
  for (bool gz : {false, true}) {
    const auto img = scratch(gz ? "rt_img.gz" : "rt_img"), lab = scratch(gz ? "rt_lab.gz" : "rt_lab");
    write_idx(d, img, lab, gz);
    const Dataset back = load_idx(img, lab);
    CHECK(back.labels == d.labels);
    REQUIRE(back.images.numel() == d.images.numel());
    for (std::size_t i = 0; i < d.images.numel(); ++i) {
      CHECK(back.images.at(i) == doctest::Approx(d.images.at(i)).epsilon(0.5 / 255 + 1e-6));
    }
  }
}

TEST_CASE("bundled MNIST subset loads") {
  const Dataset train = load_mnist_split("data/mnist", Split::train);
  const Dataset test = load_mnist_split("data/mnist", Split::test);
  CHECK(train.pixels() == 784);
  CHECK(test.size() >= 2000);
  std::set<int> classes(test.labels.begin(), test.labels.end());
  CHECK(classes.size() == 10);
  CHECK_THROWS_AS((void)load_mnist_split(scratch("empty_dir"), Split::train), IdxError);
}

TEST_CASE("synthetic clusters") {
  SyntheticSpec s;
  s.n_classes = 3;
  s.points_per_class = 50;
  s.seed = 4;
  const Dataset a = make_synthetic(s), b = make_synthetic(s);
  CHECK(a.size() == 150);
  CHECK(a.labels == b.labels);
  CHECK(std::equal(a.images.data().begin(), a.images.data().end(), b.images.data().begin()));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a.labels[i] == static_cast<int>(i % 3));
  for (float v : a.images.data()) CHECK((v >= 0.0f && v <= 1.0f));
  s.seed = 5;
  const Dataset c = make_synthetic(s);
  CHECK_FALSE(std::equal(a.images.data().begin(), a.images.data().end(), c.images.data().begin()));
}

TEST_CASE("dataset slicing") {
  SyntheticSpec s;
  s.dim = 4;
  const Dataset d = make_synthetic(s);
  const Dataset h = d.head(5);
  CHECK(h.size() == 5);
  CHECK(h.images.shape() == Shape{5, 4});
  const std::size_t rows[] = {7, 2};
  const Tensor b = d.batch(rows);
  CHECK(b.at(0) == d.images.at(28));
  CHECK(d.image(2).shape() == Shape{1, 4});
}

TEST_CASE("attack target sampling") {
  // 200 points on a line: item i's nearest neighbours are i +- 1, i +- 2.
  std::vector<float> v;
  for (int i = 0; i < 200; ++i) v.push_back(static_cast<float>(i));
  const RankingIndex index(Tensor({200, 1}, v), Metric::euclidean);
  std::mt19937_64 rng(3);

  const auto pool = top_ranked_pool(index, 100, 0.01);
  CHECK(std::set<std::size_t>(pool.begin(), pool.end()) == std::set<std::size_t>{98, 99, 101, 102});

  for (int t = 0; t < 50; ++t) {
    const auto plus = sample_attack_targets(index, AttackKind::ca_plus, 100, 10, rng);
    CHECK(plus.size() == 10);
    CHECK(std::set<std::size_t>(plus.begin(), plus.end()).size() == 10);
    CHECK(std::find(plus.begin(), plus.end(), 100) == plus.end());
    const auto minus = sample_attack_targets(index, AttackKind::qa_minus, 100, 2, rng);
    for (std::size_t m : minus) CHECK(std::find(pool.begin(), pool.end(), m) != pool.end());
  }
  CHECK_THROWS_AS((void)sample_attack_targets(index, AttackKind::ca_minus, 100, 5, rng), std::invalid_argument);
  CHECK_THROWS_AS((void)sample_attack_targets(index, AttackKind::ca_plus, 200, 1, rng), std::out_of_range);

  const std::vector<std::size_t> items{1, 2, 3};
  CHECK_THROWS_AS((void)sample_distinct(items, 4, rng), std::invalid_argument);
  std::mt19937_64 r1(9), r2(9);
  CHECK(sample_distinct(items, 2, r1) == sample_distinct(items, 2, r2));
}
