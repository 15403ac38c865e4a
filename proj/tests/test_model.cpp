#include "doctest.h"
#include "oracle.hpp"

#include "advrank/data.hpp"
#include "advrank/model.hpp"

#include <filesystem>
#include <fstream>
#include <limits>
#include <random>

using namespace advrank;
namespace fs = std::filesystem;

namespace {

std::vector<float> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "advrank_test_model";
  fs::create_directories(dir);
  return dir / name;
}

std::vector<char> slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void dump(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Dataset clusters(std::uint64_t seed) {
  SyntheticSpec s;
  s.n_classes = 3;
  s.points_per_class = 50;
  s.dim = 16;
  s.seed = seed;
  return make_synthetic(s);
}

}  // namespace

TEST_CASE("identity linear model") {
  std::vector<float> eye(9, 0.0f);
  for (int i = 0; i < 3; ++i) eye[i * 4] = 1.0f;
  const auto m = EmbeddingModel::linear(Tensor({3, 3}, eye), Tensor::zeros({3}));
  const Tensor x({2, 3}, {0.1f, 0.2f, 0.3f, 0.4f, 0.5f, 0.6f});
  CHECK(values(m.embed(x)) == values(x));
}

TEST_CASE("hand-evaluated 2x2 layer") {
  const auto m = EmbeddingModel::linear(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2}, {0.5f, -1}));
  // [1, 1] W = [4, 6], plus bias.
  CHECK(values(m.embed(Tensor({1, 2}, {1, 1}))) == std::vector<float>{4.5f, 5});
}

TEST_CASE("default architectures") {
  const auto m = EmbeddingModel::create("mlp256", 784, 1);
  CHECK(m.embed(Tensor::full({2, 784}, 0.5f)).shape() == Shape{2, 32});
  CHECK(m.param_count() == 784 * 256 + 256 + 256 * 32 + 32);
  CHECK(m.params()[0].name == "fc0.weight");
  const auto deep = EmbeddingModel::create("mlp128x64", 784, 1);
  CHECK(deep.embed(Tensor::full({1, 784}, 0.5f)).shape() == Shape{1, 32});
  CHECK_THROWS_AS((void)m.embed(Tensor::zeros({2, 100})), ShapeError);
  CHECK_THROWS_AS((void)EmbeddingModel::create("resnet", 784, 1), std::invalid_argument);
  using K = LayerSpec::Kind;
  CHECK_THROWS_AS(EmbeddingModel("bad", {{K::linear, 4, 3}, {K::linear, 2, 2}}, 0), std::invalid_argument);
}

TEST_CASE("initialization bounds and seeding") {
  const auto a = EmbeddingModel::create("mlp256", 784, 3);
  const auto b = EmbeddingModel::create("mlp256", 784, 3);
  const auto c = EmbeddingModel::create("mlp256", 784, 4);
  CHECK(values(a.params()[0].value) == values(b.params()[0].value));
  CHECK(values(a.params()[0].value) != values(c.params()[0].value));
  const float bound = 1.0f / std::sqrt(784.0f);
  for (float w : a.params()[0].value.data()) CHECK(std::abs(w) <= bound);
}

TEST_CASE("copies are deep") {
  auto a = EmbeddingModel::create("mlp256", 8, 1);
  EmbeddingModel b = a;
  b.params()[0].value.mutable_data()[0] += 1.0f;
  CHECK(a.params()[0].value.at(0) != b.params()[0].value.at(0));
}

TEST_CASE("scalar triplet loss") {
  CHECK(triplet_loss(0.4, 0.4, 0.0) == 0.0);
  CHECK(triplet_loss(0.5, 0.3, 1.0) == doctest::Approx(1.2).epsilon(1e-12));
  CHECK(triplet_loss(0.1, 0.9, 0.2) == 0.0);
}

TEST_CASE("scalar contrastive loss") {
  CHECK(contrastive_loss(0.0, true, 1.0) == 0.0);
  CHECK(contrastive_loss(1.5, false, 1.0) == 0.0);
  CHECK(contrastive_loss(1.0, false, 1.0) == 0.0);
  CHECK(contrastive_loss(0.4, false, 1.0) == doctest::Approx(0.18).epsilon(1e-12));
  CHECK(contrastive_loss(0.6, true, 1.0) == doctest::Approx(0.18).epsilon(1e-12));
}

TEST_CASE("tensor losses agree with the scalar forms") {
  std::mt19937_64 rng(5);
  const Tensor a = oracle::random_tensor({8, 4}, rng);
  const Tensor p = oracle::random_tensor({8, 4}, rng);
  const Tensor n = oracle::random_tensor({8, 4}, rng);
  for (Metric metric : {Metric::euclidean, Metric::cosine}) {
    double expect = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      const auto row = [&](const Tensor& t) { return t.data().subspan(i * 4, 4); };
      expect += triplet_loss(distance(row(a), row(p), metric), distance(row(a), row(n), metric), 0.3);
    }
    CHECK(triplet_loss(a, p, n, metric, 0.3f).item() == doctest::Approx(expect / 8).epsilon(1e-5));

    const std::vector<float> same{1, 0, 1, 0, 0, 1, 1, 0};
    double c = 0.0;
    for (std::size_t i = 0; i < 8; ++i) {
      c += contrastive_loss(distance(a.data().subspan(i * 4, 4), p.data().subspan(i * 4, 4), metric), same[i] > 0.5f,
                            1.0);
    }
    CHECK(contrastive_loss(a, p, same, metric, 1.0f).item() == doctest::Approx(c / 8).epsilon(1e-5));
  }
}

TEST_CASE("sampler respects classes") {
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) labels.push_back(i % 4);
  TripletSampler s(labels, 9);
  for (int b = 0; b < 10; ++b) {
    const auto batch = s.next(16, LossKind::triplet);
    REQUIRE(batch.anchor.size() == 16);
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK(labels[batch.second[i]] == labels[batch.anchor[i]]);
      CHECK(batch.second[i] != batch.anchor[i]);
      CHECK(labels[batch.third[i]] != labels[batch.anchor[i]]);
    }
    const auto pairs = s.next(16, LossKind::contrastive);
    for (std::size_t i = 0; i < 16; ++i) {
      CHECK((labels[pairs.second[i]] == labels[pairs.anchor[i]]) == (pairs.same[i] > 0.5f));
    }
  }
  const std::vector<int> one_class(10, 0);
  CHECK_THROWS_AS(TripletSampler(one_class, 0), std::invalid_argument);
}

TEST_CASE("zero epochs leaves the model unchanged") {
  const auto data = clusters(1);
  const auto init = EmbeddingModel::create("mlp256", 16, 2);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto r = train(init, data, cfg);
  for (std::size_t k = 0; k < init.params().size(); ++k) {
    CHECK(values(r.model.params()[k].value) == values(init.params()[k].value));
  }
  CHECK(r.history.epoch_loss.empty());
}

TEST_CASE("synthetic clusters train to high recall") {
  const auto data = clusters(3);
  const auto held_out = clusters(4);
  for (LossKind kind : {LossKind::triplet, LossKind::contrastive}) {
    CAPTURE(to_string(kind));
    TrainConfig cfg;
    cfg.loss_kind = kind;
    cfg.metric = Metric::cosine;
    cfg.margin_beta = kind == LossKind::triplet ? 0.2f : 1.0f;
    cfg.lr = 0.05f;
    cfg.epochs = 5;
    cfg.seed = 1;
    const auto r = train(EmbeddingModel::create("mlp256", 16, 2), data, cfg);
    REQUIRE(r.history.epoch_loss.size() == 5);
    CHECK(r.history.epoch_loss.back() <= r.history.epoch_loss.front());
    CHECK(recall_at_1(build_index(r.model, held_out)) >= 0.95);
    CHECK(r.model.metadata.at("metric") == "cosine");
  }
}

TEST_CASE("training is reproducible for a seed") {
  const auto data = clusters(3);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.seed = 11;
  const auto a = train(EmbeddingModel::create("mlp256", 16, 2), data, cfg);
  const auto b = train(EmbeddingModel::create("mlp256", 16, 2), data, cfg);
  CHECK(a.history.epoch_loss == b.history.epoch_loss);
  CHECK(values(a.model.params()[2].value) == values(b.model.params()[2].value));
}

TEST_CASE("non-finite loss aborts training") {
  auto model = EmbeddingModel::create("mlp256", 4, 2);
  const Tensor ok = Tensor::full({2, 4}, 0.5f);
  Tensor poisoned = ok.clone();
  poisoned.mutable_data()[1] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg;
  CHECK_THROWS_WITH_AS((void)sgd_step(model, poisoned, ok, ok, {}, cfg), doctest::Contains("non-finite"),
                       TrainingError);
}

TEST_CASE("checkpoint round trip and corruption") {
  auto model = EmbeddingModel::create("mlp128x64", 20, 6);
  model.metadata["defense"] = "shift-replace";
  const auto path = scratch("m.bin");
  save_model(model, path);
  const auto back = load_model(path);
  CHECK(back.arch() == "mlp128x64");
  CHECK(back.layers() == model.layers());
  CHECK(back.metadata == model.metadata);
  std::mt19937_64 rng(1);
  const Tensor x = oracle::random_tensor({4, 20}, rng, 0, 1);
  CHECK(values(back.embed(x)) == values(model.embed(x)));

  const auto bytes = slurp(path);
  const auto bad = scratch("bad.bin");

  dump(bad, {bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() / 2)});
  CHECK_THROWS_WITH_AS((void)load_model(bad), doctest::Contains("truncated"), CheckpointError);

  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x40;
  dump(bad, flipped);
  CHECK_THROWS_WITH_AS((void)load_model(bad), doctest::Contains("checksum"), CheckpointError);

  auto version = bytes;
  version[8] = 9;
  dump(bad, version);
  CHECK_THROWS_WITH_AS((void)load_model(bad), doctest::Contains("version"), CheckpointError);

  auto magic = bytes;
  magic[0] = 'X';
  dump(bad, magic);
  CHECK_THROWS_WITH_AS((void)load_model(bad), doctest::Contains("magic"), CheckpointError);

  auto trailing = bytes;
  trailing.push_back(0);
  dump(bad, trailing);
  CHECK_THROWS_AS((void)load_model(bad), CheckpointError);

  CHECK_THROWS_AS((void)load_model(scratch("missing.bin")), CheckpointError);
}
