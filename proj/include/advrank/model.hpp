#pragma once

#include "advrank/data.hpp"
#include "advrank/metrics.hpp"
#include "advrank/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advrank {

struct LayerSpec {
  enum class Kind : std::uint8_t { linear = 1, relu = 2 };
  Kind kind = Kind::linear;
  std::size_t in = 0;
  std::size_t out = 0;

  bool operator==(const LayerSpec&) const = default;
};

struct NamedParam {
  std::string name;
  Tensor value;
};

/// Differentiable embedding network f: [0,1]^N -> R^embed_dim.
///
/// Copies are deep. The model never normalizes its output; cosine handling
/// lives entirely in the distance.
class EmbeddingModel {
 public:
  EmbeddingModel() = default;
  /// Layers must chain (out of layer k == in of layer k+1). Parameters are
  /// initialized U(-1/sqrt(in), 1/sqrt(in)) from `seed`.
  EmbeddingModel(std::string arch, std::vector<LayerSpec> layers, std::uint64_t seed);

  EmbeddingModel(const EmbeddingModel& other);
  EmbeddingModel& operator=(const EmbeddingModel& other);
  EmbeddingModel(EmbeddingModel&&) noexcept = default;
  EmbeddingModel& operator=(EmbeddingModel&&) noexcept = default;

  /// Named architectures: "mlp256" (N-256-relu-32) and "mlp128x64"
  /// (N-128-relu-64-relu-32).
  static EmbeddingModel create(std::string_view arch, std::size_t input_dim, std::uint64_t seed);
  /// A single linear layer with the given weight (in, out) and bias (out).
  static EmbeddingModel linear(Tensor weight, Tensor bias);

  const std::string& arch() const { return arch_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }
  std::size_t input_dim() const;
  std::size_t embed_dim() const;

  const std::vector<NamedParam>& params() const { return params_; }
  std::vector<NamedParam>& params() { return params_; }
  std::size_t param_count() const;

  /// (batch, N) -> (batch, embed_dim) with parameters held constant.
  Tensor embed(const Tensor& images) const;
  /// Same, using caller-supplied parameter tensors (e.g. from grad_views()).
  Tensor embed(const Tensor& images, std::span<const Tensor> params) const;
  /// Leaves sharing the parameter buffers, each with its own grad slot.
  std::vector<Tensor> grad_views() const;

  /// Free-form tags carried through checkpoints (defense variant, inner epsilon).
  std::map<std::string, std::string> metadata;

 private:
  std::string arch_;
  std::vector<LayerSpec> layers_;
  std::vector<NamedParam> params_;
};

/// The metric recorded in the model's metadata by training; cosine when absent.
Metric model_metric(const EmbeddingModel& model);

/// Embeds a large batch in chunks without recording gradients.
Tensor embed_all(const EmbeddingModel& model, const Tensor& images, std::size_t chunk = 512);
/// Embeds `data` and wraps it as a ranking corpus with labels.
RankingIndex build_index(const EmbeddingModel& model, const Dataset& data, Metric metric);
RankingIndex build_index(const EmbeddingModel& model, const Dataset& data);

enum class LossKind { triplet, contrastive };
std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view name);

struct TrainConfig {
  LossKind loss_kind = LossKind::triplet;
  Metric metric = Metric::cosine;
  float margin_beta = 0.2f;
  float lr = 0.01f;
  std::size_t batch = 32;
  std::size_t epochs = 5;
  std::uint64_t seed = 0;
  /// Anchors visited per epoch; 0 means one per training item.
  std::size_t samples_per_epoch = 0;

  void validate() const;
};

/// Conventional margin for the metric: 0.2 for cosine, 1.0 for Euclidean.
float default_margin(Metric metric);

/// [beta + dq_p - dq_n]_+
double triplet_loss(double dq_p, double dq_n, double beta);
/// same_class: d^2 / 2; otherwise [margin - d]_+^2 / 2.
double contrastive_loss(double d, bool same_class, double margin);

/// Mean triplet loss over matching rows of anchor/positive/negative embeddings.
Tensor triplet_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negative, Metric metric, float beta);
/// Mean contrastive loss over matching rows; `same` holds 1 for matched pairs, 0 otherwise.
Tensor contrastive_loss(const Tensor& a, const Tensor& b, std::span<const float> same, Metric metric, float margin);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainHistory {
  std::vector<double> epoch_loss;
};

struct TrainResult {
  EmbeddingModel model;
  TrainHistory history;
};

/// One batch of samples for the ranking loss. For triplet loss `second` holds
/// positives and `third` negatives; for contrastive loss `second` holds the
/// partners and `same` the match flags.
struct TrainBatch {
  std::vector<std::size_t> anchor;
  std::vector<std::size_t> second;
  std::vector<std::size_t> third;
  std::vector<float> same;
};

/// Uniform sampling: positives share the anchor's class, negatives do not.
class TripletSampler {
 public:
  TripletSampler(std::span<const int> labels, std::uint64_t seed);
  /// The next `size` anchors of the current shuffled pass with their partners.
  TrainBatch next(std::size_t size, LossKind kind);

 private:
  std::vector<int> labels_;
  std::map<int, std::vector<std::size_t>> by_class_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::mt19937_64 rng_;
};

/// Ranking loss of a batch under the model, recorded on the current tape.
Tensor batch_loss(const EmbeddingModel& model, std::span<const Tensor> params, const Tensor& anchor,
                  const Tensor& second, const Tensor& third, std::span<const float> same, const TrainConfig& cfg);

/// One SGD step on images already gathered for a batch; returns the loss.
/// Throws TrainingError on a non-finite loss.
double sgd_step(EmbeddingModel& model, const Tensor& anchor, const Tensor& second, const Tensor& third,
                std::span<const float> same, const TrainConfig& cfg);

/// Plain SGD on the ranking loss. epochs == 0 returns the model unchanged.
TrainResult train(EmbeddingModel model, const Dataset& data, const TrainConfig& cfg);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr std::uint32_t kCheckpointVersion = 1;

void save_model(const EmbeddingModel& model, const std::filesystem::path& path);
EmbeddingModel load_model(const std::filesystem::path& path);

}  // namespace advrank
