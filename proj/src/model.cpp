#include "advrank/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

namespace advrank {

// ---------------------------------------------------------------------------
// EmbeddingModel

namespace {

void check_chain(const std::vector<LayerSpec>& layers) {
  if (layers.empty()) throw std::invalid_argument("EmbeddingModel: no layers");
  std::size_t width = 0;
  bool first = true;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    if (l.kind == LayerSpec::Kind::relu) {
      if (first) throw std::invalid_argument("EmbeddingModel: first layer must be linear");
      continue;
    }
    if (l.in == 0 || l.out == 0) throw std::invalid_argument("EmbeddingModel: zero-width linear layer");
    if (!first && l.in != width) {
      throw std::invalid_argument("EmbeddingModel: layer " + std::to_string(k) + " expects " + std::to_string(l.in) +
                                  " inputs but the previous layer emits " + std::to_string(width));
    }
    width = l.out;
    first = false;
  }
}

std::vector<NamedParam> deep_copy(const std::vector<NamedParam>& params) {
  std::vector<NamedParam> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, p.value.clone()});
  return out;
}

}  // namespace

EmbeddingModel::EmbeddingModel(std::string arch, std::vector<LayerSpec> layers, std::uint64_t seed)
    : arch_(std::move(arch)), layers_(std::move(layers)) {
  check_chain(layers_);
  std::mt19937_64 rng(seed);
  std::size_t fc = 0;
  for (const auto& l : layers_) {
    if (l.kind != LayerSpec::Kind::linear) continue;
    const float bound = 1.0f / std::sqrt(static_cast<float>(l.in));
    std::uniform_real_distribution<float> init(-bound, bound);
    std::vector<float> w(l.in * l.out), b(l.out);
    for (auto& v : w) v = init(rng);
    for (auto& v : b) v = init(rng);
    const std::string prefix = "fc" + std::to_string(fc++);
    params_.push_back({prefix + ".weight", Tensor({l.in, l.out}, std::move(w))});
    params_.push_back({prefix + ".bias", Tensor({l.out}, std::move(b))});
  }
}

EmbeddingModel::EmbeddingModel(const EmbeddingModel& other)
    : metadata(other.metadata), arch_(other.arch_), layers_(other.layers_), params_(deep_copy(other.params_)) {}

EmbeddingModel& EmbeddingModel::operator=(const EmbeddingModel& other) {
  if (this != &other) {
    metadata = other.metadata;
    arch_ = other.arch_;
    layers_ = other.layers_;
    params_ = deep_copy(other.params_);
  }
  return *this;
}

EmbeddingModel EmbeddingModel::create(std::string_view arch, std::size_t input_dim, std::uint64_t seed) {
  using K = LayerSpec::Kind;
  if (arch == "mlp256") {
    return EmbeddingModel(std::string(arch), {{K::linear, input_dim, 256}, {K::relu}, {K::linear, 256, 32}}, seed);
  }
  if (arch == "mlp128x64") {
    return EmbeddingModel(std::string(arch),
                          {{K::linear, input_dim, 128}, {K::relu}, {K::linear, 128, 64}, {K::relu}, {K::linear, 64, 32}},
                          seed);
  }
  throw std::invalid_argument("unknown architecture '" + std::string(arch) + "' (expected mlp256 or mlp128x64)");
}

EmbeddingModel EmbeddingModel::linear(Tensor weight, Tensor bias) {
  if (weight.dim() != 2 || bias.dim() != 1 || bias.size(0) != weight.size(1)) {
    throw ShapeError("EmbeddingModel::linear", weight.shape(), bias.shape());
  }
  EmbeddingModel m("linear", {{LayerSpec::Kind::linear, weight.size(0), weight.size(1)}}, 0);
  m.params_[0].value = weight.clone();
  m.params_[1].value = bias.clone();
  return m;
}

std::size_t EmbeddingModel::input_dim() const { return layers_.empty() ? 0 : layers_.front().in; }

std::size_t EmbeddingModel::embed_dim() const {
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    if (it->kind == LayerSpec::Kind::linear) return it->out;
  }
  return 0;
}

std::size_t EmbeddingModel::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

Tensor EmbeddingModel::embed(const Tensor& images) const {
  std::vector<Tensor> frozen;
  frozen.reserve(params_.size());
  for (const auto& p : params_) frozen.push_back(p.value.detach());
  return embed(images, frozen);
}

Tensor EmbeddingModel::embed(const Tensor& images, std::span<const Tensor> params) const {
  if (params.size() != params_.size()) {
    throw std::invalid_argument("EmbeddingModel::embed: expected " + std::to_string(params_.size()) +
                                " parameter tensors, got " + std::to_string(params.size()));
  }
  if (images.dim() != 2 || images.size(1) != input_dim()) {
    throw ShapeError("embed: input of shape " + to_string(images.shape()) + " does not match model input (batch, " +
                     std::to_string(input_dim()) + ")");
  }
  Tensor x = images;
  std::size_t p = 0;
  for (const auto& l : layers_) {
    if (l.kind == LayerSpec::Kind::relu) {
      x = relu(x);
    } else {
      x = add(matmul(x, params[p]), params[p + 1]);
      p += 2;
    }
  }
  return x;
}

std::vector<Tensor> EmbeddingModel::grad_views() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value.grad_view());
  return out;
}

Tensor embed_all(const EmbeddingModel& model, const Tensor& images, std::size_t chunk) {
  const std::size_t n = images.size(0);
  const std::size_t d = model.embed_dim();
  std::vector<float> out(n * d);
  const Tensor src = images.detach();
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t end = std::min(n, begin + chunk);
    const Tensor e = model.embed(slice_rows(src, begin, end));
    std::copy(e.data().begin(), e.data().end(), out.begin() + static_cast<std::ptrdiff_t>(begin * d));
  }
  return Tensor({n, d}, std::move(out));
}

RankingIndex build_index(const EmbeddingModel& model, const Dataset& data, Metric metric) {
  return RankingIndex(embed_all(model, data.images), metric, data.labels);
}

RankingIndex build_index(const EmbeddingModel& model, const Dataset& data) {
  return build_index(model, data, model_metric(model));
}

Metric model_metric(const EmbeddingModel& model) {
  const auto it = model.metadata.find("metric");
  return it == model.metadata.end() ? Metric::cosine : parse_metric(it->second);
}

// ---------------------------------------------------------------------------
// Losses

std::string_view to_string(LossKind kind) { return kind == LossKind::triplet ? "triplet" : "contrastive"; }

LossKind parse_loss_kind(std::string_view name) {
  if (name == "triplet") return LossKind::triplet;
  if (name == "contrastive") return LossKind::contrastive;
  throw std::invalid_argument("unknown loss '" + std::string(name) + "'");
}

float default_margin(Metric metric) { return metric == Metric::cosine ? 0.2f : 1.0f; }

void TrainConfig::validate() const {
  if (!(margin_beta >= 0.0f)) throw std::invalid_argument("TrainConfig: margin_beta must be >= 0");
  if (!(lr > 0.0f)) throw std::invalid_argument("TrainConfig: lr must be > 0");
  if (batch == 0) throw std::invalid_argument("TrainConfig: batch must be positive");
}

double triplet_loss(double dq_p, double dq_n, double beta) { return std::max(0.0, beta + dq_p - dq_n); }

double contrastive_loss(double d, bool same_class, double margin) {
  if (same_class) return d * d / 2.0;
  const double h = std::max(0.0, margin - d);
  return h * h / 2.0;
}

Tensor triplet_loss(const Tensor& anchor, const Tensor& positive, const Tensor& negative, Metric metric, float beta) {
  const Tensor dp = row_distance(anchor, positive, metric);
  const Tensor dn = row_distance(anchor, negative, metric);
  return mean(relu(add_scalar(sub(dp, dn), beta)));
}

Tensor contrastive_loss(const Tensor& a, const Tensor& b, std::span<const float> same, Metric metric, float margin) {
  const std::size_t n = a.size(0);
  if (same.size() != n) throw ShapeError("contrastive_loss: " + std::to_string(same.size()) + " flags for " +
                                         std::to_string(n) + " pairs");
  const Tensor d = row_distance(a, b, metric);
  const Tensor is_same({n}, std::vector<float>(same.begin(), same.end()));
  std::vector<float> diff_flags(n);
  std::transform(same.begin(), same.end(), diff_flags.begin(), [](float s) { return 1.0f - s; });
  const Tensor is_diff({n}, std::move(diff_flags));
  const Tensor hinge = relu(add_scalar(neg(d), margin));
  const Tensor per_pair = add(mul(is_same, mul(d, d)), mul(is_diff, mul(hinge, hinge)));
  return scale(mean(per_pair), 0.5f);
}

// ---------------------------------------------------------------------------
// Training

TripletSampler::TripletSampler(std::span<const int> labels, std::uint64_t seed)
    : labels_(labels.begin(), labels.end()), rng_(seed) {
  if (labels_.empty()) throw std::invalid_argument("TripletSampler: empty dataset");
  for (std::size_t i = 0; i < labels_.size(); ++i) by_class_[labels_[i]].push_back(i);
  if (by_class_.size() < 2) throw std::invalid_argument("TripletSampler: need at least two classes");
  order_.resize(labels_.size());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  cursor_ = order_.size();
}

TrainBatch TripletSampler::next(std::size_t size, LossKind kind) {
  TrainBatch b;
  for (std::size_t k = 0; k < size; ++k) {
    if (cursor_ == order_.size()) {
      std::shuffle(order_.begin(), order_.end(), rng_);
      cursor_ = 0;
    }
    const std::size_t a = order_[cursor_++];
    const auto& same = by_class_.at(labels_[a]);
    std::size_t p = a;
    if (same.size() > 1) {
      std::uniform_int_distribution<std::size_t> pick(0, same.size() - 2);
      const std::size_t j = pick(rng_);
      // `same` is sorted, so skipping the anchor's slot keeps the draw uniform.
      const auto pos = static_cast<std::size_t>(std::lower_bound(same.begin(), same.end(), a) - same.begin());
      p = same[j < pos ? j : j + 1];
    }
    std::uniform_int_distribution<std::size_t> any(0, labels_.size() - 1);
    std::size_t n = any(rng_);
    while (labels_[n] == labels_[a]) n = any(rng_);

    b.anchor.push_back(a);
    if (kind == LossKind::triplet) {
      b.second.push_back(p);
      b.third.push_back(n);
    } else {
      std::bernoulli_distribution coin(0.5);
      const bool match = coin(rng_);
      b.second.push_back(match ? p : n);
      b.same.push_back(match ? 1.0f : 0.0f);
    }
  }
  return b;
}

Tensor batch_loss(const EmbeddingModel& model, std::span<const Tensor> params, const Tensor& anchor,
                  const Tensor& second, const Tensor& third, std::span<const float> same, const TrainConfig& cfg) {
  const std::size_t n = anchor.size(0);
  if (cfg.loss_kind == LossKind::triplet) {
    const Tensor e = model.embed(concat_rows({anchor, second, third}), params);
    return triplet_loss(slice_rows(e, 0, n), slice_rows(e, n, 2 * n), slice_rows(e, 2 * n, 3 * n), cfg.metric,
                        cfg.margin_beta);
  }
  const Tensor e = model.embed(concat_rows({anchor, second}), params);
  return contrastive_loss(slice_rows(e, 0, n), slice_rows(e, n, 2 * n), same, cfg.metric, cfg.margin_beta);
}

double sgd_step(EmbeddingModel& model, const Tensor& anchor, const Tensor& second, const Tensor& third,
                std::span<const float> same, const TrainConfig& cfg) {
  const auto views = model.grad_views();
  Tape tape;
  const Tensor loss = batch_loss(model, views, anchor, second, third, same, cfg);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    throw TrainingError("non-finite training loss (" + std::to_string(value) + "); lr=" + std::to_string(cfg.lr) +
                        " margin=" + std::to_string(cfg.margin_beta));
  }
  tape.backward(loss);
  auto& params = model.params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value.mutable_data();
    const auto g = views[i].grad();
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= cfg.lr * g[j];
  }
  return value;
}

TrainResult train(EmbeddingModel model, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  TrainResult result{std::move(model), {}};
  if (cfg.epochs == 0) return result;
  result.model.metadata["metric"] = std::string(to_string(cfg.metric));
  if (data.images.size(1) != result.model.input_dim()) {
    throw ShapeError("train: dataset images " + to_string(data.images.shape()) + " vs model input " +
                     std::to_string(result.model.input_dim()));
  }
  TripletSampler sampler(data.labels, cfg.seed);
  const std::size_t per_epoch = cfg.samples_per_epoch ? cfg.samples_per_epoch : data.size();
  const std::size_t steps = (per_epoch + cfg.batch - 1) / cfg.batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double total = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const auto b = sampler.next(cfg.batch, cfg.loss_kind);
      const Tensor third = b.third.empty() ? Tensor() : data.batch(b.third);
      total += sgd_step(result.model, data.batch(b.anchor), data.batch(b.second), third, b.same, cfg);
    }
    result.history.epoch_loss.push_back(total / static_cast<double>(steps));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout (all integers little-endian):
//   magic "ADVRANK\0" | u32 version | str arch | u32 n_layers { u8 kind, u64 in, u64 out }
//   | u32 n_meta { str key, str value } | u32 n_params { str name, u32 ndim, u64 dims[ndim], f32 data[] }
//   | u64 FNV-1a of everything before it
// where str is u32 length followed by bytes.

namespace {

constexpr char kMagic[8] = {'A', 'D', 'V', 'R', 'A', 'N', 'K', '\0'};

std::uint64_t fnv1a(std::span<const unsigned char> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

class ByteWriter {
 public:
  template <class T>
  void put(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) buf_.push_back(static_cast<unsigned char>(static_cast<std::uint64_t>(v) >> (8 * i)));
  }
  void put_f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void put_str(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { buf_.insert(buf_.end(), p, p + n); }
  std::vector<unsigned char>& bytes() { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::string get_str() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void expect(const char* p, std::size_t n) {
    need(n);
    if (std::memcmp(bytes_.data() + pos_, p, n) != 0) throw CheckpointError("checkpoint: bad magic (not a model file)");
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint: truncated file");
  }
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_model(const EmbeddingModel& model, const std::filesystem::path& path) {
  ByteWriter w;
  w.raw(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_str(model.arch());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.layers().size()));
  for (const auto& l : model.layers()) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(l.kind));
    w.put<std::uint64_t>(l.in);
    w.put<std::uint64_t>(l.out);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.metadata.size()));
  for (const auto& [k, v] : model.metadata) {
    w.put_str(k);
    w.put_str(v);
  }
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.params().size()));
  for (const auto& p : model.params()) {
    w.put_str(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.dim()));
    for (auto d : p.value.shape()) w.put<std::uint64_t>(d);
    for (float v : p.value.data()) w.put_f32(v);
  }
  w.put<std::uint64_t>(fnv1a(w.bytes()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw CheckpointError("failed writing checkpoint " + path.string());
}

EmbeddingModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  ByteReader r(bytes);
  r.expect(kMagic, sizeof kMagic);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const std::string arch = r.get_str();
  const auto n_layers = r.get<std::uint32_t>();
  std::vector<LayerSpec> layers;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    LayerSpec l;
    const auto kind = r.get<std::uint8_t>();
    if (kind != 1 && kind != 2) throw CheckpointError("checkpoint: unknown layer kind " + std::to_string(kind));
    l.kind = static_cast<LayerSpec::Kind>(kind);
    l.in = r.get<std::uint64_t>();
    l.out = r.get<std::uint64_t>();
    layers.push_back(l);
  }
  std::map<std::string, std::string> metadata;
  const auto n_meta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = r.get_str();
    metadata[k] = r.get_str();
  }

  EmbeddingModel model;
  try {
    model = EmbeddingModel(arch, layers, 0);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: bad architecture: ") + e.what());
  }
  model.metadata = std::move(metadata);

  const auto n_params = r.get<std::uint32_t>();
  if (n_params != model.params().size()) {
    throw CheckpointError("checkpoint: " + std::to_string(n_params) + " parameter arrays, architecture needs " +
                          std::to_string(model.params().size()));
  }
  for (auto& p : model.params()) {
    const std::string name = r.get_str();
    if (name != p.name) throw CheckpointError("checkpoint: expected parameter " + p.name + ", found " + name);
    const auto ndim = r.get<std::uint32_t>();
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) shape.push_back(r.get<std::uint64_t>());
    if (shape != p.value.shape()) {
      throw CheckpointError("checkpoint: parameter " + name + " has shape " + to_string(shape) + ", expected " +
                            to_string(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    for (auto& v : dst) v = r.get_f32();
  }
  const std::size_t body = r.pos();
  const auto stored = r.get<std::uint64_t>();
  if (stored != fnv1a(std::span(bytes).first(body))) throw CheckpointError("checkpoint: checksum mismatch (corrupt file)");
  if (r.remaining() != 0) throw CheckpointError("checkpoint: trailing bytes after checksum");
  return model;
}

}  // namespace advrank
