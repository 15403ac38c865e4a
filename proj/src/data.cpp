#include "advrank/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

namespace advrank {

Tensor Dataset::batch(std::span<const std::size_t> items) const { return gather_rows(images.detach(), items); }

Tensor Dataset::image(std::size_t item) const {
  const std::size_t one[] = {item};
  return batch(one);
}

Dataset Dataset::head(std::size_t n) const {
  n = std::min(n, size());
  Dataset out = *this;
  out.images = slice_rows(images.detach(), 0, n);
  out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

// ---------------------------------------------------------------------------
// IDX

namespace {

struct GzCloser {
  void operator()(gzFile f) const {
    if (f) gzclose(f);
  }
};
using GzHandle = std::unique_ptr<gzFile_s, GzCloser>;

GzHandle open_read(const std::filesystem::path& path) {
  GzHandle f(gzopen(path.c_str(), "rb"));
  if (!f) throw IdxError("cannot open " + path.string());
  return f;
}

void read_exact(gzFile f, void* dst, std::size_t n, const std::filesystem::path& path, const char* what) {
  auto* p = static_cast<unsigned char*>(dst);
  std::size_t got = 0;
  while (got < n) {
    const unsigned chunk = static_cast<unsigned>(std::min<std::size_t>(n - got, 1u << 30));
    const int r = gzread(f, p + got, chunk);
    if (r <= 0) break;
    got += static_cast<std::size_t>(r);
  }
  if (got != n) {
    throw IdxError(path.string() + ": truncated " + what + " (expected " + std::to_string(n) + " bytes, got " +
                   std::to_string(got) + ")");
  }
}

std::uint32_t read_be32(gzFile f, const std::filesystem::path& path) {
  unsigned char b[4];
  read_exact(f, b, 4, path, "header");
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) | (std::uint32_t{b[2]} << 8) | b[3];
}

std::string hex(std::uint32_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s = "0x";
  for (int shift = 28; shift >= 0; shift -= 4) s += digits[(v >> shift) & 0xf];
  return s;
}

void expect_magic(std::uint32_t got, std::uint32_t want, const std::filesystem::path& path) {
  if (got != want) throw IdxError(path.string() + ": bad magic " + hex(got) + ", expected " + hex(want));
}

struct Writer {
  gzFile gz = nullptr;
  std::FILE* raw = nullptr;

  Writer(const std::filesystem::path& path, bool gzip) {
    if (gzip) {
      gz = gzopen(path.c_str(), "wb");
    } else {
      raw = std::fopen(path.c_str(), "wb");
    }
    if (!gz && !raw) throw IdxError("cannot write " + path.string());
  }
  ~Writer() {
    if (gz) gzclose(gz);
    if (raw) std::fclose(raw);
  }
  Writer(const Writer&) = delete;
  Writer& operator=(const Writer&) = delete;

  void put(const void* p, std::size_t n) {
    const bool ok = gz ? gzwrite(gz, p, static_cast<unsigned>(n)) == static_cast<int>(n) : std::fwrite(p, 1, n, raw) == n;
    if (!ok) throw IdxError("write failed");
  }
  void be32(std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    put(b, 4);
  }
};

}  // namespace

Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::string name, Split split) {
  Dataset out;
  out.name = std::move(name);
  out.split = split;

  std::vector<unsigned char> pixels;
  std::size_t n_images = 0;
  {
    auto f = open_read(images_path);
    expect_magic(read_be32(f.get(), images_path), kIdxImageMagic, images_path);
    n_images = read_be32(f.get(), images_path);
    out.rows = read_be32(f.get(), images_path);
    out.cols = read_be32(f.get(), images_path);
    pixels.resize(n_images * out.rows * out.cols);
    read_exact(f.get(), pixels.data(), pixels.size(), images_path, "image payload");
  }
  std::vector<unsigned char> raw_labels;
  {
    auto f = open_read(labels_path);
    expect_magic(read_be32(f.get(), labels_path), kIdxLabelMagic, labels_path);
    const std::size_t n_labels = read_be32(f.get(), labels_path);
    if (n_labels != n_images) {
      throw IdxError("image/label count mismatch: " + std::to_string(n_images) + " images, " +
                     std::to_string(n_labels) + " labels");
    }
    raw_labels.resize(n_labels);
    read_exact(f.get(), raw_labels.data(), raw_labels.size(), labels_path, "label payload");
  }

  std::vector<float> values(pixels.size());
  std::transform(pixels.begin(), pixels.end(), values.begin(),
                 [](unsigned char b) { return static_cast<float>(b) / 255.0f; });
  out.images = Tensor({n_images, out.rows * out.cols}, std::move(values));
  out.labels.assign(raw_labels.begin(), raw_labels.end());
  return out;
}

void write_idx(const Dataset& data, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path, bool gzip) {
  if (data.images.numel() != data.size() * data.pixels()) {
    throw IdxError("write_idx: image tensor does not match labels and image dims");
  }
  {
    Writer w(images_path, gzip);
    w.be32(kIdxImageMagic);
    w.be32(static_cast<std::uint32_t>(data.size()));
    w.be32(static_cast<std::uint32_t>(data.rows));
    w.be32(static_cast<std::uint32_t>(data.cols));
    std::vector<unsigned char> bytes(data.images.numel());
    const auto v = data.images.data();
    for (std::size_t i = 0; i < bytes.size(); ++i) {
      bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(v[i], 0.0f, 1.0f) * 255.0f));
    }
    w.put(bytes.data(), bytes.size());
  }
  {
    Writer w(labels_path, gzip);
    w.be32(kIdxLabelMagic);
    w.be32(static_cast<std::uint32_t>(data.size()));
    std::vector<unsigned char> bytes(data.labels.begin(), data.labels.end());
    w.put(bytes.data(), bytes.size());
  }
}

Dataset load_mnist_split(const std::filesystem::path& dir, Split split) {
  const std::string prefix = split == Split::train ? "train" : "t10k";
  auto pick = [&](const std::string& stem) {
    for (const char* ext : {".gz", ""}) {
      auto p = dir / (stem + ext);
      if (std::filesystem::exists(p)) return p;
    }
    throw IdxError("missing " + (dir / stem).string() + "[.gz]");
  };
  return load_idx(pick(prefix + "-images-idx3-ubyte"), pick(prefix + "-labels-idx1-ubyte"), "mnist", split);
}

// ---------------------------------------------------------------------------
// Synthetic clusters

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.n_classes == 0 || spec.points_per_class == 0 || spec.dim == 0 || !(spec.cluster_std > 0.0)) {
    throw std::invalid_argument("make_synthetic: empty or degenerate spec");
  }
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> uni(0.2, 0.8);
  const double min_sep = 6.0 * spec.cluster_std;

  std::vector<std::vector<double>> centers;
  for (int attempt = 0; centers.size() < spec.n_classes; ++attempt) {
    if (attempt > 10000) throw std::invalid_argument("make_synthetic: cannot place separated centers");
    std::vector<double> c(spec.dim);
    for (auto& v : c) v = uni(rng);
    bool ok = true;
    for (const auto& other : centers) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < spec.dim; ++j) d2 += (c[j] - other[j]) * (c[j] - other[j]);
      ok = ok && std::sqrt(d2) >= min_sep;
    }
    if (ok) centers.push_back(std::move(c));
  }

  std::normal_distribution<double> noise(0.0, spec.cluster_std);
  const std::size_t n = spec.n_classes * spec.points_per_class;
  std::vector<float> values(n * spec.dim);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % spec.n_classes;
    labels[i] = static_cast<int>(cls);
    for (std::size_t j = 0; j < spec.dim; ++j) {
      values[i * spec.dim + j] = static_cast<float>(std::clamp(centers[cls][j] + noise(rng), 0.0, 1.0));
    }
  }
  Dataset out;
  out.images = Tensor({n, spec.dim}, std::move(values));
  out.labels = std::move(labels);
  out.name = "synthetic";
  out.rows = 1;
  out.cols = spec.dim;
  return out;
}

// ---------------------------------------------------------------------------
// Attack target sampling

std::vector<std::size_t> sample_distinct(std::span<const std::size_t> pool, std::size_t count, std::mt19937_64& rng) {
  if (count > pool.size()) {
    throw std::invalid_argument("sample_distinct: need " + std::to_string(count) + " items from a pool of " +
                                std::to_string(pool.size()));
  }
  std::vector<std::size_t> items(pool.begin(), pool.end());
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, items.size() - 1);
    std::swap(items[i], items[pick(rng)]);
  }
  items.resize(count);
  return items;
}

std::vector<std::size_t> top_ranked_pool(const RankingIndex& index, std::size_t item, double fraction) {
  const std::size_t self[] = {item};
  const auto anchor = index.embedding(item);
  const auto sorted = index.sorted_distances(anchor, self);
  std::vector<std::size_t> pool;
  for (std::size_t j = 0; j < index.size(); ++j) {
    if (j == item) continue;
    const std::size_t rank = count_closer(sorted, distance(anchor, index.embedding(j), index.metric()));
    if (normalized_rank(rank, index.size()) <= fraction) pool.push_back(j);
  }
  return pool;
}

std::vector<std::size_t> sample_attack_targets(const RankingIndex& index, AttackKind kind, std::size_t item,
                                               std::size_t count, std::mt19937_64& rng) {
  if (item >= index.size()) throw std::out_of_range("sample_attack_targets: item out of range");
  if (kind == AttackKind::max_shift) return {};
  std::vector<std::size_t> pool;
  if (raises_rank(kind)) {
    pool.reserve(index.size() - 1);
    for (std::size_t j = 0; j < index.size(); ++j) {
      if (j != item) pool.push_back(j);
    }
  } else {
    pool = top_ranked_pool(index, item, kTopFraction);
    if (pool.size() < count) {
      throw std::invalid_argument("sample_attack_targets: top-ranked pool holds " + std::to_string(pool.size()) +
                                  " items but " + std::to_string(count) +
                                  " are needed; the corpus is too small for this protocol");
    }
  }
  return sample_distinct(pool, count, rng);
}

}  // namespace advrank
