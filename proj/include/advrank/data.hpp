#pragma once

#include "advrank/attack_kind.hpp"
#include "advrank/metrics.hpp"
#include "advrank/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advrank {

enum class Split { train, test };

/// Images flattened to rows of pixels in [0, 1].
struct Dataset {
  Tensor images;  // (n, rows*cols)
  std::vector<int> labels;
  std::string name;
  Split split = Split::train;
  std::size_t rows = 28;
  std::size_t cols = 28;

  std::size_t size() const { return labels.size(); }
  std::size_t pixels() const { return rows * cols; }
  /// Copy of the selected rows as an (k, pixels) tensor.
  Tensor batch(std::span<const std::size_t> items) const;
  Tensor image(std::size_t item) const;
  /// The first n items.
  Dataset head(std::size_t n) const;
};

class IdxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image/label pair; gzip-compressed files are detected and
/// inflated transparently.
Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                 std::string name = "idx", Split split = Split::train);

/// Writes the pair back out. Pixels are stored as round(255 * v).
void write_idx(const Dataset& data, const std::filesystem::path& images_path,
               const std::filesystem::path& labels_path, bool gzip = false);

/// Loads `<dir>/train-*` or `<dir>/t10k-*` (with or without .gz).
Dataset load_mnist_split(const std::filesystem::path& dir, Split split);

struct SyntheticSpec {
  std::size_t n_classes = 3;
  std::size_t points_per_class = 50;
  std::size_t dim = 16;
  double cluster_std = 0.02;
  std::uint64_t seed = 0;
};

/// Gaussian clusters with centers at least 6 * cluster_std apart, clipped to [0, 1].
/// Items are interleaved by class (item i has label i % n_classes).
Dataset make_synthetic(const SyntheticSpec& spec);

/// Fraction of the corpus that counts as "top ranked" for the "-" protocols.
constexpr double kTopFraction = 0.01;

/// Counterparts for one attack on `item`. "+" kinds draw uniformly from the
/// corpus minus the item; "-" kinds draw from the items whose normalized rank
/// with `item` as the ranking query is <= kTopFraction. Throws when the pool
/// is smaller than `count`.
std::vector<std::size_t> sample_attack_targets(const RankingIndex& index, AttackKind kind, std::size_t item,
                                               std::size_t count, std::mt19937_64& rng);

/// Items within the top `fraction` of the ranking list for `item` (item excluded).
std::vector<std::size_t> top_ranked_pool(const RankingIndex& index, std::size_t item, double fraction);

/// `count` distinct indices drawn uniformly from `pool` (partial Fisher-Yates).
std::vector<std::size_t> sample_distinct(std::span<const std::size_t> pool, std::size_t count, std::mt19937_64& rng);

}  // namespace advrank
