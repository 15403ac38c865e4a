#pragma once

#include "advrank/attack.hpp"
#include "advrank/data.hpp"
#include "advrank/model.hpp"

#include <functional>
#include <stdexcept>
#include <string>

namespace advrank {

enum class DefenseVariant { shift_replace, trip_es };
std::string_view to_string(DefenseVariant v);
DefenseVariant parse_defense_variant(std::string_view name);

struct DefenseConfig {
  /// Inner max-shift adversary.
  PerturbationBudget budget = PerturbationBudget::from_epsilon(0.3);
  TrainConfig base;
  DefenseVariant variant = DefenseVariant::shift_replace;
  /// Weight on the summed shift term (trip-es only).
  float trip_es_weight = 1.0f;
  std::string arch = "mlp256";
  /// Initialization seed for the model.
  std::uint64_t init_seed = 0;

  void validate() const;
};

/// Training was aborted because the batch loss exceeded 1e6 or went non-finite.
class DivergedError : public TrainingError {
 public:
  using TrainingError::TrainingError;
};

constexpr double kDivergenceThreshold = 1e6;

struct DefenseStep {
  /// Loss the update was taken on.
  double loss = 0.0;
  /// Plain triplet loss of the clean batch under the pre-update parameters.
  double clean_loss = 0.0;
  /// Triplets dropped because their inner attack produced non-finite values.
  std::size_t skipped = 0;
};

/// Replaces anchor, positive and negative by their max-shift adversarial
/// versions (parameters frozen during the inner attack), then takes one SGD
/// step of the triplet loss on the replacements.
DefenseStep defensive_triplet_step(EmbeddingModel& model, const Tensor& anchor, const Tensor& positive,
                                   const Tensor& negative, const DefenseConfig& cfg);

/// Clean triplet loss plus trip_es_weight times the mean max-shift distance
/// of all batch rows, differentiated with respect to the parameters.
/// Throws DivergedError on a loss above kDivergenceThreshold or non-finite.
DefenseStep trip_es_step(EmbeddingModel& model, const Tensor& anchor, const Tensor& positive, const Tensor& negative,
                         const DefenseConfig& cfg);

struct DefenseHistory {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_clean_loss;
  std::size_t skipped = 0;
  /// Per batch: adversarial loss >= clean loss.
  std::vector<bool> adversarial_not_easier;
};

struct DefenseResult {
  EmbeddingModel model;
  DefenseHistory history;
};

/// Called after every epoch with the epoch number (1-based) and its mean loss.
using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

/// Adversarial training from a fresh `cfg.arch` model. Metadata records the
/// variant and the inner epsilon.
DefenseResult harden(const Dataset& data, const DefenseConfig& cfg, const EpochCallback& on_epoch = {});

}  // namespace advrank
