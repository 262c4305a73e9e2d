#pragma once

// Channel importance: class-conditioned mean relevance per feature map,
// weighted towards poorly classified classes, plus weight-norm and random
// baselines.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "frsp/data.hpp"
#include "frsp/lrp.hpp"
#include "frsp/model.hpp"

namespace frsp::scoring {

enum class Criterion { FeatureRelevance, L1, L2, Random };
enum class Weighting { Accuracy, Uniform };
enum class Ranking { Signed, Absolute };

std::string_view criterion_name(Criterion c);
/// Accepts feature_relevance | l1 | l2 | random.
Criterion parse_criterion(std::string_view name);

/// Mean over the spatial nodes of every feature map of one sample:
/// (r, h, w) -> r values.
std::vector<float> channel_average(const Tensor& relevance);

class FeatureRelevanceMatrix {
 public:
  FeatureRelevanceMatrix(int layer, std::size_t classes, std::size_t channels);

  int layer() const noexcept { return layer_; }
  std::size_t classes() const noexcept { return classes_; }
  std::size_t channels() const noexcept { return channels_; }
  std::span<const std::size_t> counts() const noexcept { return counts_; }

  void accumulate(int label, std::span<const float> relevance);
  /// Divides row p by its sample count. Throws std::runtime_error naming the
  /// first class without samples.
  void normalize_rows();
  bool normalized() const noexcept { return normalized_; }

  /// (classes, channels), in f32.
  Tensor matrix() const;

 private:
  int layer_;
  std::size_t classes_, channels_;
  std::vector<double> sums_;
  std::vector<std::size_t> counts_;
  bool normalized_ = false;
};

struct ClassAccuracy {
  std::vector<double> acc;
  std::vector<double> lambda;  // acc / max(acc), clamped below at 0.01
  std::vector<double> v;       // 1 / lambda
  double total = 0.0;          // sum of v
};

inline constexpr double kLambdaFloor = 0.01;

ClassAccuracy class_weights(std::span<const double> acc, Weighting mode);

/// (1 / v) * sum_p v_p * FM(p, :)
std::vector<float> feature_scores(const Tensor& fm, const ClassAccuracy& weights);

struct ScoreEntry {
  ChannelRef ref;
  float score = 0.0f;
};
using GlobalScoreTable = std::vector<ScoreEntry>;

struct ScoringConfig {
  Criterion criterion = Criterion::FeatureRelevance;
  lrp::LrpConfig lrp{};
  Weighting weighting = Weighting::Accuracy;
  std::size_t subset = 0;  // 0 scores the whole set
  std::uint64_t seed = 0;  // subset draw and random criterion
  std::size_t batch = 64;
};

struct ScoreResult {
  GlobalScoreTable table;  // ordered by (layer, channel)
  std::vector<double> class_accuracy;  // feature_relevance only
  std::size_t samples = 0;
};

/// Throws std::invalid_argument on an empty scoring set.
ScoreResult score_model(const ModelGraph& model, const Dataset& data,
                        const ScoringConfig& cfg);

/// The `x` smallest scores, lowest first; ties go to the lower (layer,
/// channel). Victims that would leave a layer without channels are skipped.
/// Throws std::invalid_argument when fewer than `x` channels can go.
std::vector<ChannelRef> select_prune_set(const GlobalScoreTable& table, std::size_t x,
                                         Ranking ranking = Ranking::Signed);

/// Per-class accuracy; argmax ties resolve to the lowest class index.
/// Classes without samples report 0.
std::vector<double> classwise_accuracy(const ModelGraph& model, const Dataset& data,
                                       std::size_t batch = 256);

/// Index of the largest logit, first one on ties.
std::size_t argmax_row(const float* logits, std::size_t classes);

}  // namespace frsp::scoring
