#include "frsp/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

namespace frsp::scoring {

std::string_view criterion_name(Criterion c) {
  switch (c) {
    case Criterion::FeatureRelevance: return "feature_relevance";
    case Criterion::L1: return "l1";
    case Criterion::L2: return "l2";
    case Criterion::Random: return "random";
  }
  return "?";
}

Criterion parse_criterion(std::string_view name) {
  for (Criterion c : {Criterion::FeatureRelevance, Criterion::L1, Criterion::L2,
                      Criterion::Random}) {
    if (criterion_name(c) == name) return c;
  }
  throw std::invalid_argument("unknown criterion '" + std::string(name) +
                              "' (feature_relevance | l1 | l2 | random)");
}

namespace {

void average_planes(const float* r, std::size_t channels, std::size_t area, float* out) {
  for (std::size_t c = 0; c < channels; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < area; ++i) acc += r[c * area + i];
    out[c] = static_cast<float>(acc / double(area));
  }
}

}  // namespace

std::vector<float> channel_average(const Tensor& relevance) {
  if (relevance.rank() != 3) {
    throw ShapeError("channel_average: expected (r, h, w), got " +
                     shape_str(relevance.shape()));
  }
  std::vector<float> out(relevance.dim(0));
  average_planes(relevance.data(), relevance.dim(0), relevance.dim(1) * relevance.dim(2),
                 out.data());
  return out;
}

FeatureRelevanceMatrix::FeatureRelevanceMatrix(int layer, std::size_t classes,
                                               std::size_t channels)
    : layer_(layer), classes_(classes), channels_(channels),
      sums_(classes * channels, 0.0), counts_(classes, 0) {}

void FeatureRelevanceMatrix::accumulate(int label, std::span<const float> relevance) {
  if (normalized_) throw std::logic_error("FeatureRelevanceMatrix: already normalized");
  if (label < 0 || static_cast<std::size_t>(label) >= classes_) {
    throw std::out_of_range("FeatureRelevanceMatrix: label " + std::to_string(label));
  }
  if (relevance.size() != channels_) {
    throw ShapeError("FeatureRelevanceMatrix layer " + std::to_string(layer_) + ": " +
                     std::to_string(relevance.size()) + " values for " +
                     std::to_string(channels_) + " channels");
  }
  double* row = sums_.data() + static_cast<std::size_t>(label) * channels_;
  for (std::size_t j = 0; j < channels_; ++j) row[j] += relevance[j];
  ++counts_[static_cast<std::size_t>(label)];
}

void FeatureRelevanceMatrix::normalize_rows() {
  for (std::size_t p = 0; p < classes_; ++p) {
    if (counts_[p] == 0) {
      throw std::runtime_error("feature relevance matrix for layer " + std::to_string(layer_) +
                               ": class " + std::to_string(p) +
                               " has no samples; drop the class or re-sample the scoring set");
    }
  }
  for (std::size_t p = 0; p < classes_; ++p) {
    for (std::size_t j = 0; j < channels_; ++j) sums_[p * channels_ + j] /= double(counts_[p]);
  }
  normalized_ = true;
}

Tensor FeatureRelevanceMatrix::matrix() const {
  Tensor m({classes_, channels_});
  for (std::size_t i = 0; i < sums_.size(); ++i) m[i] = static_cast<float>(sums_[i]);
  return m;
}

ClassAccuracy class_weights(std::span<const double> acc, Weighting mode) {
  if (acc.empty()) throw std::invalid_argument("class_weights: no classes");
  const double best = *std::max_element(acc.begin(), acc.end());
  if (!(best > 0.0)) throw std::invalid_argument("class_weights: every class accuracy is zero");
  ClassAccuracy w;
  w.acc.assign(acc.begin(), acc.end());
  for (double a : acc) {
    if (a < 0.0 || a > 1.0) throw std::invalid_argument("class_weights: accuracy outside [0, 1]");
    const double lambda = mode == Weighting::Uniform ? 1.0 : std::max(a / best, kLambdaFloor);
    w.lambda.push_back(lambda);
    w.v.push_back(1.0 / lambda);
    w.total += w.v.back();
  }
  return w;
}

std::vector<float> feature_scores(const Tensor& fm, const ClassAccuracy& weights) {
  if (fm.rank() != 2 || fm.dim(0) != weights.v.size()) {
    throw ShapeError("feature_scores: matrix " + shape_str(fm.shape()) + " vs " +
                     std::to_string(weights.v.size()) + " class weights");
  }
  const std::size_t classes = fm.dim(0), channels = fm.dim(1);
  std::vector<float> fs(channels);
  for (std::size_t j = 0; j < channels; ++j) {
    double acc = 0.0;
    for (std::size_t p = 0; p < classes; ++p) acc += weights.v[p] * fm[p * channels + j];
    fs[j] = static_cast<float>(acc / weights.total);
  }
  return fs;
}

std::size_t argmax_row(const float* logits, std::size_t classes) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < classes; ++k) {
    if (logits[k] > logits[best]) best = k;
  }
  return best;
}

namespace {

std::vector<std::size_t> scoring_indices(std::size_t size, const ScoringConfig& cfg) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (cfg.subset == 0 || cfg.subset >= size) return idx;
  std::mt19937_64 rng(cfg.seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(cfg.subset);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<float> filter_norms(const Tensor& weight, bool squared) {
  const std::size_t filters = weight.dim(0), per = weight.size() / filters;
  std::vector<float> out(filters);
  for (std::size_t f = 0; f < filters; ++f) {
    double acc = 0.0;
    for (std::size_t i = 0; i < per; ++i) {
      const double v = weight[f * per + i];
      acc += squared ? v * v : std::fabs(v);
    }
    out[f] = static_cast<float>(squared ? std::sqrt(acc) : acc);
  }
  return out;
}

}  // namespace

ScoreResult score_model(const ModelGraph& model, const Dataset& data,
                        const ScoringConfig& cfg) {
  if (data.size() == 0) throw std::invalid_argument("score_model: empty scoring set");
  if (cfg.batch == 0) throw std::invalid_argument("score_model: batch must be positive");
  std::vector<int> layers;
  for (int id : model.conv_layers()) {
    if (model.prune_eligible(id)) layers.push_back(id);
  }

  ScoreResult result;
  std::vector<std::vector<float>> per_layer;
  switch (cfg.criterion) {
    case Criterion::L1:
    case Criterion::L2:
      for (int id : layers) {
        per_layer.push_back(filter_norms(model.layer(id).weight, cfg.criterion == Criterion::L2));
      }
      break;
    case Criterion::Random: {
      std::mt19937_64 rng(cfg.seed);
      std::uniform_real_distribution<float> unit(0.0f, 1.0f);
      for (int id : layers) {
        std::vector<float> s(model.layer(id).spec.out_channels);
        for (float& v : s) v = unit(rng);
        per_layer.push_back(std::move(s));
      }
      break;
    }
    case Criterion::FeatureRelevance: {
      const std::vector<std::size_t> idx = scoring_indices(data.size(), cfg);
      const std::size_t classes = model.classes();
      std::vector<FeatureRelevanceMatrix> fms;
      for (int id : layers) fms.emplace_back(id, classes, model.layer(id).spec.out_channels);
      std::vector<std::size_t> correct(classes, 0), seen(classes, 0);
      std::vector<float> avg;
      for (std::size_t at = 0; at < idx.size(); at += cfg.batch) {
        const std::span<const std::size_t> chunk(idx.data() + at,
                                                 std::min(cfg.batch, idx.size() - at));
        const std::vector<int> labels = data.batch_labels(chunk);
        ForwardResult fwd = forward(model, data.batch(chunk), true);
        for (std::size_t b = 0; b < chunk.size(); ++b) {
          const auto y = static_cast<std::size_t>(labels[b]);
          ++seen[y];
          if (argmax_row(fwd.logits.data() + b * classes, classes) == y) ++correct[y];
        }
        const lrp::RelevanceMap map =
            lrp::full_relevance_pass(model, *fwd.trace, labels, cfg.lrp, false);
        for (FeatureRelevanceMatrix& fm : fms) {
          const Tensor& r = map.layers[static_cast<std::size_t>(fm.layer())];
          const std::size_t c = r.dim(1), area = r.dim(2) * r.dim(3);
          avg.resize(c);
          for (std::size_t b = 0; b < chunk.size(); ++b) {
            average_planes(r.data() + b * c * area, c, area, avg.data());
            fm.accumulate(labels[b], avg);
          }
        }
      }
      result.class_accuracy.resize(classes);
      for (std::size_t p = 0; p < classes; ++p) {
        result.class_accuracy[p] = seen[p] ? double(correct[p]) / double(seen[p]) : 0.0;
      }
      const ClassAccuracy weights = class_weights(result.class_accuracy, cfg.weighting);
      for (FeatureRelevanceMatrix& fm : fms) {
        fm.normalize_rows();
        per_layer.push_back(feature_scores(fm.matrix(), weights));
      }
      result.samples = idx.size();
      break;
    }
  }

  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (std::size_t c = 0; c < per_layer[i].size(); ++c) {
      result.table.push_back({{layers[i], c}, per_layer[i][c]});
    }
  }
  return result;
}

std::vector<ChannelRef> select_prune_set(const GlobalScoreTable& table, std::size_t x,
                                         Ranking ranking) {
  std::map<int, std::size_t> live;
  for (const ScoreEntry& e : table) ++live[e.ref.layer];
  if (x > table.size() - live.size()) {
    throw std::invalid_argument("select_prune_set: cannot remove " + std::to_string(x) +
                                " of " + std::to_string(table.size()) + " channels while " +
                                std::to_string(live.size()) + " layers keep one each");
  }
  struct Key {
    float score;
    ChannelRef ref;
  };
  // Max-heap comparator inverted so the heap top is the smallest key.
  auto later = [](const Key& a, const Key& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.ref > b.ref;
  };
  std::vector<Key> heap;
  heap.reserve(table.size());
  for (const ScoreEntry& e : table) {
    if (!std::isfinite(e.score)) {
      throw std::invalid_argument("select_prune_set: non-finite score for layer " +
                                  std::to_string(e.ref.layer));
    }
    heap.push_back({ranking == Ranking::Absolute ? std::fabs(e.score) : e.score, e.ref});
  }
  std::make_heap(heap.begin(), heap.end(), later);
  std::vector<ChannelRef> victims;
  while (victims.size() < x) {
    std::pop_heap(heap.begin(), heap.end(), later);
    const Key k = heap.back();
    heap.pop_back();
    std::size_t& left = live[k.ref.layer];
    if (left <= 1) continue;
    --left;
    victims.push_back(k.ref);
  }
  return victims;
}

std::vector<double> classwise_accuracy(const ModelGraph& model, const Dataset& data,
                                       std::size_t batch) {
  const std::size_t classes = model.classes();
  std::vector<std::size_t> correct(classes, 0), seen(classes, 0);
  std::vector<std::size_t> idx;
  for (std::size_t at = 0; at < data.size(); at += batch) {
    idx.resize(std::min(batch, data.size() - at));
    std::iota(idx.begin(), idx.end(), at);
    const Tensor logits = forward(model, data.batch(idx)).logits;
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const auto y = static_cast<std::size_t>(data.labels[idx[b]]);
      ++seen.at(y);
      if (argmax_row(logits.data() + b * classes, classes) == y) ++correct[y];
    }
  }
  std::vector<double> acc(classes, 0.0);
  for (std::size_t p = 0; p < classes; ++p) {
    if (seen[p]) acc[p] = double(correct[p]) / double(seen[p]);
  }
  return acc;
}

}  // namespace frsp::scoring
