#pragma once

// Discrete AdaBoost over decision stumps, logistic calibration, and cascades.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace lesion {

/// Dense row-major sample matrix.
class FeatureMatrix {
 public:
  FeatureMatrix() = default;
  FeatureMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void append_row(std::span<const double> values);

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

struct Stump {
  int feature = 0;
  double threshold = 0.0;
  int polarity = 1;

  /// +polarity above the threshold, -polarity at or below it.
  int predict(std::span<const double> x) const {
    return (x[static_cast<std::size_t>(feature)] > threshold ? 1 : -1) * polarity;
  }
};

struct WeightedStump {
  Stump stump;
  double alpha = 0.0;
};

/// p = 1 / (1 + exp(-(a * margin + b))).
struct Calibration {
  double a = 1.0;
  double b = 0.0;
};

struct StrongClassifier {
  std::vector<WeightedStump> stumps;
  Calibration calibration;

  /// Sum of alpha * h(x) divided by the sum of alphas; in [-1, 1].
  double margin(std::span<const double> x) const;
  int max_feature_index() const;
  /// Distinct feature indices referenced by the stumps, ascending.
  std::vector<int> used_features() const;
};

struct RoundStats {
  Stump stump;
  double weighted_error = 0.0;
  double alpha = 0.0;
  double exp_loss = 0.0;      // mean exp(-y F(x)) after this round
  double weight_sum = 0.0;    // sample weights after renormalization
  double training_error = 0.0;
};

/// Throws ValidationError on N < 2, label values other than +-1, or a
/// single class. Stops early when a stump separates perfectly or no stump
/// beats chance.
StrongClassifier train_adaboost(const FeatureMatrix& x, std::span<const int> y, int rounds,
                                std::vector<RoundStats>* trace = nullptr);

/// Calibrated positive-class probability.
double score(const StrongClassifier& c, std::span<const double> x);

/// Maximum-likelihood logistic fit of labels on margins (Platt targets).
Calibration fit_calibration(std::span<const double> margins, std::span<const int> y);

// ---------------------------------------------------------------- cascade

struct StageSpec {
  std::string extractor;  // feature family id, e.g. "haar" or "ray"
  int rounds = 200;
  double target_recall = 0.99;
};

struct CascadeStage {
  std::string extractor;
  StrongClassifier classifier;
  double reject_threshold = 0.5;
};

struct StageReport {
  std::size_t input_count = 0;
  std::size_t positives = 0;
  std::size_t negatives = 0;
  std::size_t survivors = 0;
  double recall = 0.0;
  bool fallback = false;
};

struct CascadeTraining {
  std::vector<CascadeStage> stages;
  std::vector<StageReport> reports;
  std::vector<std::string> warnings;
};

/// Computes the feature rows for `rows` (indices into the label list) for
/// stage `stage`.
using StageFeatureFn =
    std::function<FeatureMatrix(std::size_t stage, std::span<const std::size_t> rows)>;

CascadeTraining train_cascade(const std::vector<StageSpec>& stages, std::span<const int> labels,
                              const StageFeatureFn& features);

struct CascadeDecision {
  bool accepted = true;
  double final_score = 0.0;
  std::size_t stages_evaluated = 0;
};

/// Stops at the first stage scoring below its threshold; features are
/// requested lazily per stage.
CascadeDecision apply_cascade(std::span<const CascadeStage> stages,
                              const std::function<std::vector<double>(std::size_t)>& features);

inline CascadeDecision apply_cascade(std::span<const CascadeStage> stages,
                                     std::span<const double> x) {
  return apply_cascade(stages, [&](std::size_t) { return std::vector<double>(x.begin(), x.end()); });
}

}  // namespace lesion
