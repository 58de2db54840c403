#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mskl::metrics {

struct PredictionRecord {
  std::vector<double> softmax;
  std::size_t predicted = 0;
  std::size_t actual = 0;

  bool correct() const { return predicted == actual; }
  double confidence() const { return softmax.at(predicted); }
};

// Builds a record with predicted = argmax (lowest index wins ties).
PredictionRecord make_record(std::vector<double> softmax, std::size_t actual);
void validate_record(const PredictionRecord& r);

struct TrustConfig {
  double reward = 1.0;     // exponent on confidence for correct answers
  double penalty = 1.0;    // exponent on (1 - confidence) for wrong answers
  double bandwidth = 0.5;  // kernel bandwidth is bandwidth / sqrt(N)

  void validate() const;
};

// Question-answer trust of a single prediction.
double qa_trust(const PredictionRecord& record, const TrustConfig& config = {});

// Trust values of the records that satisfy a condition. Every member is scored
// as confidence^reward; conditions are not penalized.
std::vector<double> conditional_trust(std::span<const PredictionRecord> records,
                                      const std::function<bool(const PredictionRecord&)>& condition,
                                      const TrustConfig& config = {});

struct DensityCurve {
  std::vector<double> grid;
  std::vector<double> density;
  double bandwidth = 0.0;

  double integral() const;  // trapezoidal
  double first_moment() const;
};

inline constexpr std::size_t kDensityGridPoints = 512;
inline constexpr double kDensityGridLo = -0.5;
inline constexpr double kDensityGridHi = 1.5;

// Gaussian KDE with bandwidth gamma / sqrt(N) on a uniform grid over [-0.5, 1.5].
DensityCurve trust_density(std::span<const double> values, const TrustConfig& config = {});

// Trust score of a condition: mean of its trust values, clipped to [0, 1].
// Empty conditions have no score.
std::optional<double> nts(std::span<const double> values);

// Trust summary for one set of predictions, conditioned on true / false
// predictions per actual class.
struct TrustCondition {
  std::string name;
  std::vector<double> values;
  std::optional<double> score;
  // Mean of the smoothed density, reported next to the raw mean when the two
  // differ by more than 1e-3.
  std::optional<double> smoothed_score;
  std::optional<DensityCurve> density;
};

struct TrustReport {
  std::vector<TrustCondition> conditions;

  const TrustCondition* find(const std::string& name) const;
};

TrustReport trust_report(std::span<const PredictionRecord> records,
                         std::span<const std::string> class_names, const TrustConfig& config = {});

// Correct predictions pooled over all classes / total predictions.
double micro_accuracy(std::span<const PredictionRecord> records);

// Mann-Whitney AUC: fraction of (positive, negative) pairs ordered correctly,
// ties counting one half. labels: nonzero = positive.
double roc_auc(std::span<const double> scores, std::span<const int> labels);

// Binary AUC from records, scoring class 1. Empty when only one class occurs.
std::optional<double> binary_auc(std::span<const PredictionRecord> records);

// Quantile by linear interpolation between order statistics (position
// p * (n - 1) in the sorted sample).
double quantile_linear(std::vector<double> values, double p);

struct TukeyResult {
  std::vector<double> kept;
  std::vector<double> removed;
  std::vector<std::size_t> kept_index;
  std::vector<std::size_t> removed_index;
  double lower_fence = 0.0;
  double upper_fence = 0.0;
  bool filtered = false;  // false when too few values to filter
};

TukeyResult tukey_filter(std::span<const double> values, double k = 1.5);

double mean(std::span<const double> values);
// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
double stddev(std::span<const double> values);

}  // namespace mskl::metrics
